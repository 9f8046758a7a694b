//! Adam optimizer over named flat parameter blocks.

use super::NumericsError;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer state: step counter plus first/second-moment accumulators,
/// one pair per parameter block, shaped like the block.
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, blocks: &[(&str, usize)]) -> Self {
        AdamState {
            cfg,
            step: 0,
            names: blocks.iter().map(|(n, _)| n.to_string()).collect(),
            m: blocks.iter().map(|&(_, len)| vec![0.0; len]).collect(),
            v: blocks.iter().map(|&(_, len)| vec![0.0; len]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Override the learning rate (used by schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One bias-corrected Adam update across all blocks.
    ///
    /// `params[i]` and `grads[i]` must match the shape registered for block i.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NumericsError> {
        assert_eq!(params.len(), self.m.len(), "block count mismatch");
        assert_eq!(grads.len(), self.m.len(), "block count mismatch");
        for (i, g) in grads.iter().enumerate() {
            assert_eq!(g.len(), self.m[i].len(), "block {} length mismatch", self.names[i]);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFiniteGrad { block: i, name: self.names[i].clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for i in 0..self.m.len() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            let p = &mut *params[i];
            for j in 0..g.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
        Ok(())
    }
}
