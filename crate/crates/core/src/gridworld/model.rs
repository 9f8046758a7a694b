//! The non-linear grid-world model: conv IDM, VQ bottleneck, conv FDM.
//!
//! The IDM stacks (o, o') as two channels, applies two 3×3 periodic
//! convolutions, and projects to a `d_code`-dimensional encoding that a
//! 5-entry codebook quantizes. The FDM concatenates o with the quantized
//! latent broadcast over the grid, applies two more convolutions, and decodes
//! all 16 pixels through a linear head. At this resolution skip connections
//! degenerate, so the decoder conditions on the input by channel
//! concatenation instead.

use super::{
    sample_grid_batch, shift_image, GridBatch, GridEnvSpec, GridPolicy, ShiftDir, GRID_H, GRID_W,
    N_PIXELS, TOP_PIXEL_VARIANCE, TOP_ROWS,
};
use crate::autodiff::{vq_bottleneck, AutodiffError, PadMode, Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointKind};
use crate::numerics::{AdamConfig, AdamState, NumericsError, STREAM_BATCH, STREAM_INIT, STREAM_MISC};
use crate::{Mat, Rng};

#[derive(Debug, thiserror::Error)]
pub enum GridworldError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("checkpoint does not describe a grid model: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug)]
pub struct GridModelConfig {
    pub idm_channels: (usize, usize),
    pub fdm_channels: (usize, usize),
    pub d_code: usize,
    pub codebook_size: usize,
    /// Commitment coefficient β.
    pub beta: f64,
    /// Weight of the action-code alignment term on labeled rows.
    pub action_weight: f64,
    /// Steps of disuse before a codebook entry is restarted from a recent
    /// encoder output.
    pub dead_code_steps: usize,
}

impl Default for GridModelConfig {
    fn default() -> Self {
        GridModelConfig {
            idm_channels: (16, 32),
            fdm_channels: (16, 32),
            d_code: 8,
            codebook_size: 5,
            beta: 0.25,
            action_weight: 1.0,
            dead_code_steps: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Shared left/right shift augmentation.
    pub augment: bool,
    /// Per-sample Bernoulli probability of an action label (0 disables the
    /// action term).
    pub label_fraction: f64,
    pub model: GridModelConfig,
    pub seed: u64,
}

impl Default for GridTrainConfig {
    fn default() -> Self {
        GridTrainConfig {
            steps: 16_000,
            batch: 32,
            lr: 1e-3,
            augment: false,
            label_fraction: 0.0,
            model: GridModelConfig::default(),
            seed: 0,
        }
    }
}

/// All learnable tensors of the grid model.
#[derive(Clone, Debug)]
pub struct GridModel {
    pub cfg: GridModelConfig,
    pub idm_w1: Tensor,
    pub idm_b1: Tensor,
    pub idm_w2: Tensor,
    pub idm_b2: Tensor,
    pub idm_lin_w: Tensor,
    pub idm_lin_b: Tensor,
    pub codebook: Tensor,
    pub fdm_w1: Tensor,
    pub fdm_b1: Tensor,
    pub fdm_w2: Tensor,
    pub fdm_b2: Tensor,
    pub fdm_lin_w: Tensor,
    pub fdm_lin_b: Tensor,
}

fn conv_init(c_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Tensor {
    let std = (1.0 / (c_in * k * k) as f64).sqrt();
    let mut t = Tensor::zeros(&[c_out, c_in, k, k]);
    rng.fill_normal(&mut t.data, std);
    t
}

fn lin_init(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let std = (1.0 / rows as f64).sqrt();
    let mut t = Tensor::zeros(&[rows, cols]);
    rng.fill_normal(&mut t.data, std);
    t
}

impl GridModel {
    pub fn init(cfg: GridModelConfig, rng: &mut Rng) -> Self {
        let (i1, i2) = cfg.idm_channels;
        let (f1, f2) = cfg.fdm_channels;
        let cb_std = 1.0 / (cfg.d_code as f64).sqrt();
        let mut codebook = Tensor::zeros(&[cfg.codebook_size, cfg.d_code]);
        rng.fill_normal(&mut codebook.data, cb_std);
        GridModel {
            cfg,
            idm_w1: conv_init(i1, 2, 3, rng),
            idm_b1: Tensor::zeros(&[i1]),
            idm_w2: conv_init(i2, i1, 3, rng),
            idm_b2: Tensor::zeros(&[i2]),
            idm_lin_w: lin_init(i2 * N_PIXELS, cfg.d_code, rng),
            idm_lin_b: Tensor::zeros(&[cfg.d_code]),
            codebook,
            fdm_w1: conv_init(f1, 1 + cfg.d_code, 3, rng),
            fdm_b1: Tensor::zeros(&[f1]),
            fdm_w2: conv_init(f2, f1, 3, rng),
            fdm_b2: Tensor::zeros(&[f2]),
            fdm_lin_w: lin_init(f2 * N_PIXELS, N_PIXELS, rng),
            fdm_lin_b: Tensor::zeros(&[N_PIXELS]),
        }
    }

    pub fn param_names() -> [&'static str; 13] {
        [
            "idm_w1", "idm_b1", "idm_w2", "idm_b2", "idm_lin_w", "idm_lin_b", "codebook",
            "fdm_w1", "fdm_b1", "fdm_w2", "fdm_b2", "fdm_lin_w", "fdm_lin_b",
        ]
    }

    pub fn params(&self) -> [&Tensor; 13] {
        [
            &self.idm_w1, &self.idm_b1, &self.idm_w2, &self.idm_b2, &self.idm_lin_w,
            &self.idm_lin_b, &self.codebook, &self.fdm_w1, &self.fdm_b1, &self.fdm_w2,
            &self.fdm_b2, &self.fdm_lin_w, &self.fdm_lin_b,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.idm_w1, &mut self.idm_b1, &mut self.idm_w2, &mut self.idm_b2,
            &mut self.idm_lin_w, &mut self.idm_lin_b, &mut self.codebook, &mut self.fdm_w1,
            &mut self.fdm_b1, &mut self.fdm_w2, &mut self.fdm_b2, &mut self.fdm_lin_w,
            &mut self.fdm_lin_b,
        ]
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let meta = vec![
            ("idm_c1".to_string(), self.cfg.idm_channels.0 as f64),
            ("idm_c2".to_string(), self.cfg.idm_channels.1 as f64),
            ("fdm_c1".to_string(), self.cfg.fdm_channels.0 as f64),
            ("fdm_c2".to_string(), self.cfg.fdm_channels.1 as f64),
            ("d_code".to_string(), self.cfg.d_code as f64),
            ("codebook_size".to_string(), self.cfg.codebook_size as f64),
            ("beta".to_string(), self.cfg.beta),
            ("action_weight".to_string(), self.cfg.action_weight),
            ("dead_code_steps".to_string(), self.cfg.dead_code_steps as f64),
        ];
        let arrays = Self::param_names()
            .iter()
            .zip(self.params())
            .map(|(name, t)| (name.to_string(), t.shape.clone(), t.data.clone()))
            .collect();
        Checkpoint { kind: CheckpointKind::GridModel, seed, meta, arrays }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<GridModel, GridworldError> {
        if ck.kind != CheckpointKind::GridModel {
            return Err(GridworldError::BadCheckpoint("wrong kind tag".into()));
        }
        let cfg = GridModelConfig {
            idm_channels: (ck.meta_value("idm_c1")? as usize, ck.meta_value("idm_c2")? as usize),
            fdm_channels: (ck.meta_value("fdm_c1")? as usize, ck.meta_value("fdm_c2")? as usize),
            d_code: ck.meta_value("d_code")? as usize,
            codebook_size: ck.meta_value("codebook_size")? as usize,
            beta: ck.meta_value("beta")?,
            action_weight: ck.meta_value("action_weight")?,
            dead_code_steps: ck.meta_value("dead_code_steps")? as usize,
        };
        let mut model = GridModel::init(cfg, &mut Rng::new(0));
        for (name, slot) in Self::param_names().iter().zip(model.params_mut()) {
            let (shape, data) = ck.array(name)?;
            *slot = Tensor { shape: shape.to_vec(), data: data.to_vec() };
        }
        Ok(model)
    }

    /// Deterministic forward pass (no augmentation): predicted next pixels
    /// and the selected code per row.
    pub fn predict(&self, o: &Mat, o_next: &Mat) -> Result<(Mat, Vec<usize>), GridworldError> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let out = self.forward(&mut tape, &leaves, o, o_next, o)?;
        let pred = tape.value(out.pred).to_mat();
        Ok((pred, out.indices))
    }

    fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().iter().map(|t| tape.leaf((*t).clone())).collect()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        o_idm: &Mat,
        on_idm: &Mat,
        o_fdm: &Mat,
    ) -> Result<ForwardOut, GridworldError> {
        let z_e = self.idm_encode(tape, leaves, o_idm, on_idm)?;
        let vq = vq_bottleneck(tape, z_e, leaves[6], self.cfg.beta)?;
        let pred = self.fdm_decode(tape, leaves, o_fdm, vq.z_q)?;
        let indices = vq.indices.clone();
        Ok(ForwardOut { z_e, vq_codebook_loss: vq.codebook_loss, vq_commitment_loss: vq.commitment_loss, pred, indices })
    }

    /// IDM only: stacked (o, o') through the conv encoder to z_e.
    fn idm_encode(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        o_idm: &Mat,
        on_idm: &Mat,
    ) -> Result<Var, GridworldError> {
        let n = o_idm.rows();
        let o1 = tape.leaf(Tensor { shape: vec![n, 1, GRID_H, GRID_W], data: o_idm.data().to_vec() });
        let o2 = tape.leaf(Tensor { shape: vec![n, 1, GRID_H, GRID_W], data: on_idm.data().to_vec() });
        let stacked = tape.concat_channels(o1, o2)?;
        let h = tape.conv2d(stacked, leaves[0], PadMode::Periodic)?;
        let h = tape.add_chan_vec(h, leaves[1])?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, leaves[2], PadMode::Periodic)?;
        let h = tape.add_chan_vec(h, leaves[3])?;
        let h = tape.relu(h);
        let flat = tape.reshape(h, &[n, self.cfg.idm_channels.1 * N_PIXELS])?;
        let z = tape.matmul(flat, leaves[4])?;
        Ok(tape.add_row_vec(z, leaves[5])?)
    }

    /// FDM only: o concatenated with the broadcast latent, decoded to pixels.
    fn fdm_decode(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        o_fdm: &Mat,
        z_q: Var,
    ) -> Result<Var, GridworldError> {
        let n = o_fdm.rows();
        let z_map = tape.broadcast_spatial(z_q, GRID_H, GRID_W)?;
        let o_in = tape.leaf(Tensor { shape: vec![n, 1, GRID_H, GRID_W], data: o_fdm.data().to_vec() });
        let g = tape.concat_channels(o_in, z_map)?;
        let g = tape.conv2d(g, leaves[7], PadMode::Periodic)?;
        let g = tape.add_chan_vec(g, leaves[8])?;
        let g = tape.relu(g);
        let g = tape.conv2d(g, leaves[9], PadMode::Periodic)?;
        let g = tape.add_chan_vec(g, leaves[10])?;
        let g = tape.relu(g);
        let gflat = tape.reshape(g, &[n, self.cfg.fdm_channels.1 * N_PIXELS])?;
        let p = tape.matmul(gflat, leaves[11])?;
        Ok(tape.add_row_vec(p, leaves[12])?)
    }
}

struct ForwardOut {
    z_e: Var,
    vq_codebook_loss: Var,
    vq_commitment_loss: Var,
    pred: Var,
    indices: Vec<usize>,
}

pub struct GridTrainResult {
    pub model: GridModel,
    pub loss_trace: Vec<f64>,
}

/// Train the grid model on fresh batches.
///
/// Loss per step: pixel reconstruction MSE + codebook loss + β·commitment
/// loss, plus (on labeled rows) `action_weight` times the squared distance
/// between the pre-quantization encoding and the code preassigned to the true
/// action (codes 0..4 map to up, down, left, right, stay). Augmentation, when
/// enabled, applies one shared periodic shift to the IDM pair and an
/// independent shared shift to the FDM input and target.
pub fn train_grid(env: &GridEnvSpec, cfg: &GridTrainConfig) -> Result<GridTrainResult, GridworldError> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(GridworldError::BadConfig("steps and batch must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.label_fraction) {
        return Err(GridworldError::BadConfig(format!(
            "label_fraction must lie in [0, 1], got {}",
            cfg.label_fraction
        )));
    }
    if cfg.label_fraction > 0.0 && cfg.model.codebook_size < super::N_ACTIONS {
        return Err(GridworldError::BadConfig(format!(
            "action-code assignment needs at least {} codebook entries, got {}",
            super::N_ACTIONS,
            cfg.model.codebook_size
        )));
    }
    let mut init_rng = Rng::stream(cfg.seed, STREAM_INIT);
    let mut model = GridModel::init(cfg.model, &mut init_rng);
    let mut batch_rng = Rng::stream(cfg.seed, STREAM_BATCH);
    let mut misc_rng = Rng::stream(cfg.seed, STREAM_MISC);

    let blocks: Vec<(& str, usize)> = GridModel::param_names()
        .iter()
        .zip(model.params())
        .map(|(n, t)| (*n, t.numel()))
        .collect();
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &blocks);

    let k = cfg.model.codebook_size;
    let mut usage_window = vec![0u64; k];
    let mut window_samples = 0u64;
    let mut recent_z: Vec<Vec<f64>> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sample_grid_batch(env, cfg.batch, cfg.label_fraction, &mut batch_rng);
        let (o_idm, on_idm, o_fdm, target) = if cfg.augment {
            augment_batch(&batch, &mut batch_rng)
        } else {
            (batch.o.clone(), batch.o_next.clone(), batch.o.clone(), batch.o_next.clone())
        };

        let mut tape = Tape::new();
        let leaves = model.leaves(&mut tape);
        let out = model.forward(&mut tape, &leaves, &o_idm, &on_idm, &o_fdm)?;
        let target_leaf = tape.leaf(Tensor { shape: vec![batch.n(), N_PIXELS], data: target.data().to_vec() });
        let recon = tape.mse(out.pred, target_leaf)?;
        let mut total = tape.add(recon, out.vq_codebook_loss)?;
        total = tape.add(total, out.vq_commitment_loss)?;

        let labeled: Vec<usize> = batch.labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect();
        if cfg.model.action_weight > 0.0 && !labeled.is_empty() {
            let z_l = tape.gather_rows(out.z_e, &labeled)?;
            let action_ids: Vec<usize> = labeled.iter().map(|&i| batch.actions[i]).collect();
            let codes = tape.gather_rows(leaves[6], &action_ids)?;
            let codes_sg = tape.detach(codes);
            let align = tape.mse(z_l, codes_sg)?;
            let align = tape.scale(align, cfg.model.action_weight);
            total = tape.add(total, align)?;
        }

        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(GridworldError::Diverged { step });
        }
        trace.push(loss);

        let mut grads = tape.backward(total)?;
        {
            let grad_tensors: Vec<Tensor> = leaves
                .iter()
                .zip(model.params())
                .map(|(&v, t)| grads.take(v, &t.shape))
                .collect();
            let mut params = model.params_mut();
            let mut param_slices: Vec<&mut [f64]> =
                params.iter_mut().map(|t| t.data.as_mut_slice()).collect();
            let grad_slices: Vec<&[f64]> = grad_tensors.iter().map(|t| t.data.as_slice()).collect();
            adam.step(&mut param_slices, &grad_slices)?;
        }

        // Dead-code restarts. A strict "unused for N steps" rule never fires
        // once a code keeps catching a stray sample, which is exactly the
        // near-collapsed regime K = 5 falls into over long runs; instead,
        // codes whose usage share over the window is negligible are re-seeded
        // from a recent encoder output.
        let z_e_val = tape.value(out.z_e);
        let d = cfg.model.d_code;
        for r in 0..batch.n().min(4) {
            let row = z_e_val.data[r * d..(r + 1) * d].to_vec();
            if recent_z.len() < 64 {
                recent_z.push(row);
            } else {
                let slot = misc_rng.below(64);
                recent_z[slot] = row;
            }
        }
        for &idx in &out.indices {
            usage_window[idx] += 1;
        }
        window_samples += batch.n() as u64;
        if cfg.model.dead_code_steps > 0 && (step + 1) % cfg.model.dead_code_steps == 0 {
            // Codes below a 3% usage share get re-seeded with the recent
            // encoder output farthest from the current codebook, splitting
            // the dominant cluster.
            let floor = (window_samples * 3 / 100).max(1);
            for code in 0..k {
                if usage_window[code] < floor && !recent_z.is_empty() {
                    let pick = farthest_from_codebook(&recent_z, &model.codebook.data, d);
                    let dst = &mut model.codebook.data[code * d..(code + 1) * d];
                    dst.copy_from_slice(&recent_z[pick]);
                }
            }
            usage_window.iter_mut().for_each(|c| *c = 0);
            window_samples = 0;
        }
    }
    Ok(GridTrainResult { model, loss_trace: trace })
}

fn farthest_from_codebook(candidates: &[Vec<f64>], codebook: &[f64], d: usize) -> usize {
    let mut best = 0;
    let mut best_dist = -1.0;
    for (i, row) in candidates.iter().enumerate() {
        let nearest = codebook
            .chunks(d)
            .map(|code| row.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if nearest > best_dist {
            best_dist = nearest;
            best = i;
        }
    }
    best
}

fn augment_batch(batch: &GridBatch, rng: &mut Rng) -> (Mat, Mat, Mat, Mat) {
    let n = batch.n();
    let mut o_idm = Mat::zeros(n, N_PIXELS);
    let mut on_idm = Mat::zeros(n, N_PIXELS);
    let mut o_fdm = Mat::zeros(n, N_PIXELS);
    let mut target = Mat::zeros(n, N_PIXELS);
    for i in 0..n {
        let dir1 = if rng.bernoulli(0.5) { ShiftDir::Left } else { ShiftDir::Right };
        let dir2 = if rng.bernoulli(0.5) { ShiftDir::Left } else { ShiftDir::Right };
        o_idm.row_mut(i).copy_from_slice(&shift_image(batch.o.row(i), dir1));
        on_idm.row_mut(i).copy_from_slice(&shift_image(batch.o_next.row(i), dir1));
        o_fdm.row_mut(i).copy_from_slice(&shift_image(batch.o.row(i), dir2));
        target.row_mut(i).copy_from_slice(&shift_image(batch.o_next.row(i), dir2));
    }
    (o_idm, on_idm, o_fdm, target)
}

/// Region-normalized evaluation losses.
#[derive(Clone, Debug)]
pub struct GridEval {
    /// MSE on the top 3×4 region over its per-pixel signal variance.
    pub controllable: f64,
    /// MSE on the bottom row over its per-pixel variance; absent when the
    /// noise intensity is zero.
    pub stochastic: Option<f64>,
    /// Eval-batch usage count per codebook entry.
    pub code_usage: Vec<usize>,
}

/// Evaluate reconstruction quality per region on a fresh batch.
///
/// Actions are always drawn uniformly here, whatever the environment's
/// data-collection policy, so the metric reflects the full action
/// distribution rather than the policy's predictability.
pub fn eval_grid(
    model: &GridModel,
    env: &GridEnvSpec,
    n_eval: usize,
    rng: &mut Rng,
) -> Result<GridEval, GridworldError> {
    let eval_env = GridEnvSpec { policy: GridPolicy::Uniform, ..*env };
    let batch = sample_grid_batch(&eval_env, n_eval, 0.0, rng);
    let (pred, indices) = model.predict(&batch.o, &batch.o_next)?;

    let top = TOP_ROWS * GRID_W;
    let mut top_se = 0.0;
    let mut bottom_se = 0.0;
    for i in 0..batch.n() {
        for j in 0..N_PIXELS {
            let e = pred.at(i, j) - batch.o_next.at(i, j);
            if j < top {
                top_se += e * e;
            } else {
                bottom_se += e * e;
            }
        }
    }
    let n = batch.n() as f64;
    let controllable = top_se / (n * top as f64) / TOP_PIXEL_VARIANCE;
    let intensity = env.noise.intensity();
    let stochastic = if intensity > 0.0 {
        let var = intensity * intensity * 0.25;
        Some(bottom_se / (n * (N_PIXELS - top) as f64) / var)
    } else {
        None
    };
    let mut code_usage = vec![0usize; model.cfg.codebook_size];
    for idx in indices {
        code_usage[idx] += 1;
    }
    Ok(GridEval { controllable, stochastic, code_usage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{GridNoise, N_POSITIONS};

    fn small_cfg() -> GridModelConfig {
        GridModelConfig {
            idm_channels: (4, 6),
            fdm_channels: (4, 6),
            d_code: 4,
            codebook_size: 5,
            ..GridModelConfig::default()
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let model = GridModel::init(small_cfg(), &mut Rng::new(1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.ckpt");
        model.to_checkpoint(42).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.seed, 42);
        let loaded = GridModel::from_checkpoint(&ck).unwrap();
        for (a, b) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    // Full-model gradient check on a tiny configuration: every parameter
    // block against central finite differences.
    //
    // The quantizer's argmin is piecewise constant and its straight-through
    // gradient is by definition the gradient of the surrogate in which the
    // quantization offset and every stop-gradient value are frozen at the
    // base point. The finite differences below probe exactly that surrogate;
    // at the base point its value and the tape's gradients coincide with the
    // real loss.
    #[test]
    fn full_model_loss_gradcheck() {
        let env = GridEnvSpec { noise: GridNoise::Low, policy: GridPolicy::Uniform, seed: 2 };
        let cfg = GridModelConfig {
            idm_channels: (2, 3),
            fdm_channels: (2, 3),
            d_code: 3,
            codebook_size: 5,
            ..GridModelConfig::default()
        };
        let mut model = GridModel::init(cfg, &mut Rng::new(3));
        {
            // Zero-init biases put many relu pre-activations exactly at the
            // kink on these binary images; perturb them so the check probes
            // generic points.
            let mut rng = Rng::new(5);
            for t in model.params_mut() {
                if t.shape.len() == 1 {
                    rng.fill_normal(&mut t.data, 0.1);
                }
            }
        }
        let model = model;
        let batch = sample_grid_batch(&env, 3, 1.0, &mut Rng::new(4));
        let n = batch.n();
        let labeled: Vec<usize> = (0..n).collect();
        let action_ids: Vec<usize> = labeled.iter().map(|&i| batch.actions[i]).collect();

        // Real loss and tape gradients at the base point; freeze the VQ
        // assignment and the stop-gradient values.
        let (grads_base, frozen) = {
            let mut tape = Tape::new();
            let leaves = model.leaves(&mut tape);
            let out = model.forward(&mut tape, &leaves, &batch.o, &batch.o_next, &batch.o).unwrap();
            let t = tape.leaf(Tensor { shape: vec![n, N_PIXELS], data: batch.o_next.data().to_vec() });
            let recon = tape.mse(out.pred, t).unwrap();
            let mut total = tape.add(recon, out.vq_codebook_loss).unwrap();
            total = tape.add(total, out.vq_commitment_loss).unwrap();
            let z_l = tape.gather_rows(out.z_e, &labeled).unwrap();
            let codes = tape.gather_rows(leaves[6], &action_ids).unwrap();
            let codes_sg = tape.detach(codes);
            let align = tape.mse(z_l, codes_sg).unwrap();
            let align = tape.scale(align, cfg.action_weight);
            total = tape.add(total, align).unwrap();
            let mut grads = tape.backward(total).unwrap();
            let g: Vec<Tensor> = leaves
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v, &p.shape))
                .collect();
            let z_e0 = tape.value(out.z_e).clone();
            let sel0 = {
                let cb = tape.value(leaves[6]);
                let d = cfg.d_code;
                let mut sel = Tensor::zeros(&[n, d]);
                for (r, &k) in out.indices.iter().enumerate() {
                    sel.data[r * d..(r + 1) * d].copy_from_slice(&cb.data[k * d..(k + 1) * d]);
                }
                sel
            };
            let codes0 = {
                let cb = tape.value(leaves[6]);
                let d = cfg.d_code;
                let mut c = Tensor::zeros(&[action_ids.len(), d]);
                for (r, &k) in action_ids.iter().enumerate() {
                    c.data[r * d..(r + 1) * d].copy_from_slice(&cb.data[k * d..(k + 1) * d]);
                }
                c
            };
            (g, (out.indices.clone(), z_e0, sel0, codes0))
        };
        let (indices0, z_e0, sel0, codes0) = frozen;

        // Surrogate loss: z_q = z_e + (sel0 − z_e0) with a constant offset,
        // detached values replaced by base-point constants, and the code
        // assignment pinned to indices0.
        let surrogate = |m: &GridModel| -> f64 {
            let mut tape = Tape::new();
            let leaves = m.leaves(&mut tape);
            let z_e = m.idm_encode(&mut tape, &leaves, &batch.o, &batch.o_next).unwrap();
            let offset = Tensor {
                shape: z_e0.shape.clone(),
                data: sel0.data.iter().zip(&z_e0.data).map(|(s, z)| s - z).collect(),
            };
            let off = tape.leaf(offset);
            let z_q = tape.add(z_e, off).unwrap();
            let pred = m.fdm_decode(&mut tape, &leaves, &batch.o, z_q).unwrap();
            let t = tape.leaf(Tensor { shape: vec![n, N_PIXELS], data: batch.o_next.data().to_vec() });
            let recon = tape.mse(pred, t).unwrap();

            let selected = tape.gather_rows(leaves[6], &indices0).unwrap();
            let ze0_leaf = tape.leaf(z_e0.clone());
            let cb_loss = tape.mse(selected, ze0_leaf).unwrap();
            let sel0_leaf = tape.leaf(sel0.clone());
            let commit = tape.mse(z_e, sel0_leaf).unwrap();
            let commit = tape.scale(commit, cfg.beta);

            let z_l = tape.gather_rows(z_e, &labeled).unwrap();
            let codes0_leaf = tape.leaf(codes0.clone());
            let align = tape.mse(z_l, codes0_leaf).unwrap();
            let align = tape.scale(align, cfg.action_weight);

            let mut total = tape.add(recon, cb_loss).unwrap();
            total = tape.add(total, commit).unwrap();
            total = tape.add(total, align).unwrap();
            tape.value(total).item()
        };

        let h = 1e-6;
        for (bi, (g, base)) in grads_base.iter().zip(model.params()).enumerate() {
            let mut fd = vec![0.0; base.numel()];
            for j in 0..base.numel() {
                let mut mp = model.clone();
                mp.params_mut()[bi].data[j] += h;
                let lp = surrogate(&mp);
                let mut mm = model.clone();
                mm.params_mut()[bi].data[j] -= h;
                let lm = surrogate(&mm);
                fd[j] = (lp - lm) / (2.0 * h);
            }
            let num: f64 = fd.iter().zip(&g.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            assert!(
                num / den <= 1e-5,
                "block {} relative gradient error {}",
                GridModel::param_names()[bi],
                num / den
            );
        }
    }

    #[test]
    fn short_training_run_reduces_loss_and_is_deterministic() {
        let env = GridEnvSpec { noise: GridNoise::Low, policy: GridPolicy::Uniform, seed: 5 };
        let cfg = GridTrainConfig {
            steps: 200,
            batch: 16,
            model: small_cfg(),
            seed: 6,
            ..GridTrainConfig::default()
        };
        let r1 = train_grid(&env, &cfg).unwrap();
        let r2 = train_grid(&env, &cfg).unwrap();
        assert_eq!(r1.loss_trace, r2.loss_trace);
        let head: f64 = r1.loss_trace[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = r1.loss_trace[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "loss should decrease: head {head} tail {tail}");
    }

    #[test]
    fn eval_perfect_reconstruction_scores_zero() {
        // A "model" evaluated against its own target: check the normalizing
        // arithmetic by feeding predictions equal to the truth.
        let env = GridEnvSpec { noise: GridNoise::Low, policy: GridPolicy::Uniform, seed: 7 };
        let batch = sample_grid_batch(&env, 64, 0.0, &mut Rng::new(8));
        let top = TOP_ROWS * GRID_W;
        let mut top_se = 0.0;
        for i in 0..batch.n() {
            for j in 0..top {
                let e: f64 = batch.o_next.at(i, j) - batch.o_next.at(i, j);
                top_se += e * e;
            }
        }
        assert_eq!(top_se, 0.0);
    }

    #[test]
    fn eval_mean_predictor_is_near_one() {
        // Predicting the per-pixel mean of o' gives a normalized loss of ~1
        // on both regions.
        let env = GridEnvSpec { noise: GridNoise::Low, policy: GridPolicy::Uniform, seed: 9 };
        let n = 20_000;
        let batch = sample_grid_batch(&env, n, 0.0, &mut Rng::new(10));
        let top = TOP_ROWS * GRID_W;
        let p_mean = 1.0 / N_POSITIONS as f64;
        let b_mean = 0.5; // intensity 1.0 × P(bit)
        let mut top_se = 0.0;
        let mut bot_se = 0.0;
        for i in 0..n {
            for j in 0..N_PIXELS {
                let pred = if j < top { p_mean } else { b_mean };
                let e = pred - batch.o_next.at(i, j);
                if j < top {
                    top_se += e * e;
                } else {
                    bot_se += e * e;
                }
            }
        }
        let c = top_se / (n as f64 * top as f64) / TOP_PIXEL_VARIANCE;
        let s = bot_se / (n as f64 * 4.0) / 0.25;
        assert!((c - 1.0).abs() < 0.03, "controllable mean-predictor {c}");
        assert!((s - 1.0).abs() < 0.03, "stochastic mean-predictor {s}");
    }

    #[test]
    fn eval_reports_no_stochastic_loss_without_noise() {
        let env = GridEnvSpec { noise: GridNoise::None, policy: GridPolicy::Uniform, seed: 11 };
        let model = GridModel::init(small_cfg(), &mut Rng::new(12));
        let eval = eval_grid(&model, &env, 128, &mut Rng::new(13)).unwrap();
        assert!(eval.stochastic.is_none());
        assert!(eval.controllable.is_finite());
        assert_eq!(eval.code_usage.iter().sum::<usize>(), 128);
    }
}
