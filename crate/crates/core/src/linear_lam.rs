//! The linear latent action model and its training loop.
//!
//! The inverse dynamics model maps an observation pair to a latent,
//! `z = C·o + D·o'`, and the forward dynamics model predicts the next
//! observation from the first one plus the latent, `ô' = A·o + B·z`. Training
//! minimizes the mean squared reconstruction error, optionally with shared
//! additive augmentation vectors (one shared by both IDM inputs, another
//! shared by the FDM input and the target) and an auxiliary action-prediction
//! head `â = E·z` fit on labeled rows only.

use crate::datagen::{sample_aug, sample_batch, Batch, EnvSpec};
use crate::numerics::{
    solve_lse, AdamConfig, AdamState, NumericsError, STREAM_AUG, STREAM_BATCH, STREAM_INIT,
};
use crate::{Mat, Rng};

#[derive(Debug, thiserror::Error)]
pub enum LamError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape { op: &'static str, expected: String, got: String },
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("action head E is not present on this model")]
    MissingActionHead,
    #[error("batch has no labeled rows")]
    NoLabeledRows,
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

/// Learnable matrices. `e` is the optional action-prediction head.
#[derive(Clone, Debug)]
pub struct LinearLamParams {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub e: Option<Mat>,
}

impl LinearLamParams {
    pub fn d_o(&self) -> usize {
        self.a.rows()
    }

    pub fn d_z(&self) -> usize {
        self.b.cols()
    }

    /// Random initialization with i.i.d. N(0, 1/d_o) entries.
    pub fn init(d_o: usize, d_z: usize, action_dim: Option<usize>, rng: &mut Rng) -> Self {
        let s = (1.0 / d_o as f64).sqrt();
        LinearLamParams {
            a: rng.normal_mat(d_o, d_o).scale(s),
            b: rng.normal_mat(d_o, d_z).scale(s),
            c: rng.normal_mat(d_z, d_o).scale(s),
            d: rng.normal_mat(d_z, d_o).scale(s),
            e: action_dim.map(|d_a| rng.normal_mat(d_a, d_z).scale(s)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite()
            && self.b.is_finite()
            && self.c.is_finite()
            && self.d.is_finite()
            && self.e.as_ref().map_or(true, Mat::is_finite)
    }

    pub fn to_checkpoint(&self, seed: u64) -> crate::checkpoint::Checkpoint {
        let mut arrays = vec![
            ("a".to_string(), vec![self.a.rows(), self.a.cols()], self.a.data().to_vec()),
            ("b".to_string(), vec![self.b.rows(), self.b.cols()], self.b.data().to_vec()),
            ("c".to_string(), vec![self.c.rows(), self.c.cols()], self.c.data().to_vec()),
            ("d".to_string(), vec![self.d.rows(), self.d.cols()], self.d.data().to_vec()),
        ];
        if let Some(e) = &self.e {
            arrays.push(("e".to_string(), vec![e.rows(), e.cols()], e.data().to_vec()));
        }
        crate::checkpoint::Checkpoint {
            kind: crate::checkpoint::CheckpointKind::LinearLam,
            seed,
            meta: vec![
                ("d_o".to_string(), self.d_o() as f64),
                ("d_z".to_string(), self.d_z() as f64),
                ("has_e".to_string(), if self.e.is_some() { 1.0 } else { 0.0 }),
            ],
            arrays,
        }
    }

    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<Self, LamError> {
        use crate::checkpoint::CheckpointKind;
        if ck.kind != CheckpointKind::LinearLam {
            return Err(LamError::BadConfig("checkpoint is not a linear LAM".into()));
        }
        let get = |name: &str| -> Result<Mat, LamError> {
            let (shape, data) = ck
                .array(name)
                .map_err(|e| LamError::BadConfig(format!("checkpoint: {e}")))?;
            if shape.len() != 2 {
                return Err(LamError::BadConfig(format!("array {name} is not a matrix")));
            }
            Ok(Mat::from_vec(shape[0], shape[1], data.to_vec()))
        };
        let has_e = ck.meta_value("has_e").map(|v| v != 0.0).unwrap_or(false);
        Ok(LinearLamParams {
            a: get("a")?,
            b: get("b")?,
            c: get("c")?,
            d: get("d")?,
            e: if has_e { Some(get("e")?) } else { None },
        })
    }
}

/// Learning-rate schedule across training steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    LinearDecay { start: f64, end: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::LinearDecay { start, end } => {
                let t = if total_steps > 1 { step as f64 / (total_steps - 1) as f64 } else { 0.0 };
                start + (end - start) * t
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub d_z: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    /// Per-element variance of the shared augmentation vectors (0 disables).
    pub aug_variance: f64,
    /// Train the action head `E` on labeled rows.
    pub action_head: bool,
    /// Weight of the action term; defaults to `label_fraction` when absent.
    pub action_weight: Option<f64>,
    /// Fraction of rows carrying action labels, in [0, 1].
    pub label_fraction: f64,
    /// Block action-head gradients from flowing into C and D.
    pub stop_gradient_action: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_z: 8,
            steps: 4000,
            batch: 128,
            lr: LrSchedule::Constant(1e-3),
            aug_variance: 0.0,
            action_head: false,
            action_weight: None,
            label_fraction: 0.0,
            stop_gradient_action: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn resolved_action_weight(&self) -> f64 {
        self.action_weight.unwrap_or(self.label_fraction)
    }
}

fn check_len(op: &'static str, got: usize, expected: usize) -> Result<(), LamError> {
    if got != expected {
        return Err(LamError::Shape { op, expected: expected.to_string(), got: got.to_string() });
    }
    Ok(())
}

/// IDM on a single transition: `z = C(o+k1) + D(o'+k1)`, k1 defaulting to 0.
pub fn idm_forward(
    p: &LinearLamParams,
    o: &[f64],
    o_next: &[f64],
    k1: Option<&[f64]>,
) -> Result<Vec<f64>, LamError> {
    let d_o = p.d_o();
    check_len("idm_forward", o.len(), d_o)?;
    check_len("idm_forward", o_next.len(), d_o)?;
    if let Some(k) = k1 {
        check_len("idm_forward", k.len(), d_o)?;
    }
    let aug = |v: &[f64]| -> Vec<f64> {
        match k1 {
            Some(k) => v.iter().zip(k).map(|(a, b)| a + b).collect(),
            None => v.to_vec(),
        }
    };
    let zc = p.c.matvec(&aug(o));
    let zd = p.d.matvec(&aug(o_next));
    Ok(zc.iter().zip(&zd).map(|(a, b)| a + b).collect())
}

/// FDM on a single transition: `ô' = A(o+k2) + B·z`, k2 defaulting to 0.
pub fn fdm_forward(
    p: &LinearLamParams,
    o: &[f64],
    z: &[f64],
    k2: Option<&[f64]>,
) -> Result<Vec<f64>, LamError> {
    let d_o = p.d_o();
    check_len("fdm_forward", o.len(), d_o)?;
    check_len("fdm_forward", z.len(), p.d_z())?;
    if let Some(k) = k2 {
        check_len("fdm_forward", k.len(), d_o)?;
    }
    let o_in: Vec<f64> = match k2 {
        Some(k) => o.iter().zip(k).map(|(a, b)| a + b).collect(),
        None => o.to_vec(),
    };
    let ao = p.a.matvec(&o_in);
    let bz = p.b.matvec(z);
    Ok(ao.iter().zip(&bz).map(|(a, b)| a + b).collect())
}

/// Batched IDM; rows are samples.
pub fn idm_forward_batch(
    p: &LinearLamParams,
    o: &Mat,
    o_next: &Mat,
    k1: Option<&Mat>,
) -> Result<Mat, LamError> {
    check_len("idm_forward_batch", o.cols(), p.d_o())?;
    check_len("idm_forward_batch", o_next.cols(), p.d_o())?;
    let (o_in, on_in) = match k1 {
        Some(k) => (o.add(k), o_next.add(k)),
        None => (o.clone(), o_next.clone()),
    };
    Ok(o_in.matmul_nt(&p.c).add(&on_in.matmul_nt(&p.d)))
}

/// Batched FDM; rows are samples.
pub fn fdm_forward_batch(
    p: &LinearLamParams,
    o: &Mat,
    z: &Mat,
    k2: Option<&Mat>,
) -> Result<Mat, LamError> {
    check_len("fdm_forward_batch", o.cols(), p.d_o())?;
    check_len("fdm_forward_batch", z.cols(), p.d_z())?;
    let o_in = match k2 {
        Some(k) => o.add(k),
        None => o.clone(),
    };
    Ok(o_in.matmul_nt(&p.a).add(&z.matmul_nt(&p.b)))
}

/// Reconstruction loss with fixed augmentation draws (both `None` for the
/// plain loss): mean over samples of ‖ô' − (o'+k2)‖².
pub fn recon_loss_with(p: &LinearLamParams, batch: &Batch, k1: Option<&Mat>, k2: Option<&Mat>) -> f64 {
    let z = idm_forward_batch(p, &batch.o, &batch.o_next, k1).expect("batch shapes");
    let pred = fdm_forward_batch(p, &batch.o, &z, k2).expect("batch shapes");
    let target = match k2 {
        Some(k) => batch.o_next.add(k),
        None => batch.o_next.clone(),
    };
    let r = pred.sub(&target);
    r.data().iter().map(|v| v * v).sum::<f64>() / batch.n() as f64
}

/// Reconstruction loss; augmentation vectors are drawn fresh per evaluation
/// when `aug_variance > 0`.
pub fn recon_loss(p: &LinearLamParams, batch: &Batch, aug_variance: f64, rng: &mut Rng) -> f64 {
    if aug_variance > 0.0 {
        let k1 = sample_aug(batch.n(), p.d_o(), aug_variance, rng);
        let k2 = sample_aug(batch.n(), p.d_o(), aug_variance, rng);
        recon_loss_with(p, batch, Some(&k1), Some(&k2))
    } else {
        recon_loss_with(p, batch, None, None)
    }
}

/// Mean squared action-prediction error over labeled rows: mean ‖E·z − a‖².
pub fn action_loss(p: &LinearLamParams, batch: &Batch) -> Result<f64, LamError> {
    let e = p.e.as_ref().ok_or(LamError::MissingActionHead)?;
    let labeled = batch.labeled_indices();
    if labeled.is_empty() {
        return Err(LamError::NoLabeledRows);
    }
    let z = idm_forward_batch(p, &batch.o, &batch.o_next, None)?;
    let z_l = z.select_rows(&labeled);
    let a_l = batch.a.select_rows(&labeled);
    let r = z_l.matmul_nt(e).sub(&a_l);
    Ok(r.data().iter().map(|v| v * v).sum::<f64>() / labeled.len() as f64)
}

/// Loss value and analytic gradients for one batch.
pub struct LossGrads {
    pub recon: f64,
    pub action: Option<f64>,
    pub total: f64,
    pub ga: Mat,
    pub gb: Mat,
    pub gc: Mat,
    pub gd: Mat,
    pub ge: Option<Mat>,
}

/// Forward pass plus exact gradients of
/// `recon + action_weight · action_loss` with the given augmentation draws.
pub fn loss_and_grads(
    p: &LinearLamParams,
    batch: &Batch,
    k1: Option<&Mat>,
    k2: Option<&Mat>,
    action_weight: f64,
    stop_gradient_action: bool,
) -> Result<LossGrads, LamError> {
    let n = batch.n() as f64;
    let (o_idm, on_idm) = match k1 {
        Some(k) => (batch.o.add(k), batch.o_next.add(k)),
        None => (batch.o.clone(), batch.o_next.clone()),
    };
    let (o_fdm, target) = match k2 {
        Some(k) => (batch.o.add(k), batch.o_next.add(k)),
        None => (batch.o.clone(), batch.o_next.clone()),
    };
    let z = o_idm.matmul_nt(&p.c).add(&on_idm.matmul_nt(&p.d));
    let pred = o_fdm.matmul_nt(&p.a).add(&z.matmul_nt(&p.b));
    let r = pred.sub(&target);
    let recon = r.data().iter().map(|v| v * v).sum::<f64>() / n;

    let scale = 2.0 / n;
    let ga = r.matmul_tn(&o_fdm).scale(scale);
    let gb = r.matmul_tn(&z).scale(scale);
    let mut dz = r.matmul(&p.b).scale(scale);

    let mut action = None;
    let mut ge = None;
    let mut total = recon;
    if action_weight > 0.0 {
        if let Some(e) = p.e.as_ref() {
            let labeled = batch.labeled_indices();
            if !labeled.is_empty() {
                let n_l = labeled.len() as f64;
                let z_l = z.select_rows(&labeled);
                let a_l = batch.a.select_rows(&labeled);
                let ra = z_l.matmul_nt(e).sub(&a_l);
                let a_loss = ra.data().iter().map(|v| v * v).sum::<f64>() / n_l;
                action = Some(a_loss);
                total += action_weight * a_loss;
                let w = 2.0 * action_weight / n_l;
                ge = Some(ra.matmul_tn(&z_l).scale(w));
                if !stop_gradient_action {
                    let dz_l = ra.matmul(e).scale(w);
                    for (r_local, &r_global) in labeled.iter().enumerate() {
                        for j in 0..dz.cols() {
                            let v = dz.at(r_global, j) + dz_l.at(r_local, j);
                            dz.set(r_global, j, v);
                        }
                    }
                }
            }
        }
    }

    let gc = dz.matmul_tn(&o_idm);
    let gd = dz.matmul_tn(&on_idm);
    Ok(LossGrads { recon, action, total, ga, gb, gc, gd, ge })
}

/// Training output: final parameters plus the per-step loss trace.
pub struct TrainResult {
    pub params: LinearLamParams,
    pub loss_trace: Vec<f64>,
}

/// Train a linear LAM on fresh batches from the environment.
///
/// Deterministic given `(env, cfg)`: batches, augmentation draws, and
/// initialization each use a fixed sub-stream of `cfg.seed`.
pub fn train(env: &EnvSpec, cfg: &TrainConfig) -> Result<TrainResult, LamError> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(LamError::BadConfig("steps and batch must be at least 1".into()));
    }
    if cfg.d_z == 0 {
        return Err(LamError::BadConfig("d_z must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.label_fraction) {
        return Err(LamError::BadConfig(format!(
            "label_fraction must lie in [0, 1], got {}",
            cfg.label_fraction
        )));
    }
    if cfg.action_head && cfg.label_fraction == 0.0 {
        return Err(LamError::BadConfig("action_head requires label_fraction > 0".into()));
    }

    let mut init_rng = Rng::stream(cfg.seed, STREAM_INIT);
    let action_dim = if cfg.action_head { Some(env.d_a) } else { None };
    let mut p = LinearLamParams::init(env.d_o, cfg.d_z, action_dim, &mut init_rng);

    let mut blocks: Vec<(&str, usize)> = vec![
        ("A", p.a.data().len()),
        ("B", p.b.data().len()),
        ("C", p.c.data().len()),
        ("D", p.d.data().len()),
    ];
    if let Some(e) = &p.e {
        blocks.push(("E", e.data().len()));
    }
    let mut adam = AdamState::new(
        AdamConfig { lr: cfg.lr.at(0, cfg.steps), ..AdamConfig::default() },
        &blocks,
    );

    let mut batch_rng = Rng::stream(cfg.seed, STREAM_BATCH);
    let mut aug_rng = Rng::stream(cfg.seed, STREAM_AUG);
    let action_weight = if cfg.action_head { cfg.resolved_action_weight() } else { 0.0 };
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sample_batch(env, cfg.batch, cfg.label_fraction, &mut batch_rng);
        let (k1, k2) = if cfg.aug_variance > 0.0 {
            (
                Some(sample_aug(cfg.batch, env.d_o, cfg.aug_variance, &mut aug_rng)),
                Some(sample_aug(cfg.batch, env.d_o, cfg.aug_variance, &mut aug_rng)),
            )
        } else {
            (None, None)
        };
        let lg = loss_and_grads(
            &p,
            &batch,
            k1.as_ref(),
            k2.as_ref(),
            action_weight,
            cfg.stop_gradient_action,
        )?;
        if !lg.total.is_finite() {
            return Err(LamError::Diverged { step });
        }
        trace.push(lg.total);

        adam.set_lr(cfg.lr.at(step, cfg.steps));
        match (&mut p.e, &lg.ge) {
            (Some(e), Some(ge)) => {
                adam.step(
                    &mut [
                        p.a.data_mut(),
                        p.b.data_mut(),
                        p.c.data_mut(),
                        p.d.data_mut(),
                        e.data_mut(),
                    ],
                    &[lg.ga.data(), lg.gb.data(), lg.gc.data(), lg.gd.data(), ge.data()],
                )?;
            }
            (Some(e), None) => {
                // No labeled rows this batch: E gets a zero gradient.
                let zero = vec![0.0; e.data().len()];
                adam.step(
                    &mut [
                        p.a.data_mut(),
                        p.b.data_mut(),
                        p.c.data_mut(),
                        p.d.data_mut(),
                        e.data_mut(),
                    ],
                    &[lg.ga.data(), lg.gb.data(), lg.gc.data(), lg.gd.data(), &zero],
                )?;
            }
            (None, _) => {
                adam.step(
                    &mut [p.a.data_mut(), p.b.data_mut(), p.c.data_mut(), p.d.data_mut()],
                    &[lg.ga.data(), lg.gb.data(), lg.gc.data(), lg.gd.data()],
                )?;
            }
        }
    }
    Ok(TrainResult { params: p, loss_trace: trace })
}

/// Surrogate latent: the least-squares solution of `B·z̃ = ô' − o`.
///
/// Equals the true latent whenever `A = I`; it strips the over-parameterized
/// observation component that the latent may otherwise carry.
pub fn surrogate_latent(
    p: &LinearLamParams,
    o: &[f64],
    o_hat_next: &[f64],
) -> Result<Vec<f64>, LamError> {
    let d_o = p.d_o();
    check_len("surrogate_latent", o.len(), d_o)?;
    check_len("surrogate_latent", o_hat_next.len(), d_o)?;
    let rhs = Mat::from_fn(d_o, 1, |i, _| o_hat_next[i] - o[i]);
    let w = solve_lse_full_rank(&p.b, &rhs)?;
    Ok(w.row(0).to_vec())
}

/// Batched surrogate latent; rows are samples.
pub fn surrogate_latent_batch(p: &LinearLamParams, o: &Mat, o_hat_next: &Mat) -> Result<Mat, LamError> {
    check_len("surrogate_latent", o.cols(), p.d_o())?;
    check_len("surrogate_latent", o_hat_next.cols(), p.d_o())?;
    let rhs = o_hat_next.sub(o).transpose();
    solve_lse_full_rank(&p.b, &rhs)
}

fn solve_lse_full_rank(b: &Mat, rhs: &Mat) -> Result<Mat, LamError> {
    let svals = crate::numerics::singular_values(b)?;
    let smax = svals.first().copied().unwrap_or(0.0);
    let rank = svals.iter().filter(|&&s| s > 1e-10 * smax.max(1e-300)).count();
    if rank < b.cols() {
        return Err(LamError::Numerics(NumericsError::RankDeficient { rank, cols: b.cols() }));
    }
    Ok(solve_lse(b, rhs, 0.0)?)
}
