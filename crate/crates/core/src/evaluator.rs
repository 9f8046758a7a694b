//! Linear-probe evaluation of a trained model's latent.
//!
//! Three ridge-regularized linear probes (with bias) are fit from the latent
//! to the controllable change, the exogenous noise, and the observation, on
//! one half of a fresh batch, and scored on the other half. Each probe error
//! is normalized by the analytic total variance of its target, and the three
//! normalized errors combine into a single objective with optimum 2:
//! `llo = −nmse_q + nmse_eps + nmse_o`.

use crate::datagen::{sample_batch, Batch, EnvSpec};
use crate::linear_lam::{
    fdm_forward_batch, idm_forward_batch, surrogate_latent_batch, LamError, LinearLamParams,
};
use crate::numerics::solve_lse;
use crate::{Mat, Rng};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Lam(#[from] LamError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("evaluation batch too small: {0} rows")]
    BatchTooSmall(usize),
}

/// Which latent the probes read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    /// The IDM output `z = C·o + D·o'`.
    TrueLatent,
    /// The least-squares preimage `z̃ = B⁺(ô' − o)`, which neutralizes the
    /// over-parameterized observation carry.
    Surrogate,
}

impl std::fmt::Display for LatentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LatentKind::TrueLatent => write!(f, "true_latent"),
            LatentKind::Surrogate => write!(f, "surrogate"),
        }
    }
}

/// The three normalized probe errors and their signed combination.
#[derive(Clone, Copy, Debug)]
pub struct LloReport {
    pub nmse_q: f64,
    pub nmse_eps: f64,
    pub nmse_o: f64,
    pub llo: f64,
    pub latent_kind: LatentKind,
    pub n_eval: usize,
    /// Latent had (numerically) zero variance; probes degenerate to mean
    /// predictors.
    pub degenerate_latent: bool,
}

/// Probe weight matrices; the last column of each is the bias.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub q: Mat,
    pub eps: Mat,
    pub o: Mat,
    pub degenerate: bool,
}

/// Default probe ridge: `1e-8 · trace(cov(z)) / d_z`.
pub fn default_probe_ridge(z: &Mat) -> f64 {
    let n = z.rows() as f64;
    let d = z.cols();
    let mut total = 0.0;
    for j in 0..d {
        let col_mean: f64 = (0..z.rows()).map(|i| z.at(i, j)).sum::<f64>() / n;
        let var: f64 =
            (0..z.rows()).map(|i| (z.at(i, j) - col_mean).powi(2)).sum::<f64>() / n;
        total += var;
    }
    1e-8 * total / d as f64
}

fn design(z: &Mat) -> Mat {
    z.hcat(&Mat::from_fn(z.rows(), 1, |_, _| 1.0))
}

/// Fit the three probes from the latent to (q, ε, o).
pub fn fit_probes(z: &Mat, q: &Mat, eps: &Mat, o: &Mat, ridge: f64) -> Result<ProbeSet, EvalError> {
    let degenerate = {
        let n = z.rows() as f64;
        (0..z.cols()).all(|j| {
            let mean: f64 = (0..z.rows()).map(|i| z.at(i, j)).sum::<f64>() / n;
            let var: f64 = (0..z.rows()).map(|i| (z.at(i, j) - mean).powi(2)).sum::<f64>() / n;
            var <= 1e-12
        })
    };
    let x = design(z);
    Ok(ProbeSet {
        q: solve_lse(&x, q, ridge)?,
        eps: solve_lse(&x, eps, ridge)?,
        o: solve_lse(&x, o, ridge)?,
        degenerate,
    })
}

/// Apply a probe: predictions for each latent row.
pub fn probe_predict(w: &Mat, z: &Mat) -> Mat {
    design(z).matmul_nt(w)
}

fn mean_sq_err(pred: &Mat, target: &Mat) -> f64 {
    let r = pred.sub(target);
    r.data().iter().map(|v| v * v).sum::<f64>() / pred.rows() as f64
}

/// LLO computed from an explicit latent matrix aligned with `batch` rows.
///
/// Fits on the first half, scores on the second. `ridge = None` uses the
/// default scaled ridge. Targets with zero analytic variance report a
/// normalized error of 1 by convention.
pub fn llo_from_latent(
    z: &Mat,
    batch: &Batch,
    env: &EnvSpec,
    latent_kind: LatentKind,
    ridge: Option<f64>,
) -> Result<LloReport, EvalError> {
    let n = batch.n();
    if n < 4 {
        return Err(EvalError::BatchTooSmall(n));
    }
    let half = n / 2;
    let z_fit = z.take_rows(0, half);
    let z_score = z.take_rows(half, n);
    let ridge = ridge.unwrap_or_else(|| default_probe_ridge(&z_fit));
    let probes = fit_probes(
        &z_fit,
        &batch.q.take_rows(0, half),
        &batch.eps.take_rows(0, half),
        &batch.o.take_rows(0, half),
        ridge,
    )?;

    let d_o = env.d_o as f64;
    let var_q = d_o * env.sigma_q * env.sigma_q;
    let var_eps = d_o * env.sigma_eps() * env.sigma_eps();
    let var_o = d_o;

    let nmse = |w: &Mat, target: &Mat, var: f64| -> f64 {
        if var <= 0.0 {
            return 1.0;
        }
        mean_sq_err(&probe_predict(w, &z_score), target) / var
    };
    let nmse_q = nmse(&probes.q, &batch.q.take_rows(half, n), var_q);
    let nmse_eps = nmse(&probes.eps, &batch.eps.take_rows(half, n), var_eps);
    let nmse_o = nmse(&probes.o, &batch.o.take_rows(half, n), var_o);
    Ok(LloReport {
        nmse_q,
        nmse_eps,
        nmse_o,
        llo: -nmse_q + nmse_eps + nmse_o,
        latent_kind,
        n_eval: n,
        degenerate_latent: probes.degenerate,
    })
}

/// Evaluate a model on a fresh batch of `n_eval` transitions.
pub fn llo(
    p: &LinearLamParams,
    env: &EnvSpec,
    n_eval: usize,
    latent_kind: LatentKind,
    rng: &mut Rng,
) -> Result<LloReport, EvalError> {
    let batch = sample_batch(env, n_eval, 0.0, rng);
    let z = match latent_kind {
        LatentKind::TrueLatent => idm_forward_batch(p, &batch.o, &batch.o_next, None)?,
        LatentKind::Surrogate => {
            let z = idm_forward_batch(p, &batch.o, &batch.o_next, None)?;
            let o_hat = fdm_forward_batch(p, &batch.o, &z, None)?;
            surrogate_latent_batch(p, &batch.o, &o_hat)?
        }
    };
    llo_from_latent(&z, &batch, env, latent_kind, None)
}
