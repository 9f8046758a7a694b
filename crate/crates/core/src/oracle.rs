//! Closed-form optima and exact expected losses for the linear model.
//!
//! With a fully random policy the reconstruction objective reduces to a
//! low-rank approximation of the covariance of `q + ε`, so eigendecomposition
//! gives the optimal loss and subspace directly. These are used as test
//! oracles against trained models. `expected_recon_loss` evaluates the
//! population loss of any parameter set in closed form (all generator moments
//! are known), which removes Monte-Carlo error from oracle comparisons.

use crate::datagen::{EnvSpec, NoiseSpec};
use crate::linear_lam::LinearLamParams;
use crate::numerics::{sym_eig, thin_svd, EigSolution, NumericsError};
use crate::Mat;

/// Relative eigenvalue gap below which the optimal subspace is ambiguous.
const TIE_REL_GAP: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("environment does not use exogenous noise")]
    MissingExoNoise,
    #[error("exogenous effect matrix is not orthogonal to the action effect matrix (‖XᵀY‖ = {0:.3e})")]
    ExoNotOrthogonal(f64),
    #[error("latent dimension {d_z} must be at least the action dimension {d_a}")]
    LatentTooNarrow { d_z: usize, d_a: usize },
    #[error("model has no action head")]
    MissingActionHead,
}

/// Eigenstructure of the covariance of `q + ε` for a fixed latent width.
#[derive(Clone, Debug)]
pub struct PcaOracle {
    pub sigma: Mat,
    pub eig: EigSolution,
    pub d_z: usize,
    /// Set when the eigenvalue gap at the d_z boundary is (numerically) zero,
    /// in which case the optimal subspace is not unique.
    pub tie_warning: bool,
}

/// Analytic covariance of `q + ε` under a fully random policy:
/// `X·Xᵀ` plus `σ²·I` (i.i.d. noise) or `Y·Yᵀ` (exogenous agent).
pub fn sigma_q_eps(env: &EnvSpec) -> Mat {
    let mut sigma = env.x.matmul_nt(&env.x);
    match env.noise {
        NoiseSpec::None => {}
        NoiseSpec::Iid { sigma: s } => {
            for i in 0..env.d_o {
                let v = sigma.at(i, i) + s * s;
                sigma.set(i, i, v);
            }
        }
        NoiseSpec::Exo { .. } => {
            let y = env.y.as_ref().expect("exo env has Y");
            sigma = sigma.add(&y.matmul_nt(y));
        }
    }
    sigma
}

impl PcaOracle {
    pub fn from_sigma(sigma: Mat, d_z: usize) -> Result<PcaOracle, OracleError> {
        let eig = sym_eig(&sigma)?;
        let d_o = sigma.rows();
        let d_z = d_z.min(d_o);
        let tie_warning = if d_z == 0 || d_z >= d_o {
            false
        } else {
            let gap = eig.values[d_z - 1] - eig.values[d_z];
            let scale = eig.values[0].abs().max(1e-300);
            gap / scale < TIE_REL_GAP
        };
        Ok(PcaOracle { sigma, eig, d_z, tie_warning })
    }

    pub fn for_env(env: &EnvSpec, d_z: usize) -> Result<PcaOracle, OracleError> {
        PcaOracle::from_sigma(sigma_q_eps(env), d_z)
    }

    /// Minimum achievable reconstruction loss: the sum of discarded eigenvalues.
    pub fn optimal_loss(&self) -> f64 {
        self.eig.values[self.d_z.min(self.eig.values.len())..].iter().sum()
    }

    /// The optimal decoder/encoder pair: `B` = top-d_z eigenvectors, `D = Bᵀ`,
    /// so `B·D` is the orthogonal projector onto the top eigenspace.
    pub fn optimal_bd(&self) -> (Mat, Mat) {
        let b = self.eig.top_vectors(self.d_z);
        let d = b.transpose();
        (b, d)
    }

    /// Projector onto the top-d_z eigenspace.
    pub fn projector(&self) -> Mat {
        let (b, d) = self.optimal_bd();
        b.matmul(&d)
    }
}

/// The loss-stationary FDM observation matrix for fixed `B, C, D` under the
/// χ-mixed policy: `A = I − B(C+D) − χ·(BD−I)·X·Π_d`.
///
/// At χ = 0 this reduces to `A = I − B(C+D)`; the extra term is the part of
/// the deterministic policy's action effect that falls outside the latent
/// subspace, which the FDM absorbs directly.
pub fn closed_form_a(env: &EnvSpec, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    let d_o = env.d_o;
    let chi = env.policy.chi;
    let mut a = Mat::identity(d_o).sub(&b.matmul(&c.add(d)));
    if chi > 0.0 {
        let bd_minus_i = b.matmul(d).sub(&Mat::identity(d_o));
        let correction = bd_minus_i.matmul(&env.x).matmul(&env.policy.pi_d).scale(chi);
        a = a.sub(&correction);
    }
    a
}

/// Exact population reconstruction loss of a parameter set.
///
/// Valid for any χ, both noise kinds, and shared-vector augmentation with the
/// given per-element variance.
pub fn expected_recon_loss(env: &EnvSpec, p: &LinearLamParams, aug_variance: f64) -> f64 {
    let d_o = env.d_o;
    let chi = env.policy.chi;
    let bc_bd = p.b.matmul(&p.c.add(&p.d));
    let m = p.a.add(&bc_bd).sub(&Mat::identity(d_o));
    let n = p.b.matmul(&p.d).sub(&Mat::identity(d_o));
    let nx = n.matmul(&env.x);

    let g = if chi > 0.0 {
        m.add(&nx.matmul(&env.policy.pi_d).scale(chi))
    } else {
        m.clone()
    };
    let mut loss = sq(&g) + (1.0 - chi) * (1.0 - chi) * sq(&nx);
    loss += match env.noise {
        NoiseSpec::None => 0.0,
        NoiseSpec::Iid { sigma } => sigma * sigma * sq(&n),
        NoiseSpec::Exo { .. } => sq(&n.matmul(env.y.as_ref().expect("exo env has Y"))),
    };
    if aug_variance > 0.0 {
        let a_minus_i = p.a.sub(&Mat::identity(d_o));
        loss += aug_variance * (sq(&bc_bd) + sq(&a_minus_i));
    }
    loss
}

/// Exact population action-prediction loss `E‖E·z − a‖²` of a parameter set.
pub fn expected_action_loss(
    env: &EnvSpec,
    p: &LinearLamParams,
    aug_variance: f64,
) -> Result<f64, OracleError> {
    let e = p.e.as_ref().ok_or(OracleError::MissingActionHead)?;
    let chi = env.policy.chi;
    let f = e.matmul(&p.c.add(&p.d));
    let ed = e.matmul(&p.d);
    let edx_minus_i = ed.matmul(&env.x).sub(&Mat::identity(env.d_a));
    let g = if chi > 0.0 {
        f.add(&edx_minus_i.matmul(&env.policy.pi_d).scale(chi))
    } else {
        f.clone()
    };
    let mut loss = sq(&g) + (1.0 - chi) * (1.0 - chi) * sq(&edx_minus_i);
    loss += match env.noise {
        NoiseSpec::None => 0.0,
        NoiseSpec::Iid { sigma } => sigma * sigma * sq(&ed),
        NoiseSpec::Exo { .. } => sq(&ed.matmul(env.y.as_ref().expect("exo env has Y"))),
    };
    if aug_variance > 0.0 {
        loss += aug_variance * sq(&f);
    }
    Ok(loss)
}

fn sq(m: &Mat) -> f64 {
    let f = m.frob_norm();
    f * f
}

/// The perfect denoising solution available when the exogenous effect is
/// orthogonal to the action effect and the latent is wide enough.
#[derive(Clone, Debug)]
pub struct DenoiseSolution {
    pub b: Mat,
    pub d: Mat,
    pub e: Mat,
}

/// Construct `(B, D, E)` from the SVD of the action effect matrix so that
/// `D·ε = 0`, `B·D·X = X`, and `E·D·X = I`.
pub fn perfect_denoise_solution(env: &EnvSpec, d_z: usize) -> Result<DenoiseSolution, OracleError> {
    let y = env.y.as_ref().ok_or(OracleError::MissingExoNoise)?;
    let cross = env.x.matmul_tn(y).max_abs();
    let scale = env.x.max_abs().max(1e-300) * y.max_abs().max(1e-300);
    if cross > 1e-8 * scale {
        return Err(OracleError::ExoNotOrthogonal(cross));
    }
    if d_z < env.d_a {
        return Err(OracleError::LatentTooNarrow { d_z, d_a: env.d_a });
    }
    let (u, s, v) = thin_svd(&env.x)?;
    let d_o = env.d_o;
    let d_a = env.d_a;
    // D = [Uᵀ; 0], B = [U, 0], E = [VΣ⁻¹, 0].
    let d = Mat::from_fn(d_z, d_o, |i, j| if i < d_a { u.at(j, i) } else { 0.0 });
    let b = Mat::from_fn(d_o, d_z, |i, j| if j < d_a { u.at(i, j) } else { 0.0 });
    let e = Mat::from_fn(d_a, d_z, |i, j| if j < d_a { v.at(i, j) / s[j] } else { 0.0 });

    debug_assert!(d.matmul(y).max_abs() <= 1e-8 * y.max_abs().max(1.0));
    debug_assert!(b.matmul(&d).matmul(&env.x).sub(&env.x).max_abs() <= 1e-8 * env.x.max_abs().max(1.0));
    Ok(DenoiseSolution { b, d, e })
}
