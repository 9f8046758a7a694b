//! Dense matrix arithmetic, decompositions, least squares, RNG, and Adam.
//!
//! Everything is double precision and deterministic given inputs and seed.
//! All functions here are pure value transforms safe to call concurrently;
//! the only mutable state is [`AdamState`], which is owned by a single
//! training run.

mod adam;
mod eig;
mod lstsq;
mod mat;
mod qr;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use eig::{sym_eig, EigSolution};
pub use lstsq::solve_lse;
pub use mat::Mat;
pub use qr::{
    householder_qr, orthonormal_columns, principal_angles, random_orthogonal, singular_values,
    thin_svd,
};
pub use rng::{Rng, STREAM_AUG, STREAM_BATCH, STREAM_ENV, STREAM_EVAL, STREAM_INIT, STREAM_MISC};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch { op: &'static str, left: String, right: String },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: max asymmetry {max_asym:.3e} exceeds tolerance {tol:.3e}")]
    NotSymmetric { max_asym: f64, tol: f64 },
    #[error("eigensolver did not converge within {max_sweeps} sweeps (off-diagonal norm {offdiag:.3e})")]
    NoConvergence { max_sweeps: usize, offdiag: f64 },
    #[error("operation requires rows >= cols, got {rows}x{cols}")]
    TallRequired { rows: usize, cols: usize },
    #[error("matrix is rank deficient (numerical rank {rank} of {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("non-finite gradient in parameter block {block} (\"{name}\")")]
    NonFiniteGrad { block: usize, name: String },
}
