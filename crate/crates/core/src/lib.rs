//! Latent action model laboratory.
//!
//! A linear latent action model (an inverse dynamics model feeding a
//! low-dimensional latent into a forward dynamics model), the synthetic
//! environments it is trained on, closed-form PCA oracles for its optimum,
//! a linear-probe evaluation metric, and a small non-linear grid-world
//! variant with a vector-quantized bottleneck.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod evaluator;
pub mod gridworld;
pub mod linear_lam;
pub mod numerics;
pub mod oracle;

pub use numerics::{Mat, Rng};
