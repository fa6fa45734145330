//! Low-rank gradient projection for memory-efficient adaptive optimization.
//!
//! Gradients of 2-D parameters are compressed into a rank-`r` subspace before
//! the Adam moments are updated, and the update is expanded back afterwards.
//! The subspace is refreshed every `T` steps either from the exact truncated
//! SVD of the gradient or, much more cheaply, from a subsampled randomized
//! Fourier transform (SRFT) sketch of the gradient followed by a Householder
//! QR factorization.
//!
//! Modules:
//!
//! * [`sketch`]: the SRFT operator `Ω = S·F·D` and a Gaussian sketch.
//! * [`subspace`]: SVD / SRFT / Gaussian bases, residuals, principal angles.
//! * [`galore`]: the projected AdamW optimizer, schedules, memory accounting
//!   and checkpoints.
//! * [`toytrain`]: small differentiable models (attention, cross-attention
//!   fusion, Dice+BCE) and a training loop to exercise the optimizer.
//!
//! The `parallel` feature (on by default) spreads row-wise sketching, sweeps
//! and per-parameter steps over rayon; see [`exec`].

pub mod error;
pub mod exec;
pub mod galore;
pub mod matrix;
pub mod qr;
pub mod sketch;
pub mod subspace;
pub mod synth;
pub mod toytrain;

pub use error::{Error, Result};
pub use exec::ExecPolicy;
pub use matrix::DenseMatrix;
pub use sketch::{build_srft, sketch_gaussian, Mixing, SrftOperator};
pub use subspace::{
    principal_angles, srft_basis, subspace_residual, svd_basis, BasisMethod, ProjectionBasis, Side,
    SketchOptions,
};
