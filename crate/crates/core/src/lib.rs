//! Gradient-network denoisers that are, by construction, the proximity
//! operator of a weakly convex regularizer.
//!
//! A network `T = T_N ∘ ⋯ ∘ T_1` of affine layers followed by smooth,
//! non-decreasing, convex activations defines a potential
//! `ψ(x) = Σ_i t_i(x)`. The denoiser is its gradient `D = ∇ψ`, evaluated with a
//! weight-tied decoder that applies the transposed encoder weights. When every
//! weight matrix after the first is entrywise nonnegative, `ψ` is convex and
//! `D` is monotone, symmetric and Lipschitz, which is what the plug-and-play
//! solver in [`pnp`] needs for its convergence guarantee.
//!
//! Module map:
//!
//! - [`activation`], [`network`]: layers and multi-layer forward evaluation.
//! - [`denoiser`]: `ψ`, `D`, the skip-connection variant and the Jacobian of `D`.
//! - [`autodiff`]: a small vector-level reverse-mode tape used for training.
//! - [`training`]: barrier loss, Adam, the minibatch loop and weight clamping.
//! - [`verification`]: executable certificates and Lipschitz estimation.
//! - [`pnp`]: the primal-dual restoration solver and its closed-form oracle.
//! - [`imaging`]: blur operators, noise, metrics, synthetic data and PGM I/O.

pub mod activation;
pub mod autodiff;
pub mod denoiser;
pub mod error;
pub mod format;
pub mod imaging;
pub mod io;
pub mod network;
pub mod pnp;
pub mod training;
pub mod verification;

pub use activation::{ActivationKind, ActivationSpec};
pub use denoiser::{Denoiser, DenoiserEval, JacobianMode};
pub use error::{Error, Result};
pub use network::{Layer, Network, Skip};

/// Dense column vector used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
