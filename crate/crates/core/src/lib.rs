//! Depth-as-time analysis of layered-network activation trajectories.
//!
//! This crate treats the layer axis of a deep network as discrete time and
//! provides the full analysis pipeline:
//!
//! - [`traj`]: the ATRJ trajectory file format plus a synthetic
//!   block-recurrent teacher generator with known ground truth.
//! - [`seg`]: layer-layer cosine-similarity matrices and contiguous
//!   phase discovery via a prefix-sum dynamic program, with random-partition
//!   baselines.
//! - [`surrogate`]: weight-tied recurrent surrogates trained with a hybrid
//!   teacher-forcing/autoregressive objective in two stages, plus
//!   perturbation and layer-swap probes.
//! - [`metrics`]: per-layer dynamical metrics on the unit sphere
//!   (directional convergence, angular speed, update ranks, coherence,
//!   teacher-student R²).
//! - [`dmd`]: exact Dynamic Mode Decomposition of depth trajectories.
//! - [`linalg`]: the dense real/complex kernels (SVD, eigendecomposition,
//!   pseudoinverse) everything above is built on.
//!
//! All computation is `f64`; every operation is a pure function of its
//! inputs and is safe to call concurrently.

pub mod dmd;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod seg;
pub mod surrogate;
pub mod traj;

pub use error::{Error, Result};
