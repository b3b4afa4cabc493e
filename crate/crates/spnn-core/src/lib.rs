//! Learning thermodynamically consistent time integrators from trajectory data.
//!
//! A feedforward network predicts, for every state `z`, a pair of discrete
//! gradient operators `(A, B)` that are composed through the metriplectic
//! (GENERIC) evolution equation
//!
//! ```text
//! z_{n+1} = z_n + Δt (L·A z_n + M·B z_n)
//! ```
//!
//! with a known skew-symmetric Poisson matrix `L` and a symmetric positive
//! semi-definite friction matrix `M`. Degeneracy penalties in the loss drive
//! `L·B z → 0` and `M·A z → 0`, so trained rollouts conserve energy and
//! produce entropy (first and second law at the discrete level).
//!
//! Module map:
//! - [`generic`]: the metriplectic algebra (step, degeneracy residuals,
//!   structural rate diagnostics, operator validation),
//! - [`net`]: a minimal f64 MLP engine (forward/backward, Kaiming init,
//!   Adam, multistep LR schedule, input normalization, checkpoints),
//! - [`train`]: the rollout loss, reverse-mode gradients through it,
//!   the training loop, evaluation rollouts, and MSE/thermo reports,
//! - [`pendulum`]: double thermo-elastic pendulum ground truth,
//! - [`oldroyd`]: startup Couette flow of an Oldroyd-B fluid via stochastic
//!   dumbbells (CONNFFESSIT-style micro/macro coupling),
//! - [`dataset`]: trajectory dataset persistence, splitting, normalization
//!   statistics and noise injection.
//!
//! All heavy per-trajectory / per-node / per-snapshot loops run through
//! [`exec`], which is data-parallel with the `parallel` feature (default)
//! and falls back to sequential execution without it. Results are
//! bit-identical either way: work is partitioned into fixed chunks and
//! reduced in chunk order, independent of scheduling.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod generic;
pub mod linalg;
pub mod net;
pub mod oldroyd;
pub mod pendulum;
pub mod rng;
pub mod train;

pub use error::Error;
