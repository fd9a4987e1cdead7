//! Flow matching driven by one-dimensional noising processes.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: special functions, a splittable RNG and quadrature.
//! - [`processes`]: Wiener, Kac, MMD-uniform and scaled-latent 1D processes.
//! - [`compose`]: product processes and mean-reverting conditional flows.
//! - [`quantile`]: analytic and learnable (rational-quadratic spline) quantiles.
//! - [`transport`]: exact minibatch assignment, empirical W2 and energy MMD.
//! - [`autodiff`]: a small reverse-mode tape, the MLP, Adam and EMA.
//! - [`training`]: the flow-matching losses and the joint quantile/velocity loop.
//! - [`sampling`]: ODE integration of learned fields.
//! - [`datasets`]: toy targets.
//! - [`consistency`]: quantile interpolants and a toy IMM objective.

pub mod autodiff;
pub mod compose;
pub mod consistency;
pub mod datasets;
mod error;
pub mod numerics;
pub mod processes;
pub mod quantile;
pub mod sampling;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
pub use numerics::Rng;
