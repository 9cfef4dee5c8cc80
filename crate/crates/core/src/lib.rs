//! Sampling from the smoothing distribution of a diffusion observed
//! continuously in time with additive noise.
//!
//! A backward information filter for a linear auxiliary model supplies the
//! guiding drift of a *guided process*; Girsanov weights correct the
//! difference to the true conditional law. On top of that sit a
//! preconditioned Crank–Nicolson sampler ([`mcmc`]), a self-normalized
//! importance sampler ([`montecarlo`]) and a variational fit of the guide
//! ([`variational`]).

pub mod backward_filter;
pub mod error;
pub mod experiments;
pub mod guided;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod models;
pub mod montecarlo;
pub mod sde;
pub mod variational;

pub use error::{Error, Result};
