//! Non-Markovian quantum state diffusion.
//!
//! Colored-noise sampling, linear and normalized trajectory integrators for a
//! catalog of spin and oscillator models, closed-form reference solutions, and
//! an exact system-plus-environment propagator used as ground truth.

pub mod analytic;
pub mod ansatz;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod hilbert;
pub mod models;
pub mod noise;
pub mod oracle;
pub mod stats;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

/// Imaginary unit.
pub const I: C64 = C64::new(0.0, 1.0);

pub(crate) fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}
