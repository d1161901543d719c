//! Graduated non-convexity over smoothed energy families.
//!
//! The crate covers exact Gaussian-mixture energies with their convexity
//! analysis, the GNC flow, t-conditioned Fields-of-Experts priors built from
//! quartic-spline activations, their score-matching training, and three
//! inference schemes for denoising and inpainting.

pub mod autodiff;
pub mod conv;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod foe;
pub mod gmm;
pub mod io;
pub mod optim;
pub mod solve;
pub mod spline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
