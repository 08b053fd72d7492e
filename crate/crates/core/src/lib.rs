//! Diffusion auto-encoder whose latent space supports attribute-conditioned
//! shifts, turning a baseline brain image into a disease-progressed
//! follow-up, together with a synthetic longitudinal phantom cohort and the
//! evaluation suite used to check it.

pub mod checkpoint;
pub mod cohort;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod latent;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod progression;
pub mod rng;
pub mod segment;
pub mod train;

pub use error::{Error, Result};
