//! Loudspeaker spotformer.
//!
//! Rewrites multichannel loudspeaker playback so that a low-acoustic-energy
//! region forms around a voice-driven device while a perceptual masking
//! constraint bounds the audible distortion at listener control points.
//! Includes a room simulator and metrics for the energy-reduction
//! experiments, plus a CLI (`spotformer`) driving the pipeline.

pub mod acoustics;
pub mod covariance;
pub mod error;
pub mod framing;
pub mod perceptual;
pub mod spotform;

pub use error::{Error, Result};
