//! Joint salient-object / camouflaged-object detection at desk scale.
//!
//! Two task-specific feature encoders share one prediction decoder; a
//! contrastive module ties the tasks together through an unlabeled bridge
//! image pool; per-task fully convolutional discriminators are trained
//! against residual targets and read out as uncertainty maps at test time.
//! Everything runs on the CPU on top of a small reverse-mode autodiff engine
//! ([`tensor`]), generic over `f32` (training) and `f64` (gradient checks).

pub mod adversarial;
pub mod contrast;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
