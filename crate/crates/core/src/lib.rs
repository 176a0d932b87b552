//! A visual object tracker built on a multi-domain convolutional network:
//! shared convolutional and fully connected layers pretrained across many
//! sequences, a fresh classification branch fine-tuned online for each new
//! sequence, hard negative mining and linear box refinement. Everything runs
//! on a small dense-tensor engine with hand-written backward passes.

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod model;
pub mod regression;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
