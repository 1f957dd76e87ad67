//! Single-image inpainting by test-time adaptation.
//!
//! A small convolutional generator is trained on one masked image by punching
//! additional random "child" holes into its valid region and learning to
//! restore them; the adapted network then fills the original "parent" hole.

pub mod conv;
pub mod degrade;
pub mod error;
pub mod generator;
pub mod harness;
pub mod imagedata;
pub mod masks;
pub mod metrics;
pub mod optimize;
pub mod seeding;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use imagedata::Image;
pub use masks::Mask;
