//! Latent-space quality reasoning for no-reference image quality assessment,
//! at desk scale.
//!
//! A small decoder reads frozen visual tokens, optionally "thinks" for a few
//! steps in visual-token space, and then answers in text. Training runs in two
//! stages: supervised fine-tuning with a latent reconstruction term, then
//! group-relative policy optimization on a score reward.

pub mod autograd;
pub mod data;
pub mod error;
pub mod format;
pub mod grpo;
pub mod image;
pub mod metrics;
pub mod model;
pub mod params;
pub mod roi;
pub mod sft;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
