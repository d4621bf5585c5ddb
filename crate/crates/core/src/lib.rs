//! Visual instruction pretraining of a small ViT inside a vision-language
//! model, with random visual-token dropping, a weighted data-recipe mixer over
//! a synthetic instruction world, and downstream transfer harnesses.

pub mod block;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod params;
pub mod pipeline;
pub mod recipe;
pub mod rng;
pub mod tokenizer;
pub mod trainer;
pub mod vision;

pub use error::{Result, VitpError};
