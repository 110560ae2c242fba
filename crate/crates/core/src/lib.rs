//! Report generation from scan images: a multi-scale bidirectional feature
//! pyramid encoder feeding a transformer decoder, trained end to end on a
//! hand-written reverse-mode autodiff engine.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seeding;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
