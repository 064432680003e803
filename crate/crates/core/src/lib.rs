//! Fully-convolutional CTC speech recognition with interchangeable skip
//! connectivity, prefix beam search and a modified Kneser-Ney n-gram LM.

pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod ctc;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
