pub mod acoustic;
pub mod augment;
pub mod corpusgen;
pub mod ctc;
pub mod decoder;
pub mod dsp;
pub mod error;
pub mod gradsuite;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{AsrError, Result};
