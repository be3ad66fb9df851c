//! Corpus ingestion, training, persistence and evaluation.

pub mod config;
pub mod container;
pub mod early_stop;
pub mod evaluate;
pub mod manifest;
pub mod split;
pub mod train;
pub mod warm_start;

pub use config::{Schedule, SplitRatios, TrainConfig, WarmStartConfig};
pub use container::{load_features, save_features, Checkpoint};
pub use early_stop::{EarlyStopping, Verdict};
pub use evaluate::{evaluate, format_transcripts, EvalOutcome, Recognizer};
pub use manifest::{load_manifest, write_manifest, Manifest, Record};
pub use split::{split_corpus, Splits};
pub use train::{train, EpochLog, TrainOutcome, TrainReport};
pub use warm_start::{warm_start, WarmStartReport};
