//! Audio front end: WAV I/O, resampling and MFCC+delta features.

pub mod audio;
pub mod mfcc;

pub use audio::{load_wav, write_wav, AudioBuffer, CANONICAL_RATE};
pub use mfcc::{
    compute_deltas, compute_mfcc, featurize, frame_count, stack_features, FeatureKind, FeatureMatrix, MelConfig,
};
