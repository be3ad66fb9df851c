//! Lexicon, grapheme-to-phoneme rules and the CTC beam-search decoder.

pub mod beam;
pub mod fusion;
pub mod inventory;
pub mod lexicon;

pub use beam::{beam_decode, exhaustive_decode, segment_words, DecodeParams, Transcript};
pub use fusion::{NeuralWordLm, NoLm, WordLm};
pub use inventory::{Phone, PhoneInventory};
pub use lexicon::{g2p, Lexicon, Trie};
