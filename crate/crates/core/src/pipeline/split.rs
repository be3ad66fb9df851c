use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::SplitRatios;
use super::manifest::Manifest;
use crate::error::{AsrError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Seeded shuffle, then `floor(n * ratio)` utterances each for validation and test; the
/// remainder goes to training. Each split keeps manifest order.
pub fn split_corpus(m: &Manifest, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    let n = m.len();
    let count = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let (n_val, n_test) = (count(ratios.val), count(ratios.test));
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(AsrError::Data(format!(
            "{n} utterances cannot fill a {}/{}/{} split",
            ratios.train, ratios.val, ratios.test
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        m.subset(idx.into_iter().map(|i| m.records[i].clone()).collect())
    };
    Ok(Splits {
        val: pick(&order[..n_val]),
        test: pick(&order[n_val..n_val + n_test]),
        train: pick(&order[n_val + n_test..]),
    })
}
