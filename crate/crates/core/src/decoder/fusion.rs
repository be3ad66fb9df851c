use std::cell::RefCell;
use std::collections::HashMap;

use super::inventory::PhoneInventory;
use super::lexicon::Lexicon;
use crate::error::Result;
use crate::lm::{Granularity, LmRunner, LmState, TokenVocab, EOS, WB};
use crate::nn::Parameters;

/// Word-level view of a language model as seen by the decoder.
pub trait WordLm {
    /// `log P(word | history)` in natural log.
    fn word_logprob(&self, history: &[usize], word: usize) -> f64;
    /// `log P(end of sentence | history)`.
    fn end_logprob(&self, history: &[usize]) -> f64;

    /// Full sentence log-probability.
    fn sentence_logprob(&self, words: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..words.len() {
            total += self.word_logprob(&words[..i], words[i]);
        }
        total + self.end_logprob(words)
    }
}

/// Contributes nothing: pure acoustic decoding.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoLm;

impl WordLm for NoLm {
    fn word_logprob(&self, _: &[usize], _: usize) -> f64 {
        0.0
    }

    fn end_logprob(&self, _: &[usize]) -> f64 {
        0.0
    }
}

/// The LSTM model scored one word at a time. At phone granularity a word costs its
/// phone tokens plus the `<wb>` that separates it from the previous word.
#[derive(Debug)]
pub struct NeuralWordLm {
    runner: LmRunner,
    /// Tokens fed for each lexicon word.
    word_tokens: Vec<Vec<usize>>,
    granularity: Granularity,
    states: RefCell<HashMap<Vec<usize>, LmState>>,
}

impl NeuralWordLm {
    pub fn new(params: &Parameters, vocab: &TokenVocab, lexicon: &Lexicon, inv: &PhoneInventory) -> Result<Self> {
        let word_tokens = (0..lexicon.len())
            .map(|w| match vocab.granularity {
                Granularity::Word => vec![vocab.id(lexicon.word(w))],
                Granularity::Phone => lexicon.pron(w).iter().map(|&p| vocab.id(inv.symbol(p))).collect(),
            })
            .collect();
        Ok(Self {
            runner: LmRunner::new(params)?,
            word_tokens,
            granularity: vocab.granularity,
            states: RefCell::new(HashMap::new()),
        })
    }

    /// Tokens for a word sequence, matching what [`TokenVocab::encode`] produces.
    pub fn tokens(&self, words: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, &w) in words.iter().enumerate() {
            if i > 0 && self.granularity == Granularity::Phone {
                out.push(WB);
            }
            out.extend(&self.word_tokens[w]);
        }
        out
    }

    fn state(&self, history: &[usize]) -> LmState {
        if let Some(s) = self.states.borrow().get(history) {
            return s.clone();
        }
        let s = match history.split_last() {
            None => self.runner.start(),
            Some((&last, prefix)) => {
                let mut s = self.state(prefix);
                if !prefix.is_empty() && self.granularity == Granularity::Phone {
                    s = self.runner.advance(&s, WB);
                }
                for &t in &self.word_tokens[last] {
                    s = self.runner.advance(&s, t);
                }
                s
            }
        };
        self.states.borrow_mut().insert(history.to_vec(), s.clone());
        s
    }
}

impl WordLm for NeuralWordLm {
    fn word_logprob(&self, history: &[usize], word: usize) -> f64 {
        let mut s = self.state(history);
        let mut total = 0.0;
        if !history.is_empty() && self.granularity == Granularity::Phone {
            total += s.next[WB];
            s = self.runner.advance(&s, WB);
        }
        let tokens = &self.word_tokens[word];
        for (i, &t) in tokens.iter().enumerate() {
            total += s.next[t];
            if i + 1 < tokens.len() {
                s = self.runner.advance(&s, t);
            }
        }
        total
    }

    fn end_logprob(&self, history: &[usize]) -> f64 {
        self.state(history).next[EOS]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{build_lm, lm_score, LmConfig};

    #[test]
    fn word_increments_sum_to_sentence_score() {
        let inv = PhoneInventory::shona();
        let (lex, _) = Lexicon::build(&["baba", "mhoro", "ra", "zvino"], &inv).unwrap();
        for granularity in [Granularity::Phone, Granularity::Word] {
            let vocab = match granularity {
                Granularity::Phone => TokenVocab::new(&inv.symbols(), granularity).unwrap(),
                Granularity::Word => TokenVocab::new(lex.words(), granularity).unwrap(),
            };
            let cfg = LmConfig {
                embed_dim: 8,
                hidden1: 12,
                hidden2: 6,
                granularity,
            };
            let params = build_lm(&vocab, &cfg, 3).unwrap();
            let lm = NeuralWordLm::new(&params, &vocab, &lex, &inv).unwrap();
            for words in [vec![0], vec![1, 3], vec![2, 2, 0]] {
                let direct = lm_score(&params, &lm.tokens(&words)).unwrap();
                assert!((lm.sentence_logprob(&words) - direct).abs() < 1e-10);
                assert!(lm.sentence_logprob(&words) <= 0.0);
            }
            let phones: Vec<Vec<String>> = [1, 3]
                .iter()
                .map(|&w| lex.pron(w).iter().map(|&p| inv.symbol(p).to_string()).collect())
                .collect();
            assert_eq!(vocab.encode(&[lex.word(1), lex.word(3)], &phones), lm.tokens(&[1, 3]));
        }
    }
}
