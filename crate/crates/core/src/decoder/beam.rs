//! Lexicon-constrained CTC prefix beam search with word-level LM fusion, plus the
//! brute-force decoder it is tested against.
//!
//! A hypothesis is identified by its completed words and its position in the
//! pronunciation trie, which together fix the emitted phone prefix. Its score is
//! `log P(prefix | X) + lm_weight * log P(words) + word_bonus * |words|`. A word is
//! committed (and the LM consulted) only when the next word's first phone is emitted
//! or the utterance ends, which lets homophones and words that prefix other words
//! share one path until then.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::fusion::WordLm;
use super::lexicon::{Lexicon, Trie};
use crate::acoustic::PosteriorGrid;
use crate::ctc::log_add;
use crate::error::{AsrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub lm_weight: f64,
    pub word_bonus: f64,
    pub beam: usize,
    /// Upper bound on transcript length in words.
    pub max_words: Option<usize>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            lm_weight: 1.0,
            word_bonus: 0.0,
            beam: 16,
            max_words: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub word_ids: Vec<usize>,
    pub words: Vec<String>,
    /// Combined score; `-inf` when no hypothesis survived.
    pub score: f64,
    pub acoustic: f64,
    pub lm: f64,
}

impl Transcript {
    fn empty() -> Self {
        Self {
            word_ids: Vec::new(),
            words: Vec::new(),
            score: f64::NEG_INFINITY,
            acoustic: f64::NEG_INFINITY,
            lm: 0.0,
        }
    }

    fn new(ids: Vec<usize>, lex: &Lexicon, acoustic: f64, lm: f64, p: &DecodeParams) -> Self {
        Self {
            words: ids.iter().map(|&i| lex.word(i).to_string()).collect(),
            score: acoustic + p.lm_weight * lm + p.word_bonus * ids.len() as f64,
            word_ids: ids,
            acoustic,
            lm,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Higher score first; equal scores go to the lexicographically smaller word sequence.
fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => a.1 < b.1,
    }
}

fn check_inputs(grid: &PosteriorGrid, lex: &Lexicon) -> Result<()> {
    if grid.rows == 0 {
        return Err(AsrError::InvalidArgument("empty posterior grid".into()));
    }
    let blank = grid.blank();
    for w in 0..lex.len() {
        if let Some(&p) = lex.pron(w).iter().find(|&&p| p >= blank) {
            return Err(AsrError::Shape(format!(
                "lexicon word {:?} uses phone {p} but the grid has only {blank} phones",
                lex.word(w)
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Probs {
    blank: f64,
    non_blank: f64,
    /// Accumulated LM log-probability of the completed words.
    lm: f64,
}

impl Probs {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

type Key = (Vec<usize>, usize);

pub fn beam_decode(grid: &PosteriorGrid, lex: &Lexicon, lm: &dyn WordLm, params: &DecodeParams) -> Result<Transcript> {
    check_inputs(grid, lex)?;
    if params.beam == 0 {
        return Err(AsrError::InvalidArgument("beam width must be at least 1".into()));
    }
    let trie = lex.trie();
    let max_words = params.max_words.unwrap_or(usize::MAX);
    if max_words == 0 {
        return Ok(Transcript::empty());
    }
    let blank = grid.blank();
    let ninf = f64::NEG_INFINITY;
    let combined = |key: &Key, p: &Probs| p.total() + params.lm_weight * p.lm + params.word_bonus * key.0.len() as f64;

    let mut beam: Vec<(Key, Probs)> = vec![(
        (Vec::new(), Trie::ROOT),
        Probs {
            blank: 0.0,
            non_blank: ninf,
            lm: 0.0,
        },
    )];
    for t in 0..grid.rows {
        let row = grid.row(t);
        let mut next: BTreeMap<Key, Probs> = BTreeMap::new();
        let mut add = |key: Key, lm: f64, b: f64, nb: f64| {
            let e = next.entry(key).or_insert(Probs {
                blank: ninf,
                non_blank: ninf,
                lm,
            });
            e.blank = log_add(e.blank, b);
            e.non_blank = log_add(e.non_blank, nb);
        };
        for ((words, node), p) in &beam {
            let total = p.total();
            add((words.clone(), *node), p.lm, total + row[blank], ninf);
            let last = trie.nodes[*node].phone;
            if let Some(l) = last {
                add((words.clone(), *node), p.lm, ninf, p.non_blank + row[l]);
            }
            let emit = |phone: usize| {
                if Some(phone) == last {
                    p.blank + row[phone]
                } else {
                    total + row[phone]
                }
            };
            for (&phone, &child) in &trie.nodes[*node].children {
                add((words.clone(), child), p.lm, ninf, emit(phone));
            }
            if words.len() + 2 <= max_words {
                for &w in &trie.nodes[*node].words {
                    let mut done = words.clone();
                    done.push(w);
                    let lm_total = p.lm + lm.word_logprob(words, w);
                    for (&phone, &child) in &trie.nodes[Trie::ROOT].children {
                        add((done.clone(), child), lm_total, ninf, emit(phone));
                    }
                }
            }
        }
        let mut ranked: Vec<(Key, Probs)> = next.into_iter().filter(|(_, p)| p.total() > ninf).collect();
        ranked.sort_by(|a, b| {
            let (sa, sb) = (combined(&a.0, &a.1), combined(&b.0, &b.1));
            sb.partial_cmp(&sa)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(params.beam);
        beam = ranked;
        if beam.is_empty() {
            break;
        }
    }

    let mut best = Transcript::empty();
    for ((words, node), p) in &beam {
        for &w in &trie.nodes[*node].words {
            let mut ids = words.clone();
            ids.push(w);
            let lm_total = p.lm + lm.word_logprob(words, w) + lm.end_logprob(&ids);
            let cand = Transcript::new(ids, lex, p.total(), lm_total, params);
            if better((cand.score, &cand.word_ids), (best.score, &best.word_ids)) {
                best = cand;
            }
        }
    }
    Ok(best)
}

/// Score every word sequence of 1..=`max_words` words by exact CTC likelihood.
/// Limited to tiny instances: at most 5 words, 8 frames and 3 words per sequence.
pub fn exhaustive_decode(
    grid: &PosteriorGrid,
    lex: &Lexicon,
    lm: &dyn WordLm,
    params: &DecodeParams,
    max_words: usize,
) -> Result<Transcript> {
    check_inputs(grid, lex)?;
    if lex.len() > 5 || grid.rows > 8 || max_words > 3 || max_words == 0 {
        return Err(AsrError::InvalidArgument(format!(
            "exhaustive decode limited to 5 words, 8 frames, 1..=3 words per sequence \
             (got {}, {}, {max_words})",
            lex.len(),
            grid.rows
        )));
    }
    let mut best = Transcript::empty();
    let n = lex.len();
    for len in 1..=max_words {
        for code in 0..n.pow(len as u32) {
            let seq: Vec<usize> = (0..len).map(|i| code / n.pow((len - 1 - i) as u32) % n).collect();
            let acoustic = match grid.ctc_nll(&lex.phones_of(&seq)) {
                Ok(nll) => -nll,
                Err(AsrError::InfeasibleAlignment { .. }) => continue,
                Err(e) => return Err(e),
            };
            let lm_total = lm.sentence_logprob(&seq);
            let cand = Transcript::new(seq, lex, acoustic, lm_total, params);
            if better((cand.score, &cand.word_ids), (best.score, &best.word_ids)) {
                best = cand;
            }
        }
    }
    Ok(best)
}

/// Uncovered phones, token count and the tokens of a suffix segmentation.
type Segmentation = (usize, usize, Vec<Option<usize>>);

/// Split a phone string into lexicon words, covering as many phones as possible.
/// Each maximal uncovered run becomes one `None` entry. Among equally good
/// segmentations the one with fewer tokens, then smaller word ids, wins.
pub fn segment_words(phones: &[usize], lex: &Lexicon) -> Vec<Option<usize>> {
    let n = phones.len();
    // cost[i] = (uncovered phones, tokens, choices) for the suffix starting at i
    let mut best: Vec<Option<Segmentation>> = vec![None; n + 1];
    best[n] = Some((0, 0, Vec::new()));
    let trie = lex.trie();
    for i in (0..n).rev() {
        let mut cands: Vec<Segmentation> = Vec::new();
        let mut node = Trie::ROOT;
        for j in i..n {
            let Some(c) = trie.child(node, phones[j]) else { break };
            node = c;
            if let (Some(&w), Some((u, k, rest))) = (trie.nodes[node].words.first(), &best[j + 1]) {
                let mut choice = vec![Some(w)];
                choice.extend(rest.iter().cloned());
                cands.push((*u, k + 1, choice));
            }
        }
        for j in i + 1..=n {
            if let Some((u, k, rest)) = &best[j] {
                if rest.first() == Some(&None) {
                    continue; // runs are maximal
                }
                let mut choice = vec![None];
                choice.extend(rest.iter().cloned());
                cands.push((u + (j - i), k + 1, choice));
            }
        }
        best[i] = cands.into_iter().min_by(|a, b| (a.0, a.1, &a.2).cmp(&(b.0, b.1, &b.2)));
    }
    best[0].take().map(|b| b.2).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::fusion::{NeuralWordLm, NoLm};
    use crate::decoder::inventory::PhoneInventory;
    use crate::lm::{build_lm, Granularity, LmConfig, TokenVocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_lexicon(rng: &mut ChaCha8Rng, n_phones: usize, n_words: usize) -> Lexicon {
        let mut entries = Vec::new();
        for w in 0..n_words {
            let len = rng.random_range(1..=3);
            let pron: Vec<usize> = (0..len).map(|_| rng.random_range(0..n_phones)).collect();
            entries.push((format!("w{w}"), pron));
        }
        Lexicon::from_entries(entries, n_phones).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, t: usize, c: usize, sharp: f64) -> PosteriorGrid {
        let mut lp = Vec::new();
        for _ in 0..t {
            let row: Vec<f64> = (0..c).map(|_| rng.random_range(-sharp..sharp)).collect();
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            lp.extend(row.iter().map(|x| x - lse));
        }
        PosteriorGrid::from_log_probs(t, c, lp).unwrap()
    }

    fn saturating(lm_weight: f64, word_bonus: f64, max_words: usize) -> DecodeParams {
        DecodeParams {
            lm_weight,
            word_bonus,
            beam: 1_000_000,
            max_words: Some(max_words),
        }
    }

    #[test]
    fn saturated_beam_matches_exhaustive_without_lm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let n_phones = rng.random_range(2..5);
            let n_words = rng.random_range(1..=5);
            let lex = tiny_lexicon(&mut rng, n_phones, n_words);
            let t = rng.random_range(1..=8);
            let grid = random_grid(&mut rng, t, n_phones + 1, 3.0);
            let max_words = rng.random_range(1..=3);
            let p = saturating(0.0, rng.random_range(-1.0..1.0), max_words);
            let a = beam_decode(&grid, &lex, &NoLm, &p).unwrap();
            let b = exhaustive_decode(&grid, &lex, &NoLm, &p, max_words).unwrap();
            assert_eq!(a.word_ids, b.word_ids);
            if b.score.is_finite() {
                assert!((a.score - b.score).abs() < 1e-9, "{} vs {}", a.score, b.score);
            }
        }
    }

    #[test]
    fn saturated_beam_matches_exhaustive_with_neural_lm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inv = PhoneInventory::shona();
        let n_phones = 4;
        for case in 0..30 {
            let n_words = rng.random_range(1..=5);
            let lex = tiny_lexicon(&mut rng, n_phones, n_words);
            let vocab = TokenVocab::new(&inv.symbols(), Granularity::Phone).unwrap();
            let cfg = LmConfig {
                embed_dim: 4,
                hidden1: 6,
                hidden2: 5,
                granularity: Granularity::Phone,
            };
            let params = build_lm(&vocab, &cfg, case).unwrap();
            let lm = NeuralWordLm::new(&params, &vocab, &lex, &inv).unwrap();
            let t = rng.random_range(1..=8);
            let grid = random_grid(&mut rng, t, n_phones + 1, 2.0);
            let p = saturating(rng.random_range(0.0..2.0), 0.0, 3);
            let a = beam_decode(&grid, &lex, &lm, &p).unwrap();
            let b = exhaustive_decode(&grid, &lex, &lm, &p, 3).unwrap();
            assert_eq!(a.word_ids, b.word_ids);
            if b.score.is_finite() {
                assert!((a.score - b.score).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wider_beams_never_score_lower() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let lex = tiny_lexicon(&mut rng, 4, 5);
            let grid = random_grid(&mut rng, 8, 5, 3.0);
            let mut prev = f64::NEG_INFINITY;
            for beam in [1, 2, 4, 8, 64, 100_000] {
                let p = DecodeParams {
                    beam,
                    lm_weight: 0.0,
                    max_words: Some(3),
                    ..Default::default()
                };
                let s = beam_decode(&grid, &lex, &NoLm, &p).unwrap().score;
                // narrow beams may find nothing, wide beams converge to the optimum
                if beam == 100_000 {
                    assert!(s >= prev - 1e-12);
                }
                prev = prev.max(s);
            }
        }
    }

    #[test]
    fn forced_path_with_beam_one() {
        let inv = PhoneInventory::shona();
        let (lex, _) = Lexicon::build(&["baba"], &inv).unwrap();
        let pron = lex.pron(0).to_vec();
        let blank = inv.len();
        let mut lp = vec![-20.0; 8 * (blank + 1)];
        for (t, k) in [pron[0], blank, pron[1], pron[2], pron[2], pron[3], blank, blank]
            .iter()
            .enumerate()
        {
            lp[t * (blank + 1) + k] = 0.0;
        }
        let grid = PosteriorGrid::from_log_probs(8, blank + 1, lp).unwrap();
        assert_eq!(grid.greedy(), pron);
        let p = DecodeParams {
            beam: 1,
            lm_weight: 0.0,
            ..Default::default()
        };
        assert_eq!(beam_decode(&grid, &lex, &NoLm, &p).unwrap().words, ["baba"]);
    }

    #[test]
    fn empty_when_nothing_fits() {
        let inv = PhoneInventory::shona();
        let (lex, _) = Lexicon::build(&["baba"], &inv).unwrap();
        let grid = PosteriorGrid::from_probs(2, 55, &vec![1.0 / 55.0; 110]).unwrap();
        let t = beam_decode(&grid, &lex, &NoLm, &DecodeParams::default()).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.score, f64::NEG_INFINITY);
    }

    #[test]
    fn exhaustive_guard_rails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lex = tiny_lexicon(&mut rng, 3, 6);
        let grid = random_grid(&mut rng, 4, 4, 1.0);
        assert!(exhaustive_decode(&grid, &lex, &NoLm, &DecodeParams::default(), 2).is_err());
        let lex = tiny_lexicon(&mut rng, 3, 2);
        assert!(exhaustive_decode(&grid, &lex, &NoLm, &DecodeParams::default(), 4).is_err());
        let long = random_grid(&mut rng, 9, 4, 1.0);
        assert!(exhaustive_decode(&long, &lex, &NoLm, &DecodeParams::default(), 2).is_err());
    }

    #[test]
    fn segmentation_covers_and_marks_gaps() {
        let lex = Lexicon::from_entries(
            [
                ("ab".to_string(), vec![0, 1]),
                ("c".to_string(), vec![2]),
                ("abc".to_string(), vec![0, 1, 2]),
            ],
            4,
        )
        .unwrap();
        let ab = lex.id("ab").unwrap();
        let abc = lex.id("abc").unwrap();
        let c = lex.id("c").unwrap();
        assert_eq!(segment_words(&[0, 1, 2], &lex), vec![Some(abc)]);
        assert_eq!(segment_words(&[0, 1, 3, 3, 2], &lex), vec![Some(ab), None, Some(c)]);
        assert_eq!(segment_words(&[3], &lex), vec![None]);
        assert!(segment_words(&[], &lex).is_empty());
    }
}
