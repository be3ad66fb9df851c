//! Levenshtein alignment and corpus-level error rates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Substitution,
    Deletion,
    Insertion,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    /// Operations from the start of both sequences.
    pub ops: Vec<EditOp>,
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimum-edit alignment with unit costs. The backtrace (run from the end) prefers
/// match, then substitution, deletion, insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut a = Alignment::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == d[(i - 1) * w + j - 1] {
            a.ops.push(EditOp::Match);
            a.matches += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + 1 {
            a.ops.push(EditOp::Substitution);
            a.substitutions += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            a.ops.push(EditOp::Deletion);
            a.deletions += 1;
            i -= 1;
        } else {
            a.ops.push(EditOp::Insertion);
            a.insertions += 1;
            j -= 1;
        }
    }
    a.ops.reverse();
    a
}

/// Pooled error rate: total edits over total reference tokens.
pub fn error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(AsrError::InvalidArgument("no utterances to score".into()));
    }
    let ref_tokens: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if ref_tokens == 0 {
        return Err(AsrError::InvalidArgument("reference corpus has no tokens".into()));
    }
    let errors: usize = pairs.iter().map(|(r, h)| align(r, h).errors()).sum();
    Ok(errors as f64 / ref_tokens as f64)
}

pub fn wer(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    error_rate(pairs)
}

pub fn per<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    error_rate(pairs)
}

/// Fraction of utterances with any error.
pub fn ser<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(AsrError::InvalidArgument("no utterances to score".into()));
    }
    Ok(pairs.iter().filter(|(r, h)| r != h).count() as f64 / pairs.len() as f64)
}

/// Lowercase, replace punctuation with spaces, split on whitespace.
pub fn normalize_text(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect::<String>()
        .replace('\'', "")
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub wer: f64,
    pub per: f64,
    pub ser: f64,
    pub word_accuracy: f64,
    pub sentence_accuracy: f64,
    pub n_utts: usize,
    pub n_ref_words: usize,
    pub n_ref_phones: usize,
}

impl MetricsReport {
    /// Scores word pairs and phone pairs of the same utterances. SER is on words.
    pub fn compute<P: PartialEq>(words: &[(Vec<String>, Vec<String>)], phones: &[(Vec<P>, Vec<P>)]) -> Result<Self> {
        if words.len() != phones.len() {
            return Err(AsrError::InvalidArgument(format!(
                "{} word pairs but {} phone pairs",
                words.len(),
                phones.len()
            )));
        }
        let wer = wer(words)?;
        let ser = ser(words)?;
        Ok(Self {
            wer,
            per: per(phones)?,
            ser,
            word_accuracy: (1.0 - wer).max(0.0),
            sentence_accuracy: 1.0 - ser,
            n_utts: words.len(),
            n_ref_words: words.iter().map(|(r, _)| r.len()).sum(),
            n_ref_phones: phones.iter().map(|(r, _)| r.len()).sum(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("WER", self.wer),
            ("PER", self.per),
            ("SER", self.ser),
            ("word accuracy (1-WER)", self.word_accuracy),
            ("sentence accuracy (1-SER)", self.sentence_accuracy),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<28}{:>8.2}%", 100.0 * v);
        }
        let _ = writeln!(s, "{:<28}{:>9}", "utterances", self.n_utts);
        let _ = writeln!(s, "{:<28}{:>9}", "reference words", self.n_ref_words);
        let _ = write!(s, "{:<28}{:>9}", "reference phones", self.n_ref_phones);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_and_single_substitution() {
        let a = align(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!((a.matches, a.errors()), (3, 0));
        let a = align(&toks("a b c d"), &toks("a x c d"));
        assert_eq!((a.substitutions, a.deletions, a.insertions), (1, 0, 0));
        let a = align::<u8>(&[], &[]);
        assert!(a.ops.is_empty());
    }

    #[test]
    fn tie_break_prefers_substitution_over_indels() {
        let a = align(&[1, 2], &[3, 4]);
        assert_eq!(a.ops, vec![EditOp::Substitution, EditOp::Substitution]);
        let a = align(&[1], &[]);
        assert_eq!(a.ops, vec![EditOp::Deletion]);
        let a = align(&[], &[1]);
        assert_eq!(a.ops, vec![EditOp::Insertion]);
    }

    #[test]
    fn corpus_rates() {
        let pairs = vec![(toks("a b c d"), toks("a x c d"))];
        assert!((wer(&pairs).unwrap() - 0.25).abs() < 1e-15);
        let same = vec![(toks("a b"), toks("a b")), (toks("c"), toks("c"))];
        assert_eq!((wer(&same).unwrap(), ser(&same).unwrap()), (0.0, 0.0));
        assert!(wer(&[]).is_err());
        assert!(wer(&[(vec![], toks("a"))]).is_err());
        // insertion-heavy output pushes WER past 1 and accuracy clamps to zero
        let bad = vec![(toks("a"), toks("x y z"))];
        let r = MetricsReport::compute(&bad, &[(vec![1], vec![1])]).unwrap();
        assert_eq!(r.wer, 3.0);
        assert_eq!(r.word_accuracy, 0.0);
    }

    #[test]
    fn report_fields_and_schema() {
        let words = vec![(toks("a b"), toks("a b")), (toks("c d"), toks("c e"))];
        let phones = vec![(vec![1, 2, 3], vec![1, 2, 3]), (vec![4, 5], vec![4, 6])];
        let r = MetricsReport::compute(&words, &phones).unwrap();
        assert_eq!((r.n_utts, r.n_ref_words, r.n_ref_phones), (2, 4, 5));
        assert!((r.wer - 0.25).abs() < 1e-15 && (r.per - 0.2).abs() < 1e-15);
        assert_eq!((r.ser, r.sentence_accuracy), (0.5, 0.5));
        assert!((r.word_accuracy - 0.75).abs() < 1e-15);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "n_ref_phones",
                "n_ref_words",
                "n_utts",
                "per",
                "sentence_accuracy",
                "ser",
                "wer",
                "word_accuracy"
            ]
        );
        assert!(r.table().contains("WER"));
        assert!(MetricsReport::compute(&words, &phones[..1]).is_err());
        let perfect = MetricsReport::compute(&words[..1], &phones[..1]).unwrap();
        assert_eq!((perfect.word_accuracy, perfect.sentence_accuracy), (1.0, 1.0));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  Mhoro,  BABA!\tzvino. "), toks("mhoro baba zvino"));
        assert!(normalize_text(" ... ").is_empty());
    }

    fn brute(r: &[u8], h: &[u8]) -> usize {
        match (r, h) {
            ([], _) => h.len(),
            (_, []) => r.len(),
            ([a, rr @ ..], [b, hh @ ..]) => (brute(rr, hh) + usize::from(a != b))
                .min(brute(rr, h) + 1)
                .min(brute(r, hh) + 1),
        }
    }

    proptest! {
        #[test]
        fn alignment_is_optimal_and_consistent(
            r in proptest::collection::vec(0u8..5, 0..8),
            h in proptest::collection::vec(0u8..5, 0..8),
        ) {
            let a = align(&r, &h);
            prop_assert_eq!(a.errors(), brute(&r, &h));
            prop_assert_eq!(a.substitutions + a.deletions + a.matches, r.len());
            prop_assert_eq!(a.substitutions + a.insertions + a.matches, h.len());
            let b = align(&h, &r);
            prop_assert_eq!(a.errors(), b.errors());
        }

        #[test]
        fn ser_is_a_rate(pairs in proptest::collection::vec(
            (proptest::collection::vec(0u8..3, 1..5), proptest::collection::vec(0u8..3, 0..5)), 1..10)
        ) {
            let s = ser(&pairs).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            let w = per(&pairs).unwrap();
            prop_assert_eq!(w == 0.0, pairs.iter().all(|(r, h)| r == h));
        }
    }
}
