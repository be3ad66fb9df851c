use log::warn;

use super::container::Checkpoint;
use super::manifest::Manifest;
use crate::acoustic::{acoustic_forward, PosteriorGrid, PREFIX as ACOUSTIC_PREFIX};
use crate::decoder::{beam_decode, g2p, segment_words, DecodeParams, NeuralWordLm, NoLm, Transcript};
use crate::dsp::{featurize, load_wav, AudioBuffer, FeatureMatrix};
use crate::error::{AsrError, Result};
use crate::lm::PREFIX as LM_PREFIX;
use crate::metrics::{normalize_text, MetricsReport};
use crate::nn::Parameters;

/// Stands in for a stretch of greedy phones that no lexicon word covers.
pub const UNKNOWN_WORD: &str = "<unk>";

/// A checkpoint split into the pieces decoding needs.
#[derive(Debug, Clone)]
pub struct Recognizer {
    pub ckpt: Checkpoint,
    acoustic: Parameters,
    lm: Parameters,
}

/// Greedy CTC phones and their segmentation into lexicon words.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutput {
    pub phones: Vec<usize>,
    pub words: Vec<String>,
}

impl Recognizer {
    pub fn new(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.config.acoustic.n_phones != ckpt.inventory.len() {
            return Err(AsrError::Data(format!(
                "acoustic model has {} phones but the inventory has {}",
                ckpt.config.acoustic.n_phones,
                ckpt.inventory.len()
            )));
        }
        Ok(Self {
            acoustic: ckpt.params.with_prefix(ACOUSTIC_PREFIX),
            lm: ckpt.params.with_prefix(LM_PREFIX),
            ckpt,
        })
    }

    pub fn features(&self, audio: &AudioBuffer) -> Result<FeatureMatrix> {
        featurize(audio, &self.ckpt.config.features)
    }

    pub fn posteriors(&self, features: &FeatureMatrix) -> Result<PosteriorGrid> {
        acoustic_forward(&self.acoustic, &self.ckpt.config.acoustic, features)
    }

    /// Lexicon-constrained beam search; the LM is consulted only for a non-zero weight.
    pub fn decode(&self, grid: &PosteriorGrid, params: &DecodeParams) -> Result<Transcript> {
        if params.lm_weight == 0.0 {
            return beam_decode(grid, &self.ckpt.lexicon, &NoLm, params);
        }
        let lm = NeuralWordLm::new(&self.lm, &self.ckpt.lm_vocab, &self.ckpt.lexicon, &self.ckpt.inventory)?;
        beam_decode(grid, &self.ckpt.lexicon, &lm, params)
    }

    pub fn greedy(&self, grid: &PosteriorGrid) -> GreedyOutput {
        let phones = grid.greedy();
        let words = segment_words(&phones, &self.ckpt.lexicon)
            .into_iter()
            .map(|w| w.map_or(UNKNOWN_WORD.to_string(), |w| self.ckpt.lexicon.word(w).to_string()))
            .collect();
        GreedyOutput { phones, words }
    }

    pub fn transcribe(&self, audio: &AudioBuffer, params: &DecodeParams) -> Result<Transcript> {
        self.decode(&self.posteriors(&self.features(audio)?)?, params)
    }

    /// Reference phones of a transcript by g2p over its normalized words.
    pub fn reference_phones(&self, words: &[String]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in words {
            out.extend(g2p(w, &self.ckpt.inventory)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Beam search with the configured LM weight.
    pub report: MetricsReport,
    /// Greedy CTC phones segmented into words, no LM.
    pub greedy: MetricsReport,
    /// `(utterance id, text)` of beam hypotheses, in manifest order.
    pub hypotheses: Vec<(String, String)>,
    pub greedy_hypotheses: Vec<(String, String)>,
    pub references: Vec<(String, String)>,
    /// `(utterance id, reason)`.
    pub skipped: Vec<(String, String)>,
}

/// Score the beam decoder and the greedy baseline on every utterance of `m`. Failing
/// utterances are skipped with a warning; an empty or entirely failing split is an error.
pub fn evaluate(rec: &Recognizer, m: &Manifest, params: &DecodeParams) -> Result<EvalOutcome> {
    if m.is_empty() {
        return Err(AsrError::Data("cannot evaluate an empty split".into()));
    }
    let mut words = Vec::new();
    let mut phones = Vec::new();
    let mut greedy_words = Vec::new();
    let mut greedy_phones = Vec::new();
    let mut hypotheses = Vec::new();
    let mut greedy_hypotheses = Vec::new();
    let mut references = Vec::new();
    let mut skipped = Vec::new();
    for r in &m.records {
        let attempt = || -> Result<_> {
            let ref_words = normalize_text(&r.text);
            let ref_phones = rec.reference_phones(&ref_words)?;
            let audio = load_wav(m.audio_path(r))?;
            let grid = rec.posteriors(&rec.features(&audio)?)?;
            let hyp = rec.decode(&grid, params)?;
            let greedy = rec.greedy(&grid);
            Ok((ref_words, ref_phones, hyp, greedy))
        };
        match attempt() {
            Ok((ref_words, ref_phones, hyp, greedy)) => {
                references.push((r.id.clone(), ref_words.join(" ")));
                hypotheses.push((r.id.clone(), hyp.text()));
                greedy_hypotheses.push((r.id.clone(), greedy.words.join(" ")));
                phones.push((ref_phones.clone(), rec.ckpt.lexicon.phones_of(&hyp.word_ids)));
                words.push((ref_words.clone(), hyp.words));
                greedy_phones.push((ref_phones, greedy.phones));
                greedy_words.push((ref_words, greedy.words));
            }
            Err(e) => {
                warn!("skipping utterance {}: {e}", r.id);
                skipped.push((r.id.clone(), e.to_string()));
            }
        }
    }
    if words.is_empty() {
        return Err(AsrError::Data(format!("all {} utterances failed to decode", m.len())));
    }
    Ok(EvalOutcome {
        report: MetricsReport::compute(&words, &phones)?,
        greedy: MetricsReport::compute(&greedy_words, &greedy_phones)?,
        hypotheses,
        greedy_hypotheses,
        references,
        skipped,
    })
}

/// `<utt-id>\t<text>` lines.
pub fn format_transcripts(rows: &[(String, String)]) -> String {
    rows.iter().map(|(id, t)| format!("{id}\t{t}\n")).collect()
}
