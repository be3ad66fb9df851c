//! Deterministic synthetic corpus: CV-syllable nonsense words rendered as two-formant
//! vowels and band-limited noise consonants.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::decoder::{Lexicon, PhoneInventory};
use crate::dsp::{write_wav, AudioBuffer};
use crate::error::{AsrError, Result};
use crate::pipeline::manifest::{write_manifest, Manifest, Record};

/// Consonant noise seeds do not depend on the corpus seed, so a phone sounds the same
/// in every generated corpus.
const CONSONANT_SEED_BASE: u64 = 0x5eed_c0de;
const EDGE_MS: f64 = 5.0;
/// Second spectral peak must sit at least this far from the first.
const PEAK_EXCLUSION_HZ: f64 = 150.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_syllables: usize,
    pub max_syllables: usize,
    pub phone_duration_ms: f64,
    pub sample_rate_hz: u32,
    /// Formant pairs for a, e, i, o, u.
    pub vowel_formants_hz: [[f64; 2]; 5],
    /// Band centres; each consonant takes two bands at least two grid steps apart.
    pub consonant_grid_hz: Vec<f64>,
    pub consonant_bandwidth_hz: f64,
    /// Peak amplitude of each vowel sinusoid.
    pub vowel_amplitude: f64,
    /// RMS of a consonant burst.
    pub consonant_rms: f64,
    /// Standard deviation of white noise added to each utterance.
    pub noise_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 50,
            n_utterances: 300,
            min_words: 2,
            max_words: 6,
            min_syllables: 1,
            max_syllables: 4,
            phone_duration_ms: 80.0,
            sample_rate_hz: 16_000,
            vowel_formants_hz: [
                [700.0, 1200.0],
                [450.0, 1950.0],
                [300.0, 2300.0],
                [500.0, 850.0],
                [330.0, 700.0],
            ],
            consonant_grid_hz: vec![
                250.0, 420.0, 610.0, 830.0, 1080.0, 1370.0, 1700.0, 2090.0, 2540.0, 3070.0, 3690.0, 4420.0, 5280.0,
            ],
            consonant_bandwidth_hz: 120.0,
            vowel_amplitude: 0.25,
            consonant_rms: 0.2,
            noise_std: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AsrError::InvalidArgument(m.into()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.n_utterances == 0 {
            return bad("n_utterances must be positive");
        }
        if !(1 <= self.min_words && self.min_words <= self.max_words) {
            return bad("words per sentence must be an ordered range starting at 1 or more");
        }
        if !(1 <= self.min_syllables && self.min_syllables <= self.max_syllables) {
            return bad("syllables per word must be an ordered range starting at 1 or more");
        }
        if !(self.phone_duration_ms > 2.0 * EDGE_MS) || self.sample_rate_hz == 0 {
            return bad("phone duration must exceed both edge ramps and the rate must be positive");
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        let freqs = self.vowel_formants_hz.iter().flatten().chain(&self.consonant_grid_hz);
        if freqs
            .clone()
            .any(|&f| !(f > 0.0 && f + self.consonant_bandwidth_hz < nyquist))
        {
            return bad("all frequencies must lie in (0, rate/2)");
        }
        if self.consonant_bandwidth_hz <= 0.0 || self.noise_std < 0.0 {
            return bad("bandwidth must be positive and noise_std non-negative");
        }
        Ok(())
    }

    pub fn segment_len(&self) -> usize {
        (self.phone_duration_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }
}

/// Band index pairs `(i, j)` with `j >= i + 2`, in lexicographic order.
fn band_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 2..n).map(move |j| (i, j))).collect()
}

fn raised_cosine_edges(seg: &mut [f64], ramp: usize) {
    let n = seg.len();
    for i in 0..ramp.min(n / 2) {
        let w = 0.5 * (1.0 - (PI * i as f64 / ramp as f64).cos());
        seg[i] *= w;
        seg[n - 1 - i] *= w;
    }
}

/// White noise restricted to the given bands in the frequency domain, scaled to `rms`.
fn band_noise(n: usize, rate: f64, bands: &[(f64, f64)], rms: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.random_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        if !bands.iter().any(|&(lo, hi)| f >= lo && f <= hi) {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let cur = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    out.iter().map(|v| v * rms / cur.max(1e-300)).collect()
}

/// Indices of the two largest magnitude-spectrum bins, the second at least
/// `PEAK_EXCLUSION_HZ` from the first, in ascending order.
pub fn top_two_peaks(seg: &[f64], rate: u32) -> [usize; 2] {
    let n = seg.len();
    let mut buf: Vec<Complex<f64>> = seg.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm()).collect();
    let best = |skip: Option<usize>| {
        let guard = (PEAK_EXCLUSION_HZ * n as f64 / rate as f64).ceil() as usize;
        let mut b = 1;
        let mut bv = f64::NEG_INFINITY;
        for (k, &m) in mag.iter().enumerate().skip(1) {
            if skip.is_some_and(|s| k.abs_diff(s) < guard) {
                continue;
            }
            if m > bv {
                bv = m;
                b = k;
            }
        }
        b
    };
    let first = best(None);
    let second = best(Some(first));
    [first.min(second), first.max(second)]
}

/// Pre-rendered segment for every phone of an inventory.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: GenConfig,
    segments: Vec<Vec<f64>>,
}

impl Synthesizer {
    /// Renders all phones and rejects inventories whose segments share a peak-bin set.
    pub fn new(cfg: &GenConfig, inv: &PhoneInventory) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.segment_len();
        let rate = cfg.sample_rate_hz as f64;
        let ramp = (EDGE_MS * rate / 1000.0).round() as usize;
        let pairs = band_pairs(cfg.consonant_grid_hz.len());
        let mut segments = Vec::with_capacity(inv.len());
        let mut consonants = 0;
        for p in 0..inv.len() {
            let mut seg = if inv.is_vowel(p) {
                let v = crate::decoder::inventory::VOWELS
                    .iter()
                    .position(|&s| s == inv.symbol(p))
                    .expect("vowel symbol");
                let [f1, f2] = cfg.vowel_formants_hz[v];
                (0..n)
                    .map(|i| {
                        let t = i as f64 / rate;
                        cfg.vowel_amplitude * ((2.0 * PI * f1 * t).sin() + (2.0 * PI * f2 * t).sin())
                    })
                    .collect()
            } else {
                let &(a, b) = pairs.get(consonants).ok_or_else(|| {
                    AsrError::InvalidArgument(format!(
                        "consonant grid of {} bands cannot give {} distinct pairs",
                        cfg.consonant_grid_hz.len(),
                        inv.phones()
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| !inv.is_vowel(*i))
                            .count()
                    ))
                })?;
                consonants += 1;
                let half = cfg.consonant_bandwidth_hz / 2.0;
                let bands: Vec<(f64, f64)> = [a, b]
                    .iter()
                    .map(|&k| (cfg.consonant_grid_hz[k] - half, cfg.consonant_grid_hz[k] + half))
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(CONSONANT_SEED_BASE + p as u64);
                band_noise(n, rate, &bands, cfg.consonant_rms, &mut rng)
            };
            raised_cosine_edges(&mut seg, ramp);
            segments.push(seg);
        }
        let mut seen = BTreeSet::new();
        for (p, seg) in segments.iter().enumerate() {
            if !seen.insert(top_two_peaks(seg, cfg.sample_rate_hz)) {
                return Err(AsrError::InvalidArgument(format!(
                    "phone {} is not spectrally distinct from an earlier phone",
                    inv.symbol(p)
                )));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            segments,
        })
    }

    pub fn segment(&self, phone: usize) -> &[f64] {
        &self.segments[phone]
    }

    /// Concatenate phone segments, then add white noise drawn from `rng`.
    pub fn render(&self, phones: &[usize], rng: &mut ChaCha8Rng) -> Result<AudioBuffer> {
        if phones.is_empty() {
            return Err(AsrError::InvalidArgument(
                "cannot render an empty phone sequence".into(),
            ));
        }
        if let Some(&p) = phones.iter().find(|&&p| p >= self.segments.len()) {
            return Err(AsrError::InvalidArgument(format!("phone index {p} out of range")));
        }
        let mut samples: Vec<f64> = phones.iter().flat_map(|&p| self.segments[p].iter().copied()).collect();
        if self.cfg.noise_std > 0.0 {
            // Box-Muller
            for s in &mut samples {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random();
                *s += self.cfg.noise_std * (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
            }
        }
        for s in &mut samples {
            *s = s.clamp(-1.0, 1.0);
        }
        AudioBuffer::new(samples, self.cfg.sample_rate_hz)
    }
}

/// Render one utterance without added noise.
pub fn synth_utterance(phones: &[usize], cfg: &GenConfig) -> Result<AudioBuffer> {
    let quiet = GenConfig {
        noise_std: 0.0,
        ..cfg.clone()
    };
    Synthesizer::new(&quiet, &PhoneInventory::shona())?.render(phones, &mut ChaCha8Rng::seed_from_u64(0))
}

/// A word of CV syllables spelled with canonical units, and its phone sequence.
pub fn gen_word<R: Rng>(rng: &mut R, cfg: &GenConfig, inv: &PhoneInventory) -> (String, Vec<usize>) {
    let vowels: Vec<usize> = (0..inv.len()).filter(|&p| inv.is_vowel(p)).collect();
    let onsets: Vec<usize> = (0..inv.len()).filter(|&p| !inv.is_vowel(p)).collect();
    let syllables = rng.random_range(cfg.min_syllables..=cfg.max_syllables);
    let mut spelling = String::new();
    let mut phones = Vec::with_capacity(2 * syllables);
    for _ in 0..syllables {
        for p in [
            onsets[rng.random_range(0..onsets.len())],
            vowels[rng.random_range(0..vowels.len())],
        ] {
            spelling.push_str(&inv.phones()[p].units[0]);
            phones.push(p);
        }
    }
    (spelling, phones)
}

/// What [`generate_corpus`] wrote.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub manifest: Manifest,
    pub lexicon: Lexicon,
    pub inventory: PhoneInventory,
}

/// Writes `wavs/`, `manifest.jsonl`, `lexicon.txt` and `inventory.txt` under `out_dir`.
pub fn generate_corpus(cfg: &GenConfig, out_dir: impl AsRef<Path>) -> Result<GeneratedCorpus> {
    let out_dir = out_dir.as_ref();
    let inv = PhoneInventory::shona();
    let synth = Synthesizer::new(cfg, &inv)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words: Vec<String> = Vec::with_capacity(cfg.vocab_size);
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while words.len() < cfg.vocab_size {
        attempts += 1;
        if attempts > 1000 * cfg.vocab_size {
            return Err(AsrError::InvalidArgument(format!(
                "could not draw {} distinct words",
                cfg.vocab_size
            )));
        }
        let (w, _) = gen_word(&mut rng, cfg, &inv);
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    let (lexicon, failures) = Lexicon::build(&words, &inv)?;
    if let Some(e) = failures.into_iter().next() {
        return Err(e);
    }

    let wav_dir = out_dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| AsrError::io(&wav_dir, e))?;
    let mut records = Vec::with_capacity(cfg.n_utterances);
    for i in 0..cfg.n_utterances {
        let mut urng = ChaCha8Rng::seed_from_u64(cfg.seed ^ i as u64);
        urng.set_stream(1);
        let n_words = urng.random_range(cfg.min_words..=cfg.max_words);
        let sentence: Vec<&str> = (0..n_words)
            .map(|_| words[urng.random_range(0..words.len())].as_str())
            .collect();
        let phones: Vec<usize> = sentence
            .iter()
            .flat_map(|w| lexicon.pron(lexicon.id(w).expect("lexicon word")).iter().copied())
            .collect();
        let audio = synth.render(&phones, &mut urng)?;
        let id = format!("utt{i:05}");
        let rel = format!("wavs/{id}.wav");
        write_wav(out_dir.join(&rel), &audio)?;
        records.push(Record {
            id,
            audio: rel,
            text: sentence.join(" "),
            duration_s: Some(audio.duration_s()),
        });
    }
    write_manifest(out_dir.join("manifest.jsonl"), &records)?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| AsrError::io(&p, e))
    };
    write("lexicon.txt", lexicon.to_text(&inv))?;
    write("inventory.txt", inv.to_text())?;
    Ok(GeneratedCorpus {
        manifest: Manifest {
            records,
            root: out_dir.to_path_buf(),
        },
        lexicon,
        inventory: inv,
    })
}
