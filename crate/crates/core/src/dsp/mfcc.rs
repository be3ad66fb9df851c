//! MFCC extraction with regression deltas and per-utterance normalization.
//!
//! Pipeline: pre-emphasis, framing, Hamming window, magnitude spectrum of the
//! zero-padded frame, triangular mel filterbank, floored natural log, DCT-II.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::audio::AudioBuffer;
use crate::error::{AsrError, Result};

pub const MFCC_DIM: usize = 13;
pub const STACKED_DIM: usize = 39;
const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc13,
    Stacked39,
}

/// Row-major `T x D` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>], kind: FeatureKind) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
            return Err(AsrError::Shape(
                "feature rows must be non-empty and equal length".into(),
            ));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.concat(),
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            kind,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub fmin_hz: f64,
    /// `None` means half the sample rate.
    pub fmax_hz: Option<f64>,
    pub pre_emphasis: f64,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            n_mels: 26,
            n_ceps: MFCC_DIM,
            fmin_hz: 0.0,
            fmax_hz: None,
            pre_emphasis: 0.97,
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn frame_len(&self, rate: u32) -> usize {
        (self.frame_len_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, rate: u32) -> usize {
        (self.hop_ms * rate as f64 / 1000.0).round() as usize
    }

    fn validate(&self, rate: u32) -> Result<f64> {
        let fmax = self.fmax_hz.unwrap_or(rate as f64 / 2.0);
        if self.n_ceps > self.n_mels {
            return Err(AsrError::InvalidArgument("n_ceps must not exceed n_mels".into()));
        }
        if !(self.fmin_hz < fmax && fmax <= rate as f64 / 2.0) {
            return Err(AsrError::InvalidArgument(format!(
                "mel range must satisfy fmin < fmax <= rate/2, got {}..{fmax}",
                self.fmin_hz
            )));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.frame_len(rate) {
            return Err(AsrError::InvalidArgument(
                "n_fft must be a power of two no smaller than the frame".into(),
            ));
        }
        if self.hop(rate) == 0 {
            return Err(AsrError::InvalidArgument("hop must be at least one sample".into()));
        }
        Ok(fmax)
    }
}

/// Number of frames for `n` samples: `1 + floor((n - frame_len) / hop)`.
pub fn frame_count(n: usize, frame_len: usize, hop: usize) -> Option<usize> {
    (n >= frame_len).then(|| 1 + (n - frame_len) / hop)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels x (n_fft/2 + 1)` triangular weights on the HTK mel scale, evaluated at the
/// exact bin centre frequencies.
pub fn mel_filterbank(cfg: &MelConfig, rate: u32) -> Result<Vec<Vec<f64>>> {
    let fmax = cfg.validate(rate)?;
    let n_bins = cfg.n_fft / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = rate as f64 / cfg.n_fft as f64;
    Ok((0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect())
}

fn pre_emphasize(x: &[f64], coef: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
    }
    y.extend(x.windows(2).map(|w| w[1] - coef * w[0]));
    y
}

fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Pre-emphasized, Hamming-windowed frames (each `frame_len` long, not yet padded).
pub fn windowed_frames(audio: &AudioBuffer, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    let rate = audio.sample_rate_hz;
    let (frame_len, hop) = (cfg.frame_len(rate), cfg.hop(rate));
    let n_frames = frame_count(audio.len(), frame_len, hop).ok_or_else(|| {
        AsrError::Data(format!(
            "audio of {} samples is shorter than one frame ({frame_len})",
            audio.len()
        ))
    })?;
    let emph = pre_emphasize(&audio.samples, cfg.pre_emphasis);
    let window = hamming(frame_len);
    Ok((0..n_frames)
        .map(|t| {
            emph[t * hop..t * hop + frame_len]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect())
}

/// Linear (pre-log) mel energies per frame, using magnitude spectra.
pub fn mel_energies(audio: &AudioBuffer, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    let bank = mel_filterbank(cfg, audio.sample_rate_hz)?;
    let frames = windowed_frames(audio, cfg)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    Ok(frames
        .iter()
        .map(|frame| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, &s) in buf.iter_mut().zip(frame) {
                b.re = s;
            }
            fft.process(&mut buf);
            let mag: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm()).collect();
            bank.iter()
                .map(|w| w.iter().zip(&mag).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect())
}

/// Orthonormal DCT-II of `x`, keeping the first `keep` coefficients.
fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}

pub fn compute_mfcc(audio: &AudioBuffer, cfg: &MelConfig) -> Result<FeatureMatrix> {
    let energies = mel_energies(audio, cfg)?;
    let rows: Vec<Vec<f64>> = energies
        .iter()
        .map(|e| {
            let logs: Vec<f64> = e.iter().map(|v| v.max(cfg.log_floor).ln()).collect();
            dct2(&logs, cfg.n_ceps)
        })
        .collect();
    let mut f = FeatureMatrix::from_rows(&rows, FeatureKind::Mfcc13)?;
    f.frame_len_ms = cfg.frame_len_ms;
    f.hop_ms = cfg.hop_ms;
    Ok(f)
}

/// Regression deltas over `window` frames each side, clamping indices at the edges.
pub fn compute_deltas(f: &FeatureMatrix, window: usize) -> Result<FeatureMatrix> {
    if window == 0 {
        return Err(AsrError::InvalidArgument("delta window must be >= 1".into()));
    }
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let last = f.rows as isize - 1;
    let clamp = |t: isize| t.clamp(0, last) as usize;
    let mut out = f.clone();
    for t in 0..f.rows {
        for c in 0..f.cols {
            let mut acc = 0.0;
            for n in 1..=window {
                let fwd = f.get(clamp(t as isize + n as isize), c);
                let back = f.get(clamp(t as isize - n as isize), c);
                acc += n as f64 * (fwd - back);
            }
            out.values[t * f.cols + c] = acc / denom;
        }
    }
    Ok(out)
}

/// Concatenate MFCC, delta and delta-delta columns, then normalize each column to zero
/// mean and unit variance over the utterance.
pub fn stack_features(mfcc: &FeatureMatrix, delta: &FeatureMatrix, delta2: &FeatureMatrix) -> Result<FeatureMatrix> {
    let parts = [mfcc, delta, delta2];
    if parts.iter().any(|p| p.rows != mfcc.rows || p.cols != MFCC_DIM) {
        return Err(AsrError::Shape(format!(
            "stack_features needs three T x {MFCC_DIM} matrices, got {}x{}, {}x{}, {}x{}",
            mfcc.rows, mfcc.cols, delta.rows, delta.cols, delta2.rows, delta2.cols
        )));
    }
    let (rows, cols) = (mfcc.rows, STACKED_DIM);
    let mut values = vec![0.0; rows * cols];
    for t in 0..rows {
        for (p, part) in parts.iter().enumerate() {
            values[t * cols + p * MFCC_DIM..t * cols + (p + 1) * MFCC_DIM].copy_from_slice(part.row(t));
        }
    }
    for c in 0..cols {
        let mean = (0..rows).map(|t| values[t * cols + c]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|t| (values[t * cols + c] - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.max(VARIANCE_FLOOR).sqrt();
        for t in 0..rows {
            let v = &mut values[t * cols + c];
            *v = (*v - mean) / sd;
        }
    }
    Ok(FeatureMatrix {
        rows,
        cols,
        values,
        frame_len_ms: mfcc.frame_len_ms,
        hop_ms: mfcc.hop_ms,
        kind: FeatureKind::Stacked39,
    })
}

/// Full front end: MFCC, deltas (window 2), delta-deltas, stacking and normalization.
pub fn featurize(audio: &AudioBuffer, cfg: &MelConfig) -> Result<FeatureMatrix> {
    let mfcc = compute_mfcc(audio, cfg)?;
    let d1 = compute_deltas(&mfcc, 2)?;
    let d2 = compute_deltas(&d1, 2)?;
    stack_features(&mfcc, &d1, &d2)
}
