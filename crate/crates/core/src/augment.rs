//! Speed and volume perturbation on audio, and SpecAugment-style masking on features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::audio::resample_linear;
use crate::dsp::{AudioBuffer, FeatureMatrix};
use crate::error::{AsrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub speed_factors: Vec<f64>,
    pub gain_db_range: [f64; 2],
    pub n_freq_masks: usize,
    pub freq_mask_max: usize,
    pub n_time_masks: usize,
    pub time_mask_max_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            speed_factors: vec![0.9, 1.0, 1.1],
            gain_db_range: [-6.0, 6.0],
            n_freq_masks: 1,
            freq_mask_max: 8,
            n_time_masks: 1,
            time_mask_max_fraction: 0.1,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves every input untouched.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            speed_factors: vec![1.0],
            gain_db_range: [0.0, 0.0],
            n_freq_masks: 0,
            freq_mask_max: 0,
            n_time_masks: 0,
            time_mask_max_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|&f| !(f > 0.5 && f < 2.0)) {
            return Err(AsrError::InvalidArgument("speed factors must lie in (0.5, 2.0)".into()));
        }
        let [lo, hi] = self.gain_db_range;
        if !(lo <= hi && lo >= -20.0 && hi <= 20.0) {
            return Err(AsrError::InvalidArgument(
                "gain_db_range must be an ordered range within [-20, 20]".into(),
            ));
        }
        if self.freq_mask_max >= feature_dim {
            return Err(AsrError::InvalidArgument(format!(
                "freq_mask_max {} must be below the feature dimension {feature_dim}",
                self.freq_mask_max
            )));
        }
        if !(0.0..1.0).contains(&self.time_mask_max_fraction) {
            return Err(AsrError::InvalidArgument(
                "time_mask_max_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Resample so the output has `round(N / factor)` samples; pitch and tempo both shift.
pub fn speed_perturb(a: &AudioBuffer, factor: f64) -> Result<AudioBuffer> {
    if !(factor > 0.5 && factor <= 2.0) {
        return Err(AsrError::InvalidArgument(format!(
            "speed factor {factor} outside (0.5, 2.0]"
        )));
    }
    if factor == 1.0 || a.samples.is_empty() {
        return Ok(a.clone());
    }
    let out_len = (a.len() as f64 / factor).round() as usize;
    Ok(AudioBuffer {
        samples: resample_linear(&a.samples, out_len, factor),
        sample_rate_hz: a.sample_rate_hz,
    })
}

/// Scale by `10^(gain_db/20)` and clip to `[-1, 1]`. Returns the clipped-sample count.
pub fn volume_perturb(a: &AudioBuffer, gain_db: f64) -> Result<(AudioBuffer, usize)> {
    if !(-20.0..=20.0).contains(&gain_db) {
        return Err(AsrError::InvalidArgument(format!(
            "gain {gain_db} dB outside [-20, 20]"
        )));
    }
    let g = 10f64.powf(gain_db / 20.0);
    let mut clipped = 0;
    let samples = a
        .samples
        .iter()
        .map(|&s| {
            let v = s * g;
            if v.abs() > 1.0 {
                clipped += 1;
                v.signum()
            } else {
                v
            }
        })
        .collect();
    Ok((
        AudioBuffer {
            samples,
            sample_rate_hz: a.sample_rate_hz,
        },
        clipped,
    ))
}

/// A masked rectangle: `[start, start + width)` rows or columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBand {
    pub start: usize,
    pub width: usize,
}

/// Masks chosen by [`spec_augment`], for inspection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppliedMasks {
    pub freq: Vec<MaskBand>,
    pub time: Vec<MaskBand>,
}

fn sample_band<R: Rng>(rng: &mut R, extent: usize, max_width: usize) -> MaskBand {
    let width = rng.random_range(0..=max_width.min(extent));
    let start = rng.random_range(0..=extent - width);
    MaskBand { start, width }
}

/// Fill random column and row bands with the matrix's global mean.
pub fn spec_augment<R: Rng>(f: &FeatureMatrix, policy: &AugmentPolicy, rng: &mut R) -> (FeatureMatrix, AppliedMasks) {
    let mean = f.mean();
    let mut out = f.clone();
    let mut masks = AppliedMasks::default();
    for _ in 0..policy.n_freq_masks {
        let band = sample_band(rng, f.cols, policy.freq_mask_max);
        for t in 0..f.rows {
            for c in band.start..band.start + band.width {
                out.values[t * f.cols + c] = mean;
            }
        }
        masks.freq.push(band);
    }
    let time_max = (f.rows as f64 * policy.time_mask_max_fraction).floor() as usize;
    for _ in 0..policy.n_time_masks {
        let band = sample_band(rng, f.rows, time_max);
        for t in band.start..band.start + band.width {
            out.values[t * f.cols..(t + 1) * f.cols].fill(mean);
        }
        masks.time.push(band);
    }
    (out, masks)
}
