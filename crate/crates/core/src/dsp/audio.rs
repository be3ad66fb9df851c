//! Mono PCM audio buffers and WAV I/O.

use std::path::Path;

use crate::error::{AsrError, Result};

pub const CANONICAL_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(AsrError::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AsrError::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Linear interpolation of `samples` at fractional position `pos`; positions past the
/// end hold the last sample.
pub(crate) fn interpolate(samples: &[f64], pos: f64) -> f64 {
    let last = samples.len() - 1;
    let i = pos.floor() as usize;
    if i >= last {
        return samples[last];
    }
    let frac = pos - i as f64;
    samples[i] * (1.0 - frac) + samples[i + 1] * frac
}

/// Resample with linear interpolation to `out_len` samples, reading the source at
/// `i * step` for output index `i`.
pub(crate) fn resample_linear(samples: &[f64], out_len: usize, step: f64) -> Vec<f64> {
    (0..out_len).map(|i| interpolate(samples, i as f64 * step)).collect()
}

/// Convert to the canonical rate. No anti-aliasing filter is applied.
pub fn resample_to(audio: &AudioBuffer, rate: u32) -> AudioBuffer {
    if audio.sample_rate_hz == rate || audio.samples.is_empty() {
        return AudioBuffer {
            samples: audio.samples.clone(),
            sample_rate_hz: rate,
        };
    }
    let ratio = audio.sample_rate_hz as f64 / rate as f64;
    let out_len = (audio.samples.len() as f64 / ratio).round() as usize;
    AudioBuffer {
        samples: resample_linear(&audio.samples, out_len, ratio),
        sample_rate_hz: rate,
    }
}

/// Read a 16-bit PCM mono WAV file, scaled to `[-1, 1]` and resampled to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AsrError::io(path, io),
        other => AsrError::Wav(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AsrError::Wav(format!(
            "{}: non-PCM encoding ({:?}, {} bits); expected 16-bit integer PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(AsrError::Wav(format!(
            "{}: multi-channel input ({} channels); expected mono",
            path.display(),
            spec.channels
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| AsrError::Wav(format!("{}: {e}", path.display())))?;
    if samples.is_empty() {
        return Err(AsrError::Wav(format!("{}: zero-length payload", path.display())));
    }
    let audio = AudioBuffer::new(samples, spec.sample_rate)?;
    Ok(resample_to(&audio, CANONICAL_RATE))
}

/// Sample count of a WAV file after conversion to the canonical rate, read from the header.
pub fn wav_duration_s(path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AsrError::io(path, io),
        other => AsrError::Wav(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

fn to_i16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Write 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => AsrError::io(path, io),
        other => AsrError::Wav(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &audio.samples {
        writer.write_sample(to_i16(s)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}
