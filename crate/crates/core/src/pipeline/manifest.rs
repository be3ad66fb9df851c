use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::audio::wav_duration_s;
use crate::error::{AsrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    /// Relative to the manifest's directory.
    pub audio: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Directory that audio paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn audio_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.audio)
    }

    pub fn subset(&self, records: Vec<Record>) -> Self {
        Self {
            records,
            root: self.root.clone(),
        }
    }
}

/// Parse JSON Lines records. Blank lines are skipped; errors carry 1-based line numbers.
pub fn parse_manifest(text: &str) -> Result<Vec<Record>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record =
            serde_json::from_str(line).map_err(|e| AsrError::Data(format!("manifest line {}: {e}", n + 1)))?;
        if r.id.is_empty() {
            return Err(AsrError::Data(format!("manifest line {}: empty id", n + 1)));
        }
        if r.text.trim().is_empty() {
            return Err(AsrError::Data(format!("manifest line {}: empty text", n + 1)));
        }
        if matches!(r.duration_s, Some(d) if !(d > 0.0 && d.is_finite())) {
            return Err(AsrError::Data(format!("manifest line {}: bad duration", n + 1)));
        }
        if !seen.insert(r.id.clone()) {
            return Err(AsrError::Data(format!("duplicate utterance id {:?}", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

/// Load and validate a manifest; missing durations are read from the audio headers.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| AsrError::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = parse_manifest(&text)?;
    for r in &mut records {
        let audio = root.join(&r.audio);
        if !audio.is_file() {
            return Err(AsrError::Data(format!(
                "utterance {:?}: audio file {} not found",
                r.id,
                audio.display()
            )));
        }
        if r.duration_s.is_none() {
            r.duration_s = Some(wav_duration_s(&audio)?);
        }
    }
    Ok(Manifest { records, root })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| AsrError::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| AsrError::io(path, e))?;
    }
    Ok(())
}
