//! Binary tensor container used for checkpoints and feature dumps.
//!
//! Layout: magic `ASRCKPT1`, `u64` LE header length, UTF-8 JSON header, tensor payloads
//! as `f32` LE in directory order, then a CRC32 (LE) of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{Lexicon, Phone, PhoneInventory};
use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::error::{AsrError, Result};
use crate::lm::{Granularity, TokenVocab};
use crate::nn::{Parameters, Tensor};
use crate::pipeline::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ASRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    /// Everything other than the tensors, free-form per container kind.
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Serialize `meta` and named tensors into container bytes.
pub fn encode(meta: serde_json::Value, tensors: &[(&str, &[usize], &[f64])]) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut directory = Vec::with_capacity(tensors.len());
    for (name, shape, values) in tensors {
        if shape.iter().product::<usize>() != values.len() {
            return Err(AsrError::Shape(format!(
                "tensor {name} shape {shape:?} vs {} values",
                values.len()
            )));
        }
        directory.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        offset += 4 * values.len();
    }
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        meta,
        tensors: directory,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, values) in tensors {
        for &v in *values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decoded container: metadata plus `(name, shape, values)` in directory order.
pub type Decoded = (serde_json::Value, Vec<(String, Vec<usize>, Vec<f64>)>);

/// Parse container bytes, verifying checksum, magic, version and sizes.
pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let prefix = MAGIC.len() + 8;
    if bytes.len() < prefix + 4 {
        return Err(AsrError::Truncated(format!(
            "{} bytes is shorter than the fixed framing",
            bytes.len()
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    let header_len = u64::from_le_bytes(bytes[MAGIC.len()..prefix].try_into().expect("8 bytes")) as usize;
    let parsed = bytes
        .get(prefix..prefix.saturating_add(header_len))
        .and_then(|h| serde_json::from_slice::<Header>(h).ok());
    if stored != computed {
        // A header that parses and promises more bytes than exist means a cut-off file.
        if let Some(h) = &parsed {
            let need = prefix + header_len + payload_len(&h.tensors) + 4;
            if need > bytes.len() {
                return Err(AsrError::Truncated(format!(
                    "expected {need} bytes, found {}",
                    bytes.len()
                )));
            }
        }
        return Err(AsrError::Checksum { stored, computed });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(AsrError::Data("not an ASRCKPT1 container".into()));
    }
    let header = parsed.ok_or_else(|| AsrError::Data("unreadable container header".into()))?;
    if header.version != FORMAT_VERSION {
        return Err(AsrError::Version {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = &body[prefix + header_len..];
    if payload.len() != payload_len(&header.tensors) {
        return Err(AsrError::Truncated(format!(
            "payload holds {} bytes, directory describes {}",
            payload.len(),
            payload_len(&header.tensors)
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(AsrError::Data(format!(
                "tensor {} has offset {} (expected {expected_offset})",
                e.name, e.offset
            )));
        }
        let values = payload[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        expected_offset += 4 * n;
        tensors.push((e.name, e.shape, values));
    }
    Ok((header.meta, tensors))
}

fn payload_len(entries: &[TensorEntry]) -> usize {
    entries.iter().map(|e| 4 * e.shape.iter().product::<usize>()).sum()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AsrError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| AsrError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PhoneRecord {
    symbol: String,
    units: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VocabRecord {
    granularity: Granularity,
    lm_tokens: Vec<String>,
    lexicon: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: TrainConfig,
    inventory: Vec<PhoneRecord>,
    vocab: VocabRecord,
    best_metric: f64,
    epoch: usize,
}

/// Everything needed to decode: both models, their configuration and the symbol tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub inventory: PhoneInventory,
    pub lexicon: Lexicon,
    pub lm_vocab: TokenVocab,
    /// `acoustic.*` and `lm.*` tensors.
    pub params: Parameters,
    /// Validation PER of the stored parameters.
    pub best_metric: f64,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            config: self.config.clone(),
            inventory: self
                .inventory
                .phones()
                .iter()
                .map(|p| PhoneRecord {
                    symbol: p.symbol.clone(),
                    units: p.units.clone(),
                })
                .collect(),
            vocab: VocabRecord {
                granularity: self.lm_vocab.granularity,
                lm_tokens: self.lm_vocab.tokens.clone(),
                lexicon: (0..self.lexicon.len())
                    .map(|i| (self.lexicon.word(i).to_string(), self.lexicon.pron(i).to_vec()))
                    .collect(),
            },
            best_metric: self.best_metric,
            epoch: self.epoch,
        };
        let tensors: Vec<(&str, &[usize], &[f64])> = self
            .params
            .iter()
            .map(|(n, t)| (n, t.shape.as_slice(), t.values.as_slice()))
            .collect();
        encode(serde_json::to_value(meta)?, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| AsrError::Data(format!("checkpoint header: {e}")))?;
        if meta.kind != "checkpoint" {
            return Err(AsrError::Data(format!(
                "container holds {:?}, not a checkpoint",
                meta.kind
            )));
        }
        let inventory = PhoneInventory::new(
            meta.inventory
                .into_iter()
                .map(|p| Phone {
                    symbol: p.symbol,
                    units: p.units,
                })
                .collect(),
        )?;
        let lexicon = Lexicon::from_entries(meta.vocab.lexicon, inventory.len())?;
        let lm_vocab = TokenVocab::from_tokens(meta.vocab.lm_tokens, meta.vocab.granularity)?;
        let mut params = Parameters::new();
        for (name, shape, values) in tensors {
            params.insert(name, Tensor::new(shape, values)?)?;
        }
        Ok(Self {
            config: meta.config,
            inventory,
            lexicon,
            lm_vocab,
            params,
            best_metric: meta.best_metric,
            epoch: meta.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read(path.as_ref())?)
    }
}

/// Write a feature matrix as a container holding the single tensor `features`.
pub fn save_features(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "features",
        "feature_kind": f.kind,
        "frame_len_ms": f.frame_len_ms,
        "hop_ms": f.hop_ms,
    });
    write(
        path.as_ref(),
        &encode(meta, &[("features", &[f.rows, f.cols], &f.values)])?,
    )
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let (meta, mut tensors) = decode(&read(path.as_ref())?)?;
    if meta["kind"] != "features" || tensors.len() != 1 || tensors[0].0 != "features" || tensors[0].1.len() != 2 {
        return Err(AsrError::Data("container does not hold a feature matrix".into()));
    }
    let (_, shape, values) = tensors.remove(0);
    let kind: FeatureKind = serde_json::from_value(meta["feature_kind"].clone())
        .map_err(|e| AsrError::Data(format!("feature header: {e}")))?;
    Ok(FeatureMatrix {
        rows: shape[0],
        cols: shape[1],
        values,
        frame_len_ms: meta["frame_len_ms"].as_f64().unwrap_or(25.0),
        hop_ms: meta["hop_ms"].as_f64().unwrap_or(10.0),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::build_acoustic_model;
    use crate::lm::build_lm;

    pub(crate) fn tiny_checkpoint() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.acoustic.conv1_filters = 2;
        config.acoustic.conv2_filters = 3;
        config.acoustic.dense_units = 4;
        config.lm.embed_dim = 3;
        config.lm.hidden1 = 4;
        config.lm.hidden2 = 2;
        let inventory = PhoneInventory::shona();
        let (lexicon, _) = Lexicon::build(&["baba", "mhoro"], &inventory).unwrap();
        let lm_vocab = TokenVocab::new(&inventory.symbols(), Granularity::Phone).unwrap();
        let mut params = build_acoustic_model(&config.acoustic, 1).unwrap();
        params.extend(build_lm(&lm_vocab, &config.lm, 2).unwrap()).unwrap();
        Checkpoint {
            config,
            inventory,
            lexicon,
            lm_vocab,
            params,
            best_metric: 0.25,
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = tiny_checkpoint();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params.digest_f32(), c.params.digest_f32());
        for (name, t) in back.params.iter() {
            let orig = c.params.get(name).unwrap();
            for (a, b) in t.values.iter().zip(&orig.values) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        assert_eq!((back.epoch, back.best_metric), (3, 0.25));
        assert_eq!(back.lexicon, c.lexicon);
        assert_eq!(back.config, c.config);
    }

    #[test]
    fn every_single_byte_flip_is_caught() {
        let bytes = tiny_checkpoint().to_bytes().unwrap();
        for pos in (0..bytes.len()).step_by(97).chain([0, 9, bytes.len() - 1]) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            let e = Checkpoint::from_bytes(&bad).unwrap_err();
            assert!(
                matches!(e, AsrError::Checksum { .. } | AsrError::Truncated(_)),
                "byte {pos}: {e}"
            );
            assert_eq!(e.exit_code(), 3);
        }
    }

    #[test]
    fn truncation_and_version() {
        let bytes = tiny_checkpoint().to_bytes().unwrap();
        let e = Checkpoint::from_bytes(&bytes[..bytes.len() - 100]).unwrap_err();
        assert!(matches!(e, AsrError::Truncated(_)), "{e}");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(AsrError::Truncated(_))
        ));

        let (meta, tensors) = decode(&bytes).unwrap();
        let views: Vec<(&str, &[usize], &[f64])> = tensors
            .iter()
            .map(|(n, s, v)| (n.as_str(), s.as_slice(), v.as_slice()))
            .collect();
        let mut old = encode(meta, &views).unwrap();
        let needle = br#""version":1"#;
        let at = old.windows(needle.len()).position(|w| w == needle).unwrap();
        old[at + needle.len() - 1] = b'0';
        let n = old.len() - 4;
        let crc = crc32fast::hash(&old[..n]);
        old[n..].copy_from_slice(&crc.to_le_bytes());
        let e = Checkpoint::from_bytes(&old).unwrap_err();
        assert!(matches!(e, AsrError::Version { found: 0, expected: 1 }), "{e}");
    }

    #[test]
    fn feature_dump_round_trip() {
        let f = crate::acoustic::feature_matrix(2, (0..78).map(|i| i as f64 * 0.5).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        save_features(&p, &f).unwrap();
        assert_eq!(load_features(&p).unwrap(), f);
        assert!(matches!(Checkpoint::load(&p), Err(AsrError::Data(_))));
    }
}
