use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticConfig;
use crate::augment::AugmentPolicy;
use crate::decoder::DecodeParams;
use crate::dsp::mfcc::STACKED_DIM;
use crate::dsp::MelConfig;
use crate::error::{AsrError, Result};
use crate::lm::LmConfig;
use crate::nn::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Acoustic and LM updates interleaved in every epoch.
    #[default]
    Joint,
    /// LM trained to convergence first, then the acoustic model.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStartConfig {
    pub checkpoint: PathBuf,
    /// Parameter-name prefixes excluded from updates.
    #[serde(default)]
    pub freeze: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub split: SplitRatios,
    pub epochs_max: usize,
    pub patience: usize,
    pub schedule: Schedule,
    pub acoustic_optimizer: OptimizerConfig,
    pub lm_optimizer: OptimizerConfig,
    pub augment: AugmentPolicy,
    pub features: MelConfig,
    pub acoustic: AcousticConfig,
    pub lm: LmConfig,
    /// Used for validation-time and default evaluation decoding.
    pub decode: DecodeParams,
    /// Pronunciation lexicon; when absent, built by g2p from every manifest transcript.
    pub lexicon: Option<PathBuf>,
    pub warm_start: Option<WarmStartConfig>,
    /// Abort when more than this fraction of training utterances fail.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: SplitRatios::default(),
            epochs_max: 100,
            patience: 10,
            schedule: Schedule::Joint,
            acoustic_optimizer: OptimizerConfig::default(),
            lm_optimizer: OptimizerConfig::default(),
            augment: AugmentPolicy::default(),
            features: MelConfig::default(),
            acoustic: AcousticConfig::default(),
            lm: LmConfig::default(),
            decode: DecodeParams::default(),
            lexicon: None,
            warm_start: None,
            max_skip_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AsrError::InvalidArgument(m));
        let SplitRatios { train, val, test } = self.split;
        if [train, val, test].iter().any(|r| !(*r > 0.0 && *r < 1.0)) || (train + val + test - 1.0).abs() > 1e-9 {
            return bad(format!(
                "split ratios must be positive and sum to 1, got {train}/{val}/{test}"
            ));
        }
        if self.patience == 0 || self.epochs_max == 0 {
            return bad("patience and epochs_max must be at least 1".into());
        }
        if self.acoustic.feature_dim != STACKED_DIM {
            return bad(format!("feature_dim must be {STACKED_DIM}"));
        }
        self.acoustic.validate()?;
        self.augment.validate(self.acoustic.feature_dim)?;
        if self.lm.embed_dim == 0 || self.lm.hidden1 == 0 || self.lm.hidden2 == 0 {
            return bad("LM dimensions must be positive".into());
        }
        for o in [&self.acoustic_optimizer, &self.lm_optimizer] {
            if !(o.learning_rate > 0.0) || o.batch_size == 0 {
                return bad("optimizer needs a positive learning rate and batch size".into());
            }
        }
        if self.decode.beam == 0 {
            return bad("beam width must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.max_skip_fraction) {
            return bad("max_skip_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Read a JSON config; relative paths inside it are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AsrError::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| AsrError::InvalidArgument(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(l) = &mut cfg.lexicon {
            *l = base.join(&*l);
        }
        if let Some(w) = &mut cfg.warm_start {
            w.checkpoint = base.join(&w.checkpoint);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.patience, c.epochs_max), (10, 100));
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"acoustic": {"filters": 3}}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"split": {"train": 0.5, "val": 0.1, "test": 0.1}}"#).unwrap();
        assert!(c.validate().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"patience": 0}"#).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"lexicon": "lex.txt", "warm_start": {"checkpoint": "a.ckpt"}}"#).unwrap();
        let c = TrainConfig::load(&p).unwrap();
        assert_eq!(c.lexicon.unwrap(), dir.path().join("lex.txt"));
        assert_eq!(c.warm_start.unwrap().checkpoint, dir.path().join("a.ckpt"));
    }
}
