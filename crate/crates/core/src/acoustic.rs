//! Convolutional acoustic model producing per-frame phone posteriors for CTC.
//!
//! Stacked features are treated as a one-channel `T x 39` image. Two conv+ReLU+pool
//! stages shrink both axes by four; each remaining time step's `channels x 9` slice is
//! flattened, passed through a dense ReLU layer, optional self-attention and an output
//! layer over the phones plus the CTC blank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_greedy_decode, ctc_loss};
use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::error::{AsrError, Result};
use crate::nn::layers::{he_uniform, xavier_uniform};
use crate::nn::{attention_layer, Graph, Parameters, Tensor, Var};

pub const PREFIX: &str = "acoustic.";
/// Time (and feature) downsampling of the two pooling stages.
pub const FRAME_SUBSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticConfig {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel_size: usize,
    pub dense_units: usize,
    pub n_phones: usize,
    pub feature_dim: usize,
    pub use_attention: bool,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            conv1_filters: 32,
            conv2_filters: 64,
            kernel_size: 3,
            dense_units: 128,
            n_phones: 54,
            feature_dim: 39,
            use_attention: true,
        }
    }
}

impl AcousticConfig {
    /// Same layer sizes as the default, with attention on or off.
    pub fn has_reference_shape(&self) -> bool {
        let d = Self::default();
        (
            self.conv1_filters,
            self.conv2_filters,
            self.kernel_size,
            self.dense_units,
        ) == (d.conv1_filters, d.conv2_filters, d.kernel_size, d.dense_units)
            && self.feature_dim == d.feature_dim
    }

    pub fn blank(&self) -> usize {
        self.n_phones
    }

    pub fn n_classes(&self) -> usize {
        self.n_phones + 1
    }

    /// Width of one flattened downsampled frame.
    pub fn flat_width(&self) -> usize {
        self.conv2_filters * (self.feature_dim / 2 / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_phones < 2 {
            return Err(AsrError::InvalidArgument(format!(
                "acoustic model needs at least 2 phones, got {}",
                self.n_phones
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(AsrError::InvalidArgument("kernel size must be odd".into()));
        }
        if self.feature_dim < 4 {
            return Err(AsrError::InvalidArgument("feature_dim must be at least 4".into()));
        }
        if [self.conv1_filters, self.conv2_filters, self.dense_units].contains(&0) {
            return Err(AsrError::InvalidArgument("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Downsampled frame count for `t` input frames.
pub fn output_frames(t: usize) -> usize {
    t / 2 / 2
}

fn name(s: &str) -> String {
    format!("{PREFIX}{s}")
}

/// Freshly initialized output layer (used on its own by warm start).
pub fn init_output_layer(cfg: &AcousticConfig, rng: &mut ChaCha8Rng) -> Result<Parameters> {
    let mut p = Parameters::new();
    let (n, d) = (cfg.n_classes(), cfg.dense_units);
    p.insert(name("out.weight"), xavier_uniform(rng, &[n, d], d, n))?;
    p.insert(name("out.bias"), Tensor::zeros(&[n]))?;
    Ok(p)
}

pub fn build_acoustic_model(cfg: &AcousticConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.kernel_size;
    let (c1, c2, d) = (cfg.conv1_filters, cfg.conv2_filters, cfg.dense_units);
    let mut p = Parameters::new();
    p.insert(name("conv1.kernels"), he_uniform(&mut rng, &[c1, 1, k, k], k * k))?;
    p.insert(name("conv1.bias"), Tensor::zeros(&[c1]))?;
    p.insert(name("conv2.kernels"), he_uniform(&mut rng, &[c2, c1, k, k], c1 * k * k))?;
    p.insert(name("conv2.bias"), Tensor::zeros(&[c2]))?;
    let flat = cfg.flat_width();
    p.insert(name("dense.weight"), he_uniform(&mut rng, &[d, flat], flat))?;
    p.insert(name("dense.bias"), Tensor::zeros(&[d]))?;
    if cfg.use_attention {
        for proj in ["attn.q", "attn.k", "attn.v"] {
            p.insert(name(proj), xavier_uniform(&mut rng, &[d, d], d, d))?;
        }
    }
    p.extend(init_output_layer(cfg, &mut rng)?)?;
    Ok(p)
}

/// Record the forward pass in `g`; returns the `[T', classes]` log-posterior node.
pub fn acoustic_graph(
    g: &mut Graph,
    params: &Parameters,
    cfg: &AcousticConfig,
    features: &FeatureMatrix,
) -> Result<Var> {
    if features.cols != cfg.feature_dim {
        return Err(AsrError::Shape(format!(
            "features have {} columns, model expects {}",
            features.cols, cfg.feature_dim
        )));
    }
    if features.rows < FRAME_SUBSAMPLE {
        return Err(AsrError::Shape(format!(
            "need at least {FRAME_SUBSAMPLE} frames, got {}",
            features.rows
        )));
    }
    let x = g.input(&[1, features.rows, features.cols], features.values.clone(), false)?;
    let mut h = x;
    for stage in ["conv1", "conv2"] {
        let k = g.param(params, &name(&format!("{stage}.kernels")))?;
        let b = g.param(params, &name(&format!("{stage}.bias")))?;
        let c = g.conv2d(h, k, b)?;
        let r = g.relu(c);
        h = g.max_pool2(r)?;
    }
    let &[_, t_out, f_out] = g.shape(h) else {
        unreachable!("pooling keeps rank 3")
    };
    let per_frame = g.swap_axes01(h)?;
    let channels = cfg.conv2_filters;
    let flat = g.reshape(per_frame, &[t_out, channels * f_out])?;
    let w = g.param(params, &name("dense.weight"))?;
    let b = g.param(params, &name("dense.bias"))?;
    let dense = g.linear(flat, w, Some(b))?;
    let mut enc = g.relu(dense);
    if cfg.use_attention {
        let q = g.param(params, &name("attn.q"))?;
        let k = g.param(params, &name("attn.k"))?;
        let v = g.param(params, &name("attn.v"))?;
        enc = attention_layer(g, enc, q, k, v)?;
    }
    let w = g.param(params, &name("out.weight"))?;
    let b = g.param(params, &name("out.bias"))?;
    let logits = g.linear(enc, w, Some(b))?;
    Ok(g.log_softmax(logits))
}

/// Per-frame posteriors over phones plus blank (blank is the last column).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major natural-log probabilities.
    pub log_probs: Vec<f64>,
    pub frame_subsample: usize,
}

impl PosteriorGrid {
    pub fn from_log_probs(rows: usize, cols: usize, log_probs: Vec<f64>) -> Result<Self> {
        if rows * cols != log_probs.len() || cols < 2 {
            return Err(AsrError::Shape(format!(
                "posterior grid {rows}x{cols} cannot hold {} values",
                log_probs.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            log_probs,
            frame_subsample: FRAME_SUBSAMPLE,
        })
    }

    /// Build from probabilities (each row is normalized by the caller).
    pub fn from_probs(rows: usize, cols: usize, probs: &[f64]) -> Result<Self> {
        Self::from_log_probs(rows, cols, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn blank(&self) -> usize {
        self.cols - 1
    }

    pub fn log_prob(&self, t: usize, k: usize) -> f64 {
        self.log_probs[t * self.cols + k]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.cols..(t + 1) * self.cols]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    pub fn greedy(&self) -> Vec<usize> {
        ctc_greedy_decode(&self.log_probs, self.rows, self.cols, self.blank())
    }

    /// `-log P(target | grid)`.
    pub fn ctc_nll(&self, target: &[usize]) -> Result<f64> {
        crate::ctc::ctc_forward_backward(&self.log_probs, self.rows, self.cols, target, self.blank()).map(|(l, _)| l)
    }
}

pub fn acoustic_forward(params: &Parameters, cfg: &AcousticConfig, features: &FeatureMatrix) -> Result<PosteriorGrid> {
    let mut g = Graph::new();
    let out = acoustic_graph(&mut g, params, cfg, features)?;
    let &[rows, cols] = g.shape(out) else {
        unreachable!("log_softmax keeps rank 2")
    };
    PosteriorGrid::from_log_probs(rows, cols, g.value(out).to_vec())
}

/// CTC loss of one utterance with gradients added into `params`.
pub fn acoustic_step(
    params: &mut Parameters,
    cfg: &AcousticConfig,
    features: &FeatureMatrix,
    target: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let lp = acoustic_graph(&mut g, params, cfg, features)?;
    let loss = ctc_loss(&mut g, lp, target, cfg.blank())?;
    let value = g.scalar(loss);
    g.backward(loss)?;
    g.accumulate_param_grads(params)?;
    Ok(value)
}

/// Stacked features shaped for the model, for tests and tools that build matrices
/// directly.
pub fn feature_matrix(rows: usize, values: Vec<f64>) -> Result<FeatureMatrix> {
    let cols = 39;
    if values.len() != rows * cols {
        return Err(AsrError::Shape("feature values do not fill rows x 39".into()));
    }
    Ok(FeatureMatrix {
        rows,
        cols,
        values,
        frame_len_ms: 25.0,
        hop_ms: 10.0,
        kind: FeatureKind::Stacked39,
    })
}
