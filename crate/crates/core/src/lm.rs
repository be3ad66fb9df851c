//! Two-layer LSTM language model over phone (or word) tokens.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};
use crate::nn::layers::{init_lstm, xavier_uniform};
use crate::nn::linalg::gemm;
use crate::nn::{lstm_cell, Graph, LstmNames, LstmVars, Optimizer, Parameters, Tensor, Var};

pub const PREFIX: &str = "lm.";
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const WB: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<s>", "</s>", "<wb>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Phone,
    Word,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenVocab {
    pub tokens: Vec<String>,
    pub granularity: Granularity,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    /// Specials first, then `symbols` in order.
    pub fn new(symbols: &[String], granularity: Granularity) -> Result<Self> {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(symbols.iter().cloned())
            .collect();
        Self::from_tokens(tokens, granularity)
    }

    /// Rebuild from a stored token list, checking the specials.
    pub fn from_tokens(tokens: Vec<String>, granularity: Granularity) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(AsrError::Data(format!("duplicate vocab token {t:?}")));
            }
        }
        if tokens.len() < SPECIALS.len() || SPECIALS.iter().enumerate().any(|(i, s)| tokens[i] != *s) {
            return Err(AsrError::Data("vocab must start with <s> </s> <wb> <unk>".into()));
        }
        Ok(Self {
            tokens,
            granularity,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token id, or `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Token sequence for a sentence given as words, each a list of phone symbols.
    /// Phone granularity separates words with `<wb>`; word granularity uses `words`.
    pub fn encode(&self, words: &[&str], phones: &[Vec<String>]) -> Vec<usize> {
        match self.granularity {
            Granularity::Word => words.iter().map(|w| self.id(w)).collect(),
            Granularity::Phone => {
                let mut out = Vec::new();
                for (i, p) in phones.iter().enumerate() {
                    if i > 0 {
                        out.push(WB);
                    }
                    out.extend(p.iter().map(|s| self.id(s)));
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub granularity: Granularity,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden1: 128,
            hidden2: 64,
            granularity: Granularity::Phone,
        }
    }
}

impl LmConfig {
    /// Hidden sizes 128 and 64.
    pub fn has_reference_shape(&self) -> bool {
        self.hidden1 == 128 && self.hidden2 == 64
    }
}

fn name(s: &str) -> String {
    format!("{PREFIX}{s}")
}

/// Embedding and output projection for a vocab of `v` tokens.
pub fn init_vocab_layers(cfg: &LmConfig, v: usize, rng: &mut ChaCha8Rng) -> Result<Parameters> {
    let mut p = Parameters::new();
    p.insert(
        name("embed"),
        xavier_uniform(rng, &[v, cfg.embed_dim], v, cfg.embed_dim),
    )?;
    p.insert(
        name("out.weight"),
        xavier_uniform(rng, &[v, cfg.hidden2], cfg.hidden2, v),
    )?;
    p.insert(name("out.bias"), Tensor::zeros(&[v]))?;
    Ok(p)
}

pub fn build_lm(vocab: &TokenVocab, cfg: &LmConfig, seed: u64) -> Result<Parameters> {
    if vocab.len() < 3 {
        return Err(AsrError::InvalidArgument(format!(
            "LM vocab needs at least 3 tokens, got {}",
            vocab.len()
        )));
    }
    if [cfg.embed_dim, cfg.hidden1, cfg.hidden2].contains(&0) {
        return Err(AsrError::InvalidArgument("LM layer sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::new();
    init_lstm(&mut p, &name("lstm1"), cfg.embed_dim, cfg.hidden1, &mut rng)?;
    init_lstm(&mut p, &name("lstm2"), cfg.hidden1, cfg.hidden2, &mut rng)?;
    p.extend(init_vocab_layers(cfg, vocab.len(), &mut rng)?)?;
    Ok(p)
}

fn vocab_size(params: &Parameters) -> Result<usize> {
    Ok(params.get(&name("out.bias"))?.shape[0])
}

/// Teacher-forced mean cross-entropy of one sentence, recorded in `g`.
fn sentence_graph(g: &mut Graph, params: &Parameters, cfg: &LmConfig, tokens: &[usize]) -> Result<Var> {
    let v = vocab_size(params)?;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
        return Err(AsrError::InvalidArgument(format!("token {bad} outside vocab of {v}")));
    }
    let embed = g.param(params, &name("embed"))?;
    let l1 = LstmVars::bind(g, params, &LstmNames::new(&name("lstm1")))?;
    let l2 = LstmVars::bind(g, params, &LstmNames::new(&name("lstm2")))?;
    let w = g.param(params, &name("out.weight"))?;
    let b = g.param(params, &name("out.bias"))?;
    let zeros = |g: &mut Graph, n| g.input(&[n], vec![0.0; n], false);
    let (mut h1, mut c1) = (zeros(g, cfg.hidden1)?, zeros(g, cfg.hidden1)?);
    let (mut h2, mut c2) = (zeros(g, cfg.hidden2)?, zeros(g, cfg.hidden2)?);
    let inputs = std::iter::once(BOS).chain(tokens.iter().copied());
    let targets = tokens.iter().copied().chain(std::iter::once(EOS));
    let mut total: Option<Var> = None;
    for (x, y) in inputs.zip(targets) {
        let e = g.gather_row(embed, x)?;
        (h1, c1) = lstm_cell(g, e, h1, c1, l1)?;
        (h2, c2) = lstm_cell(g, h1, h2, c2, l2)?;
        let logits = g.linear(h2, w, Some(b))?;
        let ce = g.cross_entropy(logits, y)?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    let total = total.expect("at least the end token is predicted");
    Ok(g.scale(total, 1.0 / (tokens.len() + 1) as f64))
}

/// Mean per-token loss of one sentence; gradients are added into `params`.
pub fn lm_step(params: &mut Parameters, cfg: &LmConfig, tokens: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let loss = sentence_graph(&mut g, params, cfg, tokens)?;
    let value = g.scalar(loss);
    g.backward(loss)?;
    g.accumulate_param_grads(params)?;
    Ok(value)
}

/// Record the sentence loss in a caller-owned graph (gradient checking).
pub fn lm_loss_graph(g: &mut Graph, params: &Parameters, cfg: &LmConfig, tokens: &[usize]) -> Result<Var> {
    sentence_graph(g, params, cfg, tokens)
}

/// Train for `epochs` passes over `corpus` in order, one update per
/// `optimizer.config.batch_size` sentences. Returns the mean loss of each epoch.
pub fn lm_train(
    params: &mut Parameters,
    cfg: &LmConfig,
    corpus: &[Vec<usize>],
    epochs: usize,
    optimizer: &mut Optimizer,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(AsrError::InvalidArgument("LM corpus is empty".into()));
    }
    let batch = optimizer.config.batch_size.max(1);
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sum = 0.0;
        for (i, sentence) in corpus.iter().enumerate() {
            sum += lm_step(params, cfg, sentence)?;
            if (i + 1) % batch == 0 || i + 1 == corpus.len() {
                optimizer.step(params)?;
            }
        }
        let mean = sum / corpus.len() as f64;
        if !mean.is_finite() {
            return Err(AsrError::Numeric("LM loss diverged".into()));
        }
        trace.push(mean);
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
struct LstmWeights {
    w_ih: Vec<f64>,
    w_hh: Vec<f64>,
    bias: Vec<f64>,
    input: usize,
    hidden: usize,
}

impl LstmWeights {
    fn load(params: &Parameters, prefix: &str) -> Result<Self> {
        let n = LstmNames::new(prefix);
        let w_ih = params.get(&n.w_ih)?;
        Ok(Self {
            input: w_ih.shape[1],
            hidden: w_ih.shape[0] / 4,
            w_ih: w_ih.values.clone(),
            w_hh: params.get(&n.w_hh)?.values.clone(),
            bias: params.get(&n.bias)?.values.clone(),
        })
    }

    fn step(&self, x: &[f64], h: &mut [f64], c: &mut [f64]) {
        let k = self.hidden;
        let mut pre = vec![0.0; 4 * k];
        gemm(1, self.input, 4 * k, x, false, &self.w_ih, true, 0.0, &mut pre);
        pre.iter_mut().zip(&self.bias).for_each(|(p, b)| *p += b);
        let mut from_h = vec![0.0; 4 * k];
        gemm(1, k, 4 * k, h, false, &self.w_hh, true, 0.0, &mut from_h);
        pre.iter_mut().zip(&from_h).for_each(|(p, q)| *p += q);
        let sig = |x: f64| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        };
        for j in 0..k {
            let i = sig(pre[j]);
            let f = sig(pre[k + j]);
            let g = pre[2 * k + j].tanh();
            let o = sig(pre[3 * k + j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
    }
}

/// Recurrent state after some prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    h1: Vec<f64>,
    c1: Vec<f64>,
    h2: Vec<f64>,
    c2: Vec<f64>,
    /// Log-distribution over the next token.
    pub next: Vec<f64>,
}

/// Inference-only LM evaluation without a differentiation graph.
#[derive(Debug, Clone)]
pub struct LmRunner {
    embed: Vec<f64>,
    embed_dim: usize,
    l1: LstmWeights,
    l2: LstmWeights,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

impl LmRunner {
    pub fn new(params: &Parameters) -> Result<Self> {
        let embed = params.get(&name("embed"))?;
        Ok(Self {
            embed_dim: embed.shape[1],
            embed: embed.values.clone(),
            l1: LstmWeights::load(params, &name("lstm1"))?,
            l2: LstmWeights::load(params, &name("lstm2"))?,
            out_w: params.get(&name("out.weight"))?.values.clone(),
            out_b: params.get(&name("out.bias"))?.values.clone(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.out_b.len()
    }

    /// State after consuming `<s>`.
    pub fn start(&self) -> LmState {
        let state = LmState {
            h1: vec![0.0; self.l1.hidden],
            c1: vec![0.0; self.l1.hidden],
            h2: vec![0.0; self.l2.hidden],
            c2: vec![0.0; self.l2.hidden],
            next: Vec::new(),
        };
        self.advance(&state, BOS)
    }

    /// Consume `token` and return the new state.
    pub fn advance(&self, state: &LmState, token: usize) -> LmState {
        let mut s = state.clone();
        let token = if token < self.vocab_size() { token } else { UNK };
        let e = &self.embed[token * self.embed_dim..(token + 1) * self.embed_dim];
        self.l1.step(e, &mut s.h1, &mut s.c1);
        self.l2.step(&s.h1.clone(), &mut s.h2, &mut s.c2);
        let v = self.vocab_size();
        let mut logits = vec![0.0; v];
        gemm(1, self.l2.hidden, v, &s.h2, false, &self.out_w, true, 0.0, &mut logits);
        logits.iter_mut().zip(&self.out_b).for_each(|(l, b)| *l += b);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        s.next = logits.iter().map(|l| l - lse).collect();
        s
    }

    /// `log P(tokens </s> | <s>)`.
    pub fn score(&self, tokens: &[usize]) -> f64 {
        let mut state = self.start();
        let mut total = 0.0;
        for &t in tokens {
            let t = if t < self.vocab_size() { t } else { UNK };
            total += state.next[t];
            state = self.advance(&state, t);
        }
        total + state.next[EOS]
    }
}

/// Natural-log probability of `tokens` wrapped in `<s>` ... `</s>`.
pub fn lm_score(params: &Parameters, tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(AsrError::InvalidArgument("cannot score an empty sequence".into()));
    }
    Ok(LmRunner::new(params)?.score(tokens))
}

/// `exp(-total log-prob / predicted tokens)`, counting each `</s>`.
pub fn perplexity(params: &Parameters, corpus: &[Vec<usize>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(AsrError::InvalidArgument("perplexity of an empty corpus".into()));
    }
    let runner = LmRunner::new(params)?;
    let (mut total, mut count) = (0.0, 0usize);
    for s in corpus {
        total += runner.score(s);
        count += s.len() + 1;
    }
    Ok((-total / count as f64).exp())
}
