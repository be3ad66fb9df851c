//! Composite layers built from [`Graph`] primitives.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{Parameters, Tensor};
use crate::error::{AsrError, Result};

/// He-uniform: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

/// Xavier-uniform: `U(-sqrt(6/(fan_in+fan_out)), ...)`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, bound)
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), values).expect("shape product matches")
}

/// `W x + b` for a vector input.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    g.linear(x, w, Some(b))
}

/// Names of the stacked LSTM weights under `prefix`. Gate order in the stacked
/// `4k` dimension is input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmNames {
    pub w_ih: String,
    pub w_hh: String,
    pub bias: String,
}

impl LstmNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            w_ih: format!("{prefix}.w_ih"),
            w_hh: format!("{prefix}.w_hh"),
            bias: format!("{prefix}.bias"),
        }
    }
}

/// Xavier-uniform LSTM weights with forget-gate bias +1.
pub fn init_lstm<R: Rng>(
    params: &mut Parameters,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    let names = LstmNames::new(prefix);
    params.insert(names.w_ih, xavier_uniform(rng, &[4 * hidden, input], input, 4 * hidden))?;
    params.insert(
        names.w_hh,
        xavier_uniform(rng, &[4 * hidden, hidden], hidden, 4 * hidden),
    )?;
    let mut bias = Tensor::zeros(&[4 * hidden]);
    bias.values[hidden..2 * hidden].fill(1.0);
    params.insert(names.bias, bias)
}

/// Stacked LSTM gate weights already bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

impl LstmVars {
    pub fn bind(g: &mut Graph, params: &Parameters, names: &LstmNames) -> Result<Self> {
        Ok(Self {
            w_ih: g.param(params, &names.w_ih)?,
            w_hh: g.param(params, &names.w_hh)?,
            bias: g.param(params, &names.bias)?,
        })
    }
}

/// One LSTM step: returns `(h', c')`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, w: LstmVars) -> Result<(Var, Var)> {
    let k = g.shape(h)[0];
    if g.shape(c) != [k] || g.shape(w.bias) != [4 * k] || g.shape(w.w_hh) != [4 * k, k] {
        return Err(AsrError::Shape(format!(
            "lstm state {:?}/{:?} does not match weights {:?}",
            g.shape(h),
            g.shape(c),
            g.shape(w.w_hh)
        )));
    }
    let from_x = g.linear(x, w.w_ih, Some(w.bias))?;
    let from_h = g.linear(h, w.w_hh, None)?;
    let pre = g.add(from_x, from_h)?;
    let i_pre = g.slice(pre, 0, k)?;
    let f_pre = g.slice(pre, k, k)?;
    let g_pre = g.slice(pre, 2 * k, k)?;
    let o_pre = g.slice(pre, 3 * k, k)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o = g.sigmoid(o_pre);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Single-head scaled dot-product self-attention with a residual connection:
/// `seq + softmax(Q K^T / sqrt(d)) V` where `Q = seq Wq^T` etc.
pub fn attention_layer(g: &mut Graph, seq: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let &[t, d] = g.shape(seq) else {
        return Err(AsrError::Shape("attention expects a [T, d] sequence".into()));
    };
    if t == 0 {
        return Err(AsrError::Shape("attention needs at least one position".into()));
    }
    let q = g.linear(seq, wq, None)?;
    let k = g.linear(seq, wk, None)?;
    let v = g.linear(seq, wv, None)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scaled);
    let mixed = g.matmul(weights, v)?;
    g.add(seq, mixed)
}
