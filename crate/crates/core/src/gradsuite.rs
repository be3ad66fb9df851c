//! Finite-difference checks of every differentiable building block, each over many
//! random instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::acoustic::{acoustic_graph, build_acoustic_model, feature_matrix, AcousticConfig};
use crate::ctc::ctc_loss;
use crate::error::Result;
use crate::lm::{build_lm, lm_loss_graph, Granularity, LmConfig, TokenVocab};
use crate::nn::layers::init_lstm;
use crate::nn::{
    attention_layer, dense, grad_check, lstm_cell, GradCheckOptions, Graph, LstmNames, LstmVars, Parameters, Tensor,
    Var,
};

/// Pass threshold on the worst relative error of an operation.
pub const TOLERANCE: f64 = 1e-3;
/// Central-difference step for smooth operations.
pub const EPSILON_SMOOTH: f64 = 1e-4;
/// Smaller step for graphs with ReLU or max-pool kinks, which are also re-probed at a
/// tenth of it.
pub const EPSILON_PIECEWISE: f64 = 1e-5;
/// Relative-error denominator floor.
pub const FLOOR: f64 = 1e-6;

const PIECEWISE: [&str; 3] = ["max_pool2d", "dense", "acoustic_model"];

pub const OPERATIONS: [&str; 9] = [
    "conv2d",
    "max_pool2d",
    "dense",
    "lstm_cell",
    "attention_layer",
    "softmax_cross_entropy",
    "ctc_loss",
    "acoustic_model",
    "lm_step",
];

#[derive(Debug, Clone, Serialize)]
pub struct OpResult {
    pub op: String,
    pub seeds: usize,
    pub scalars_checked: usize,
    pub max_rel_error: f64,
    /// Seed of the worst instance.
    pub worst_seed: u64,
    pub passed: bool,
    pub seconds: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape")
}

/// `sum(x * r)` for a fixed random `r`, so every output element gets a distinct weight.
fn project(g: &mut Graph, x: Var, r: &[f64]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = g.input(&shape, r.to_vec(), false)?;
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

type Build = Box<dyn Fn(&mut Graph, &Parameters) -> Result<Var>>;

/// Random parameters and a loss builder for one instance of `op`.
fn instance(op: &str, seed: u64) -> Result<(Parameters, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::new();
    let build: Build = match op {
        "conv2d" => {
            let (c, h, w, o) = (2, 5, 4, 3);
            p.insert("x", random(&mut rng, &[c, h, w], 1.0))?;
            p.insert("k", random(&mut rng, &[o, c, 3, 3], 0.5))?;
            p.insert("b", random(&mut rng, &[o], 0.5))?;
            let r = weights(&mut rng, o * h * w);
            Box::new(move |g, p| {
                let (x, k, b) = (g.param(p, "x")?, g.param(p, "k")?, g.param(p, "b")?);
                let y = g.conv2d(x, k, b)?;
                project(g, y, &r)
            })
        }
        "max_pool2d" => {
            p.insert("x", random(&mut rng, &[2, 6, 4], 1.0))?;
            let r = weights(&mut rng, 2 * 3 * 2);
            Box::new(move |g, p| {
                let x = g.param(p, "x")?;
                let y = g.max_pool2(x)?;
                project(g, y, &r)
            })
        }
        "dense" => {
            p.insert("x", random(&mut rng, &[3, 5], 1.0))?;
            p.insert("w", random(&mut rng, &[4, 5], 0.5))?;
            p.insert("b", random(&mut rng, &[4], 0.5))?;
            let r = weights(&mut rng, 12);
            Box::new(move |g, p| {
                let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
                let y = dense(g, x, w, b)?;
                let y = g.relu(y);
                project(g, y, &r)
            })
        }
        "lstm_cell" => {
            let (n_in, k) = (3, 4);
            init_lstm(&mut p, "cell", n_in, k, &mut rng)?;
            for (name, t) in p.iter_mut() {
                if name.ends_with("bias") {
                    *t = random(&mut rng, &t.shape.clone(), 0.5);
                }
            }
            p.insert("x", random(&mut rng, &[2, n_in], 1.0))?;
            p.insert("h0", random(&mut rng, &[k], 0.5))?;
            p.insert("c0", random(&mut rng, &[k], 0.5))?;
            let (rh, rc) = (weights(&mut rng, k), weights(&mut rng, k));
            Box::new(move |g, p| {
                let names = LstmNames::new("cell");
                let x = g.param(p, "x")?;
                let (mut h, mut c) = (g.param(p, "h0")?, g.param(p, "c0")?);
                for t in 0..2 {
                    let xt = g.gather_row(x, t)?;
                    let w = LstmVars::bind(g, p, &names)?;
                    (h, c) = lstm_cell(g, xt, h, c, w)?;
                }
                let a = project(g, h, &rh)?;
                let b = project(g, c, &rc)?;
                g.add(a, b)
            })
        }
        "attention_layer" => {
            let (t, d) = (4, 3);
            p.insert("x", random(&mut rng, &[t, d], 1.0))?;
            for n in ["q", "k", "v"] {
                p.insert(n, random(&mut rng, &[d, d], 0.8))?;
            }
            let r = weights(&mut rng, t * d);
            Box::new(move |g, p| {
                let x = g.param(p, "x")?;
                let (q, k, v) = (g.param(p, "q")?, g.param(p, "k")?, g.param(p, "v")?);
                let y = attention_layer(g, x, q, k, v)?;
                project(g, y, &r)
            })
        }
        "softmax_cross_entropy" => {
            let k = 6;
            p.insert("z", random(&mut rng, &[k], 2.0))?;
            let target = rng.random_range(0..k);
            let r = weights(&mut rng, k);
            Box::new(move |g, p| {
                let z = g.param(p, "z")?;
                let ce = g.cross_entropy(z, target)?;
                let s = g.softmax(z);
                let extra = project(g, s, &r)?;
                g.add(ce, extra)
            })
        }
        "ctc_loss" => {
            let (t, c) = (6, 4);
            p.insert("z", random(&mut rng, &[t, c], 2.0))?;
            let len = rng.random_range(1..=3);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..c - 1)).collect();
            Box::new(move |g, p| {
                let z = g.param(p, "z")?;
                let lp = g.log_softmax(z);
                ctc_loss(g, lp, &target, c - 1)
            })
        }
        "acoustic_model" => {
            let cfg = AcousticConfig {
                conv1_filters: 2,
                conv2_filters: 3,
                dense_units: 6,
                n_phones: 5,
                ..AcousticConfig::default()
            };
            p = build_acoustic_model(&cfg, seed)?;
            for (name, t) in p.iter_mut() {
                if name.ends_with("bias") {
                    *t = random(&mut rng, &t.shape.clone(), 0.1);
                }
            }
            let rows = 16;
            let f = feature_matrix(rows, (0..rows * 39).map(|_| rng.random_range(-1.5..1.5)).collect())?;
            let target: Vec<usize> = (0..2).map(|_| rng.random_range(0..5)).collect();
            Box::new(move |g, p| {
                let lp = acoustic_graph(g, p, &cfg, &f)?;
                ctc_loss(g, lp, &target, cfg.blank())
            })
        }
        "lm_step" => {
            let symbols: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
            let vocab = TokenVocab::new(&symbols, Granularity::Phone)?;
            let cfg = LmConfig {
                embed_dim: 4,
                hidden1: 5,
                hidden2: 3,
                granularity: Granularity::Phone,
            };
            p = build_lm(&vocab, &cfg, seed)?;
            let len = rng.random_range(1..=4);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(2..vocab.len())).collect();
            Box::new(move |g, p| lm_loss_graph(g, p, &cfg, &tokens))
        }
        other => unreachable!("unknown operation {other}"),
    };
    Ok((p, build))
}

/// Check `op` on `seeds` instances. Large models are subsampled to `max_scalars` per
/// instance.
pub fn check_operation(op: &str, seeds: usize, base_seed: u64, max_scalars: usize) -> Result<OpResult> {
    let start = Instant::now();
    let mut out = OpResult {
        op: op.to_string(),
        seeds,
        scalars_checked: 0,
        max_rel_error: 0.0,
        worst_seed: base_seed,
        passed: true,
        seconds: 0.0,
    };
    for s in 0..seeds as u64 {
        let seed = base_seed.wrapping_add(s);
        let (params, build) = instance(op, seed)?;
        let report = grad_check(
            &params,
            build,
            GradCheckOptions {
                epsilon: if PIECEWISE.contains(&op) {
                    EPSILON_PIECEWISE
                } else {
                    EPSILON_SMOOTH
                },
                max_scalars,
                seed,
                floor: FLOOR,
                refine: PIECEWISE.contains(&op),
            },
        )?;
        out.scalars_checked += report.checked;
        if report.max_rel_error >= out.max_rel_error {
            out.max_rel_error = report.max_rel_error;
            out.worst_seed = seed;
        }
    }
    out.passed = out.max_rel_error < TOLERANCE;
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Every operation in [`OPERATIONS`] over `seeds` instances each.
pub fn run_suite(seeds: usize, base_seed: u64) -> Result<Vec<OpResult>> {
    OPERATIONS
        .iter()
        .map(|op| check_operation(op, seeds, base_seed, 40))
        .collect()
}
