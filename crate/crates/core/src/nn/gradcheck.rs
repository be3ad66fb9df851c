//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Parameters;
use crate::error::{AsrError, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Upper bound on the number of scalars probed; larger models are subsampled.
    pub max_scalars: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error; gradients below it are compared on
    /// this absolute scale, since their finite differences are dominated by roundoff.
    pub floor: f64,
    /// Also probe at `epsilon / 10` and keep the closer agreement. A step straddling a
    /// ReLU or max-pool kink rarely straddles one at both sizes; a wrong gradient fails both.
    pub refine: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_scalars: 200,
            seed: 0,
            floor: 1e-8,
            refine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst scalar.
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` gradients (by parameter name) against central differences of
/// `value_fn`.
pub fn compare_gradients(
    params: &Parameters,
    analytic: &BTreeMap<String, Vec<f64>>,
    value_fn: impl Fn(&Parameters) -> Result<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let base = value_fn(params)?;
    let again = value_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(AsrError::Numeric(format!(
            "forward function is not deterministic ({base} vs {again})"
        )));
    }
    let index: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = if index.len() <= opts.max_scalars {
        (0..index.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut s = sample(&mut rng, index.len(), opts.max_scalars).into_vec();
        s.sort_unstable();
        s
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &k in &chosen {
        let (name, i) = &index[k];
        let a = analytic.get(name).map_or(0.0, |g| g[*i]);
        let mut central = |eps: f64| -> Result<f64> {
            let original = work.get(name)?.values[*i];
            work.get_mut(name)?.values[*i] = original + eps;
            let plus = value_fn(&work)?;
            work.get_mut(name)?.values[*i] = original - eps;
            let minus = value_fn(&work)?;
            work.get_mut(name)?.values[*i] = original;
            Ok(relative_error(a, (plus - minus) / (2.0 * eps), opts.floor))
        };
        let mut err = central(opts.epsilon)?;
        if opts.refine {
            err = err.min(central(opts.epsilon / 10.0)?);
        }
        if !err.is_finite() {
            return Err(AsrError::Numeric(format!("non-finite gradient at {name}[{i}]")));
        }
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}

/// Analytic gradients of the scalar built by `build`, keyed by parameter name.
pub fn analytic_gradients(
    params: &Parameters,
    build: &impl Fn(&mut Graph, &Parameters) -> Result<Var>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.backward(loss)?;
    Ok(params
        .names()
        .map(|n| {
            let grad = g
                .param_grad(n)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params.get(n).map(|t| t.len()).unwrap_or(0)]);
            (n.to_string(), grad)
        })
        .collect())
}

/// Finite-difference check of a graph-built scalar against its backward pass.
pub fn grad_check(
    params: &Parameters,
    build: impl Fn(&mut Graph, &Parameters) -> Result<Var>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(params, &build)?;
    compare_gradients(
        params,
        &analytic,
        |p| {
            let mut g = Graph::new();
            let loss = build(&mut g, p)?;
            Ok(g.scalar(loss))
        },
        opts,
    )
}
