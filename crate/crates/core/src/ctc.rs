//! Connectionist temporal classification: loss, gradient and greedy decoding.
//!
//! All recursions run in log space over the blank-augmented label sequence
//! `blank, l1, blank, l2, ..., blank`.

use crate::error::{AsrError, Result};
use crate::nn::{Graph, Var};

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Frames needed to emit `target`: one per label plus one blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(t: usize, classes: usize, target: &[usize], blank: usize) -> Result<()> {
    if target.is_empty() {
        return Err(AsrError::InvalidArgument("CTC target is empty".into()));
    }
    if let Some(&bad) = target.iter().find(|&&l| l >= classes || l == blank) {
        return Err(AsrError::InvalidArgument(format!(
            "CTC label {bad} invalid for {classes} classes with blank {blank}"
        )));
    }
    let needed = min_frames(target);
    if t < needed {
        return Err(AsrError::InfeasibleAlignment { needed, frames: t });
    }
    Ok(())
}

/// Negative log-likelihood of `target` under row-major `[t, classes]` log-probabilities,
/// and its gradient with respect to those log-probabilities.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    t: usize,
    classes: usize,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    check(t, classes, target, blank)?;
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |f: usize, s: usize| log_probs[f * classes + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t * s_len];
    alpha[0] = lp(0, 0);
    alpha[1] = lp(0, 1);
    for f in 1..t {
        for s in 0..s_len {
            let prev = &alpha[(f - 1) * s_len..f * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[f * s_len + s] = if a == ninf { ninf } else { a + lp(f, s) };
        }
    }
    let last = (t - 1) * s_len;
    let log_p = log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_p.is_finite() {
        return Err(AsrError::Numeric("CTC total probability underflowed".into()));
    }

    let mut beta = vec![ninf; t * s_len];
    beta[last + s_len - 1] = lp(t - 1, s_len - 1);
    beta[last + s_len - 2] = lp(t - 1, s_len - 2);
    for f in (0..t - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(f + 1) * s_len..(f + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[f * s_len + s] = if b == ninf { ninf } else { b + lp(f, s) };
        }
    }

    let mut grad = vec![0.0; t * classes];
    let mut occupancy = vec![ninf; classes];
    for f in 0..t {
        occupancy.fill(ninf);
        for s in 0..s_len {
            let ab = alpha[f * s_len + s] + beta[f * s_len + s] - lp(f, s);
            occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
        }
        for (k, &o) in occupancy.iter().enumerate() {
            if o != ninf {
                grad[f * classes + k] = -(o - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss node over a `[t, classes]` log-probability node.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let &[t, classes] = g.shape(log_probs) else {
        return Err(AsrError::Shape(
            "ctc_loss expects [T, classes] log-probabilities".into(),
        ));
    };
    let (loss, grad) = ctc_forward_backward(g.value(log_probs), t, classes, target, blank)?;
    g.precomputed_loss(log_probs, loss, grad)
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &[f64], t: usize, classes: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for f in 0..t {
        let row = &log_probs[f * classes..(f + 1) * classes];
        let best = argmax(row);
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Index of the largest element; the first wins on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
