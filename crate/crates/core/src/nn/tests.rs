use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{analytic_gradients, compare_gradients, grad_check, GradCheckOptions};
use super::layers::{attention_layer, lstm_cell, LstmVars};
use super::*;
use crate::error::AsrError;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn param(p: &mut Parameters, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
    let n = shape.iter().product();
    p.insert(name, Tensor::new(shape.to_vec(), rand_vec(rng, n)).unwrap())
        .unwrap();
}

/// Direct four-loop same-padded cross-correlation.
fn naive_conv(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    k: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    b: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut s = b[o];
                for c in 0..c_in {
                    for dy in 0..kh as isize {
                        for dx in 0..kw as isize {
                            let sy = y + dy - kh as isize / 2;
                            let sx = xx + dx - kw as isize / 2;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                s += k[((o * c_in + c) * kh + dy as usize) * kw + dx as usize]
                                    * x[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                out[(o * h + y as usize) * w + xx as usize] = s;
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let x = g.input(&[1, 3, 4], xs.clone(), false).unwrap();
    let k = g.input(&[1, 1, 1, 1], vec![1.0], false).unwrap();
    let b = g.input(&[1], vec![0.0], false).unwrap();
    let y = g.conv2d(x, k, b).unwrap();
    assert_eq!(g.value(y), &xs[..]);
    assert_eq!(g.shape(y), &[1, 3, 4]);
}

#[test]
fn conv_all_ones_on_2x2() {
    // every output window covers the whole 2x2 input
    let mut g = Graph::new();
    let x = g.input(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let k = g.input(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
    let b = g.input(&[1], vec![0.0], false).unwrap();
    let y = g.conv2d(x, k, b).unwrap();
    let want = naive_conv(&[1.0, 2.0, 3.0, 4.0], (1, 2, 2), &[1.0; 9], (1, 3, 3), &[0.0]);
    assert_eq!(g.value(y), &want[..]);
    assert_eq!(g.value(y), &[10.0, 10.0, 10.0, 10.0]);
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let (c_in, h, w, c_out) = (
            rng.random_range(1..4),
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..4),
        );
        let (kh, kw) = ([1, 3, 5][rng.random_range(0..3)], [1, 3][rng.random_range(0..2)]);
        let xs = rand_vec(&mut rng, c_in * h * w);
        let ks = rand_vec(&mut rng, c_out * c_in * kh * kw);
        let bs = rand_vec(&mut rng, c_out);
        let mut g = Graph::new();
        let x = g.input(&[c_in, h, w], xs.clone(), false).unwrap();
        let k = g.input(&[c_out, c_in, kh, kw], ks.clone(), false).unwrap();
        let b = g.input(&[c_out], bs.clone(), false).unwrap();
        let y = g.conv2d(x, k, b).unwrap();
        let want = naive_conv(&xs, (c_in, h, w), &ks, (c_out, kh, kw), &bs);
        for (a, b) in g.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.input(&[2, 3, 3], vec![0.0; 18], false).unwrap();
    let k = g.input(&[1, 1, 3, 3], vec![0.0; 9], false).unwrap();
    let b = g.input(&[1], vec![0.0], false).unwrap();
    assert!(matches!(g.conv2d(x, k, b), Err(AsrError::Shape(_))));
    let k2 = g.input(&[1, 2, 2, 2], vec![0.0; 8], false).unwrap();
    assert!(g.conv2d(x, k2, b).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Parameters::new();
        param(&mut p, "x", &[2, 5, 4], &mut rng);
        param(&mut p, "k", &[3, 2, 3, 3], &mut rng);
        param(&mut p, "b", &[3], &mut rng);
        let r = grad_check(
            &p,
            |g, p| {
                let x = g.param(p, "x")?;
                let k = g.param(p, "k")?;
                let b = g.param(p, "b")?;
                let y = g.conv2d(x, k, b)?;
                Ok(g.sum(y))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}

#[test]
fn max_pool_cases() {
    let mut g = Graph::new();
    let x = g.input(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.value(y), &[4.0]);

    let mut g = Graph::new();
    let x = g.input(&[1, 5, 5], vec![0.0; 25], false).unwrap();
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);

    let mut g = Graph::new();
    let x = g.input(&[1, 1, 4], vec![0.0; 4], false).unwrap();
    assert!(g.max_pool2(x).is_err());
}

#[test]
fn max_pool_ties_route_to_first() {
    let mut g = Graph::new();
    let x = g.input(&[1, 4, 4], vec![2.0; 16], true).unwrap();
    let y = g.max_pool2(x).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 2.0));
    let s = g.sum(y);
    g.backward(s).unwrap();
    let gx = g.grad(x).unwrap();
    let hot: Vec<usize> = (0..16).filter(|&i| gx[i] == 1.0).collect();
    assert_eq!(hot, vec![0, 2, 8, 10]);
    assert_eq!(gx.iter().sum::<f64>(), 4.0);
}

#[test]
fn dense_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = rand_vec(&mut rng, 3);
    let mut g = Graph::new();
    let x = g.input(&[3], xs.clone(), false).unwrap();
    let eye = g
        .input(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], false)
        .unwrap();
    let zb = g.input(&[3], vec![0.0; 3], false).unwrap();
    let y = dense(&mut g, x, eye, zb).unwrap();
    assert_eq!(g.value(y), &xs[..]);

    let zw = g.input(&[2, 3], vec![0.0; 6], false).unwrap();
    let b = g.input(&[2], vec![0.5, -1.5], false).unwrap();
    let y = dense(&mut g, x, zw, b).unwrap();
    assert_eq!(g.value(y), &[0.5, -1.5]);

    let ws = rand_vec(&mut rng, 12);
    let bs = rand_vec(&mut rng, 4);
    let w = g.input(&[4, 3], ws.clone(), false).unwrap();
    let b = g.input(&[4], bs.clone(), false).unwrap();
    let y = dense(&mut g, x, w, b).unwrap();
    for i in 0..4 {
        let mut s = bs[i];
        for j in 0..3 {
            s += ws[i * 3 + j] * xs[j];
        }
        assert!((g.value(y)[i] - s).abs() < 1e-14);
    }
    let bad = g.input(&[4, 2], vec![0.0; 8], false).unwrap();
    assert!(dense(&mut g, x, bad, b).is_err());
}

fn lstm_params(rng: &mut ChaCha8Rng, d: usize, k: usize, scale: f64) -> Parameters {
    let mut p = Parameters::new();
    for (name, shape) in [
        ("l.w_ih", vec![4 * k, d]),
        ("l.w_hh", vec![4 * k, k]),
        ("l.bias", vec![4 * k]),
    ] {
        let n = shape.iter().product();
        let v = rand_vec(rng, n).into_iter().map(|x| x * scale).collect();
        p.insert(name, Tensor::new(shape, v).unwrap()).unwrap();
    }
    p
}

#[test]
fn lstm_zero_weights() {
    let mut p = Parameters::new();
    p.insert("l.w_ih", Tensor::zeros(&[8, 3])).unwrap();
    p.insert("l.w_hh", Tensor::zeros(&[8, 2])).unwrap();
    p.insert("l.bias", Tensor::zeros(&[8])).unwrap();
    let mut g = Graph::new();
    let w = LstmVars::bind(&mut g, &p, &LstmNames::new("l")).unwrap();
    let x = g.input(&[3], vec![0.3, -0.2, 0.9], false).unwrap();
    let h = g.input(&[2], vec![0.0; 2], false).unwrap();
    let c = g.input(&[2], vec![0.0; 2], false).unwrap();
    let (h2, c2) = lstm_cell(&mut g, x, h, c, w).unwrap();
    assert_eq!(g.value(h2), &[0.0, 0.0]);
    assert_eq!(g.value(c2), &[0.0, 0.0]);
}

#[test]
fn lstm_saturated_gates_keep_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = 3;
    let mut p = lstm_params(&mut rng, 2, k, 0.1);
    let bias = &mut p.get_mut("l.bias").unwrap().values;
    bias[..k].fill(-50.0);
    bias[k..2 * k].fill(50.0);
    let mut g = Graph::new();
    let w = LstmVars::bind(&mut g, &p, &LstmNames::new("l")).unwrap();
    let x = g.input(&[2], vec![0.5, -0.5], false).unwrap();
    let h = g.input(&[k], vec![0.1, 0.2, 0.3], false).unwrap();
    let cs = vec![0.7, -1.2, 0.05];
    let c = g.input(&[k], cs.clone(), false).unwrap();
    let (_, c2) = lstm_cell(&mut g, x, h, c, w).unwrap();
    for (a, b) in g.value(c2).iter().zip(&cs) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn lstm_bptt_three_steps() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = lstm_params(&mut rng, 3, 4, 0.5);
        param(&mut p, "xs", &[3, 3], &mut rng);
        let r = grad_check(
            &p,
            |g, p| {
                let w = LstmVars::bind(g, p, &LstmNames::new("l"))?;
                let xs = g.param(p, "xs")?;
                let mut h = g.input(&[4], vec![0.0; 4], false)?;
                let mut c = g.input(&[4], vec![0.0; 4], false)?;
                for t in 0..3 {
                    let x = g.slice(xs, 3 * t, 3)?;
                    (h, c) = lstm_cell(g, x, h, c, w)?;
                }
                let hc = g.mul(h, h)?;
                let s1 = g.sum(hc);
                let s2 = g.sum(c);
                g.add(s1, s2)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}

#[test]
fn softmax_properties() {
    let mut g = Graph::new();
    let x = g.input(&[3], vec![0.0; 3], false).unwrap();
    let y = g.softmax(x);
    for v in g.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let x = g.input(&[n], xs, false).unwrap();
        let y = g.softmax(x);
        let s: f64 = g.value(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(g.value(y).iter().all(|&p| p > 0.0 || p == 0.0 && n > 1));
    }
}

#[test]
fn cross_entropy_value_and_range() {
    let mut g = Graph::new();
    let x = g.input(&[4], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let l = g.cross_entropy(x, 2).unwrap();
    let lse = (1f64.exp() + 2f64.exp() + 3f64.exp() + 4f64.exp()).ln();
    assert!((g.scalar(l) - (lse - 3.0)).abs() < 1e-12);
    assert!(matches!(g.cross_entropy(x, 4), Err(AsrError::InvalidArgument(_))));
}

#[test]
fn cross_entropy_and_softmax_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Parameters::new();
        param(&mut p, "z", &[6], &mut rng);
        param(&mut p, "m", &[2, 3], &mut rng);
        let r = grad_check(
            &p,
            |g, p| {
                let z = g.param(p, "z")?;
                let ce = g.cross_entropy(z, 4)?;
                let m = g.param(p, "m")?;
                let sm = g.softmax(m);
                let w = g.input(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.0], false)?;
                let prod = g.mul(sm, w)?;
                let s = g.sum(prod);
                let ls = g.log_softmax(m);
                let prod2 = g.mul(ls, w)?;
                let s2 = g.sum(prod2);
                let t = g.add(ce, s)?;
                g.add(t, s2)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}

fn attention_oracle(seq: &[f64], t: usize, d: usize, wq: &[f64], wk: &[f64], wv: &[f64]) -> Vec<f64> {
    let proj = |w: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for o in 0..d {
                out[i * d + o] = (0..d).map(|j| w[o * d + j] * seq[i * d + j]).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let mut out = seq.to_vec();
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            out[i * d + c] += (0..t).map(|j| e[j] / z * v[j * d + c]).sum::<f64>();
        }
    }
    out
}

#[test]
fn attention_single_position_and_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 4;
    let seq = rand_vec(&mut rng, d);
    let wv = rand_vec(&mut rng, d * d);
    let mut g = Graph::new();
    let s = g.input(&[1, d], seq.clone(), false).unwrap();
    let q = g.input(&[d, d], rand_vec(&mut rng, d * d), false).unwrap();
    let k = g.input(&[d, d], rand_vec(&mut rng, d * d), false).unwrap();
    let v = g.input(&[d, d], wv.clone(), false).unwrap();
    let y = attention_layer(&mut g, s, q, k, v).unwrap();
    for o in 0..d {
        let vp: f64 = (0..d).map(|j| wv[o * d + j] * seq[j]).sum();
        assert!((g.value(y)[o] - (seq[o] + vp)).abs() < 1e-12);
    }

    let seq = rand_vec(&mut rng, 5 * d);
    let s = g.input(&[5, d], seq.clone(), false).unwrap();
    let z = g.input(&[d, d], vec![0.0; d * d], false).unwrap();
    let y = attention_layer(&mut g, s, z, z, z).unwrap();
    assert_eq!(g.value(y), &seq[..]);
}

#[test]
fn attention_matches_direct_formula_and_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, d) = (3, 4);
        let mut p = Parameters::new();
        for n in ["s", "q", "k", "v"] {
            let shape = if n == "s" { [t, d] } else { [d, d] };
            param(&mut p, n, &shape, &mut rng);
        }
        let build = |g: &mut Graph, p: &Parameters| {
            let s = g.param(p, "s")?;
            let q = g.param(p, "q")?;
            let k = g.param(p, "k")?;
            let v = g.param(p, "v")?;
            let y = attention_layer(g, s, q, k, v)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let s = g.param(&p, "s").unwrap();
        let q = g.param(&p, "q").unwrap();
        let k = g.param(&p, "k").unwrap();
        let v = g.param(&p, "v").unwrap();
        let y = attention_layer(&mut g, s, q, k, v).unwrap();
        let want = attention_oracle(
            &p.get("s").unwrap().values,
            t,
            d,
            &p.get("q").unwrap().values,
            &p.get("k").unwrap().values,
            &p.get("v").unwrap().values,
        );
        for (a, b) in g.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = grad_check(&p, build, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}

#[test]
fn backward_simple_polynomials() {
    let mut p = Parameters::new();
    p.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
        .unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, "w").unwrap();
    let s = g.sum(w);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let w = g.param(&p, "w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let w = g.input(&[2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(g.backward(w), Err(AsrError::Autodiff(_))));
    let s = g.sum(w);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(AsrError::Autodiff(_))));
    g.zero_grad();
    g.backward(s).unwrap();
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let w = g.input(&[1], vec![3.0], true).unwrap();
    let a = g.scale(w, 2.0);
    let b = g.mul(w, w).unwrap();
    let c = g.add(a, b).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0 + 6.0]);
}

#[test]
fn gradcheck_on_quadratic_and_sign_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = Parameters::new();
    param(&mut p, "w", &[10], &mut rng);
    let build = |g: &mut Graph, p: &Parameters| {
        let w = g.param(p, "w")?;
        let sq = g.mul(w, w)?;
        let s = g.scale(sq, 1.5);
        Ok(g.sum(s))
    };
    let r = grad_check(&p, build, GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");

    let mut grads = analytic_gradients(&p, &build).unwrap();
    grads.values_mut().flatten().for_each(|x| *x = -*x);
    let value = |p: &Parameters| {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        Ok(g.scalar(l))
    };
    let r = compare_gradients(&p, &grads, value, GradCheckOptions::default()).unwrap();
    assert!((r.max_rel_error - 2.0).abs() < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_detects_nondeterminism() {
    let p = {
        let mut p = Parameters::new();
        p.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        p
    };
    let counter = std::cell::Cell::new(0.0);
    let value = |_: &Parameters| {
        counter.set(counter.get() + 1.0);
        Ok(counter.get())
    };
    let grads = [("w".to_string(), vec![0.0])].into_iter().collect();
    assert!(compare_gradients(&p, &grads, value, GradCheckOptions::default()).is_err());
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = Parameters::new();
    param(&mut p, "x", &[2, 6, 5], &mut rng);
    param(&mut p, "k", &[4, 2, 3, 3], &mut rng);
    param(&mut p, "b", &[4], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let x = g.param(&p, "x").unwrap();
        let k = g.param(&p, "k").unwrap();
        let b = g.param(&p, "b").unwrap();
        let y = g.conv2d(x, k, b).unwrap();
        let r = g.relu(y);
        let m = g.max_pool2(r).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        let mut grads = p.clone();
        grads.clear_grad();
        g.accumulate_param_grads(&mut grads).unwrap();
        grads
    };
    assert_eq!(run(), run());
}
