//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Parameters are
//! copied into the graph once per name and their gradients are handed back to
//! [`Parameters`] with [`Graph::accumulate_param_grads`].

use std::collections::HashMap;

use super::linalg::gemm;
use super::tensor::Parameters;
use crate::error::{AsrError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    Transpose(Var),
    SwapAxes01(Var),
    Slice {
        src: Var,
        start: usize,
    },
    GatherRow {
        table: Var,
        row: usize,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
    },
    /// Loss whose gradient w.r.t. `input` was computed during the forward pass.
    Precomputed {
        input: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    params: HashMap<String, Var>,
    backward_done: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap_or(&1);
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last backward pass with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(Vec::as_slice)
    }

    /// A constant or, with `requires_grad`, a differentiable leaf.
    pub fn input(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(AsrError::Shape(format!(
                "input shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, Op::Input, requires_grad))
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, params: &Parameters, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?;
        let v = self.push(t.shape.clone(), t.values.clone(), Op::Param, t.requires_grad);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AsrError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), self.ng(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), self.ng(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), v, op, self.ng(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(AsrError::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), self.ng(a)))
    }

    /// `[r, c] -> [c, r]`.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let &[r, c] = self.shape(a) else {
            return Err(AsrError::Shape("transpose needs a matrix".into()));
        };
        let x = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], v, Op::Transpose(a), self.ng(a)))
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let &[a, b, c] = self.shape(x) else {
            return Err(AsrError::Shape("swap_axes01 needs a rank-3 tensor".into()));
        };
        let src = self.value(x);
        let mut v = vec![0.0; a * b * c];
        for i in 0..a {
            for j in 0..b {
                v[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(&src[(i * b + j) * c..(i * b + j + 1) * c]);
            }
        }
        Ok(self.push(vec![b, a, c], v, Op::SwapAxes01(x), self.ng(x)))
    }

    /// Contiguous run `[start, start + len)` of the flattened values, as a vector.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(src).len() || len == 0 {
            return Err(AsrError::Shape(format!(
                "slice {start}..{} out of {}",
                start + len,
                self.value(src).len()
            )));
        }
        let v = self.value(src)[start..start + len].to_vec();
        Ok(self.push(vec![len], v, Op::Slice { src, start }, self.ng(src)))
    }

    /// Row `row` of a `[n, d]` table.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let &[n, d] = self.shape(table) else {
            return Err(AsrError::Shape("gather_row needs a matrix".into()));
        };
        if row >= n {
            return Err(AsrError::InvalidArgument(format!("row {row} out of {n}")));
        }
        let v = self.value(table)[row * d..(row + 1) * d].to_vec();
        Ok(self.push(vec![d], v, Op::GatherRow { table, row }, self.ng(table)))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(AsrError::Shape("matmul needs two matrices".into()));
        };
        if k != k2 {
            return Err(AsrError::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut v = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut v);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], v, Op::MatMul(a, b), ng))
    }

    /// `x W^T + b` for `x` of shape `[n]` or `[t, n]`, `W` of shape `[m, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let &[m, n] = self.shape(w) else {
            return Err(AsrError::Shape("linear weight must be a matrix".into()));
        };
        let (rows, out_shape) = match self.shape(x) {
            &[nx] if nx == n => (1, vec![m]),
            &[t, nx] if nx == n => (t, vec![t, m]),
            s => {
                return Err(AsrError::Shape(format!(
                    "linear input {s:?} does not match weight [{m}, {n}]"
                )))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(AsrError::Shape(format!(
                    "linear bias {:?} does not match {m} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut v = vec![0.0; rows * m];
        gemm(rows, n, m, self.value(x), false, self.value(w), true, 0.0, &mut v);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in v.chunks_mut(m) {
                row.iter_mut().zip(bias).for_each(|(y, b)| *y += b);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out_shape, v, Op::Linear { x, w, b }, ng))
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    /// `x: [c_in, h, w]`, `k: [c_out, c_in, kh, kw]` (odd kernel sizes), `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (&[c_in, h, w], &[c_out, kc, kh, kw]) = (self.shape(x), self.shape(k)) else {
            return Err(AsrError::Shape(format!(
                "conv2d expects [c,h,w] input and [o,c,kh,kw] kernels, got {:?} and {:?}",
                self.shape(x),
                self.shape(k)
            )));
        };
        if kc != c_in || kh % 2 == 0 || kw % 2 == 0 || self.shape(b) != [c_out] {
            return Err(AsrError::Shape(format!(
                "conv2d channel/kernel mismatch: input {:?}, kernels {:?}, bias {:?}",
                self.shape(x),
                self.shape(k),
                self.shape(b)
            )));
        }
        let cols = im2col(self.value(x), c_in, h, w, kh, kw);
        let hw = h * w;
        let ckk = c_in * kh * kw;
        let mut out = vec![0.0; c_out * hw];
        gemm(c_out, ckk, hw, self.value(k), false, &cols, false, 0.0, &mut out);
        for (row, bias) in out.chunks_mut(hw).zip(self.value(b)) {
            row.iter_mut().for_each(|y| *y += bias);
        }
        let ng = self.ng(x) || self.ng(k) || self.ng(b);
        Ok(self.push(vec![c_out, h, w], out, Op::Conv2d { x, k, b, cols }, ng))
    }

    /// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(AsrError::Shape("max_pool2 needs [c,h,w]".into()));
        };
        if h < 2 || w < 2 {
            return Err(AsrError::Shape(format!(
                "max_pool2 input {h}x{w} smaller than one 2x2 window"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2 { x, argmax }, self.ng(x)))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = rows_cols(self.shape(a));
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(move |x| (x - lse).exp())
            })
            .collect();
        self.push(self.shape(a).to_vec(), v, Op::SoftmaxRows(a), self.ng(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, c) = rows_cols(self.shape(a));
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(move |x| x - lse)
            })
            .collect();
        self.push(self.shape(a).to_vec(), v, Op::LogSoftmaxRows(a), self.ng(a))
    }

    /// `-log_softmax(logits)[target]` for a vector of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let &[k] = self.shape(logits) else {
            return Err(AsrError::Shape("cross_entropy needs a logit vector".into()));
        };
        if target >= k {
            return Err(AsrError::InvalidArgument(format!(
                "target {target} out of range for {k} classes"
            )));
        }
        let x = self.value(logits);
        let loss = log_sum_exp(x) - x[target];
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, target },
            self.ng(logits),
        ))
    }

    /// Scalar loss node with a gradient supplied by the caller (used by losses such as
    /// CTC whose gradient falls out of their forward computation).
    pub fn precomputed_loss(&mut self, input: Var, loss: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(AsrError::Shape("precomputed gradient size mismatch".into()));
        }
        Ok(self.push(vec![1], vec![loss], Op::Precomputed { input, grad }, self.ng(input)))
    }

    /// Clear gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Populate gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(AsrError::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(AsrError::Autodiff("backward called twice without zero_grad".into()));
        }
        self.backward_done = true;
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Nodes are moved out for the duration so ops can be read while grads are written.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_in(&nodes, *a, g);
                self.acc_in(&nodes, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                self.acc_in(&nodes, *a, &ga);
                self.acc_in(&nodes, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|g| g * c).collect();
                self.acc_in(&nodes, *a, &ga);
            }
            Op::Sum(a) => {
                let s = g[0];
                self.acc_fn(&nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc_in(&nodes, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc_in(&nodes, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc_in(&nodes, *a, &ga);
            }
            Op::Reshape(a) => self.acc_in(&nodes, *a, g),
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                self.acc_fn(&nodes, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SwapAxes01(x) => {
                let (a, b, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
                self.acc_fn(&nodes, *x, |gx| {
                    for i in 0..a {
                        for j in 0..b {
                            let dst = &mut gx[(i * b + j) * c..(i * b + j + 1) * c];
                            let src = &g[(j * a + i) * c..(j * a + i + 1) * c];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                });
            }
            Op::Slice { src, start } => {
                let start = *start;
                self.acc_fn(&nodes, *src, |gs| {
                    gs[start..start + g.len()].iter_mut().zip(g).for_each(|(d, s)| *d += s)
                });
            }
            Op::GatherRow { table, row } => {
                let d = g.len();
                let row = *row;
                self.acc_fn(&nodes, *table, |gt| {
                    gt[row * d..(row + 1) * d].iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if nodes[a.0].needs_grad {
                    self.acc_fn(&nodes, *a, |ga| gemm(m, n, k, g, false, vb, true, 1.0, ga));
                }
                if nodes[b.0].needs_grad {
                    self.acc_fn(&nodes, *b, |gb| gemm(k, m, n, va, true, g, false, 1.0, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, n) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                let rows = g.len() / m;
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                if nodes[x.0].needs_grad {
                    self.acc_fn(&nodes, *x, |gx| gemm(rows, m, n, g, false, vw, false, 1.0, gx));
                }
                if nodes[w.0].needs_grad {
                    self.acc_fn(&nodes, *w, |gw| gemm(m, rows, n, g, true, vx, false, 1.0, gw));
                }
                if let Some(b) = b {
                    self.acc_fn(&nodes, *b, |gb| {
                        for row in g.chunks(m) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::Conv2d { x, k, b, cols } => {
                let (c_in, h, w) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
                let (c_out, kh, kw) = (nodes[k.0].shape[0], nodes[k.0].shape[2], nodes[k.0].shape[3]);
                let hw = h * w;
                let ckk = c_in * kh * kw;
                if nodes[k.0].needs_grad {
                    self.acc_fn(&nodes, *k, |gk| gemm(c_out, hw, ckk, g, false, cols, true, 1.0, gk));
                }
                self.acc_fn(&nodes, *b, |gb| {
                    for (acc, row) in gb.iter_mut().zip(g.chunks(hw)) {
                        *acc += row.iter().sum::<f64>();
                    }
                });
                if nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, c_out, hw, &nodes[k.0].value, true, g, false, 0.0, &mut dcols);
                    self.acc_fn(&nodes, *x, |gx| col2im_add(&dcols, gx, c_in, h, w, kh, kw));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                self.acc_fn(&nodes, *x, |gx| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src] += gi;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = rows_cols(&node.shape);
                let mut ga = vec![0.0; g.len()];
                for ((y, gy), out) in node.value.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in out.iter_mut().zip(y).zip(gy) {
                        *o = yi * (gi - dot);
                    }
                }
                self.acc_in(&nodes, *a, &ga);
            }
            Op::LogSoftmaxRows(a) => {
                let (_, c) = rows_cols(&node.shape);
                let mut ga = vec![0.0; g.len()];
                for ((y, gy), out) in node.value.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let total: f64 = gy.iter().sum();
                    for ((o, yi), gi) in out.iter_mut().zip(y).zip(gy) {
                        *o = gi - yi.exp() * total;
                    }
                }
                self.acc_in(&nodes, *a, &ga);
            }
            Op::CrossEntropy { logits, target } => {
                let x = &nodes[logits.0].value;
                let lse = log_sum_exp(x);
                let s = g[0];
                let target = *target;
                let ga: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(j, xi)| s * ((xi - lse).exp() - if j == target { 1.0 } else { 0.0 }))
                    .collect();
                self.acc_in(&nodes, *logits, &ga);
            }
            Op::Precomputed { input, grad } => {
                let s = g[0];
                let ga: Vec<f64> = grad.iter().map(|x| x * s).collect();
                self.acc_in(&nodes, *input, &ga);
            }
        }
        self.nodes = nodes;
    }

    // Helpers used while `self.nodes` is temporarily moved out in `backprop_node`.
    fn acc_fn(&mut self, nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_empty() {
            *slot = vec![0.0; nodes[v.0].value.len()];
        }
        f(slot);
    }

    fn acc_in(&mut self, nodes: &[Node], v: Var, src: &[f64]) {
        self.acc_fn(nodes, v, |g| g.iter_mut().zip(src).for_each(|(a, b)| *a += b));
    }

    /// Add the gradients of every parameter leaf into `params` (creating buffers as needed).
    pub fn accumulate_param_grads(&self, params: &mut Parameters) -> Result<()> {
        if !self.backward_done {
            return Err(AsrError::Autodiff("no backward pass has run".into()));
        }
        for (name, v) in &self.params {
            let Some(g) = self.grad(*v) else { continue };
            let t = params.get_mut(name)?;
            let buf = t.grad.get_or_insert_with(|| vec![0.0; t.values.len()]);
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Gradient of a named parameter leaf from the last backward pass.
    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|v| self.grad(*v))
    }
}

fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut cols = vec![0.0; c_in * kh * kw * hw];
    for c in 0..c_in {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((c * kh + dy) * kw + dx) * hw;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &x[c * hw + sy as usize * w..c * hw + (sy as usize + 1) * w];
                    let dst = &mut cols[row + y * w..row + (y + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[xx] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], gx: &mut [f64], c_in: usize, h: usize, w: usize, kh: usize, kw: usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for c in 0..c_in {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((c * kh + dy) * kw + dx) * hw;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = c * hw + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx >= 0 && sx < w as isize {
                            gx[base + sx as usize] += dcols[row + y * w + xx];
                        }
                    }
                }
            }
        }
    }
}
