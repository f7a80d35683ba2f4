//! Dynamic computation tape.
//!
//! Every forward pass builds a fresh [`Tape`]. Each primitive appends a node
//! holding its output value plus whatever it needs for the backward rule, so
//! nodes are always in topological order and [`Tape::backward`] is a single
//! reverse sweep. The tape is never mutated by `backward`, so replaying it
//! twice yields bitwise-identical gradients.
//!
//! All values are 2-D (`rows x cols`); vectors are `1 x n`, scalars `1 x 1`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Vec<f32>),
    Scale(Var, f32),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        rows: Var,
        idx: Vec<usize>,
    },
    StopGradient,
    Blend {
        base: Var,
        cand: Var,
        weight: Var,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        count: usize,
        probs: Vec<f32>,
    },
    SumAll(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f32 = 1e-6;

/// Records primitive operations and replays them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when no live path
    /// connects them.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], p: usize, q: usize, s: usize) {
    // out[p x s] += a[p x q] * b[q x s]; each output row depends only on the
    // matching row of `a`, which keeps row prefixes bitwise stable.
    for i in 0..p {
        let orow = &mut out[i * s..(i + 1) * s];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * s..(k + 1) * s];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f32> {
        let n = self.node(v);
        if n.rows * n.cols != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, found a {}x{} value",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    /// Copies a tensor onto the tape; it participates in gradients iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.matrix_dims()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad()))
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::dim("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// A trainable input, independent of any stored tensor.
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::dim("variable", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, true))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::dim(op, &[ar, ac], &[br, bc]));
        }
        Ok((ar, ac))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims(a);
        let (q2, s) = self.dims(b);
        if q != q2 {
            return Err(Error::dim("matmul", &[p, q], &[q2, s]));
        }
        let mut out = vec![0.0; p * s];
        gemm_acc(self.value(a), self.value(b), &mut out, p, q, s);
        let ng = self.ng(&[a, b]);
        Ok(self.push(p, s, out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    /// `x[n x c] + bias[1 x c]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != c {
            return Err(Error::dim("add_row", &[r, c], &[br, bc]));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(r, c, out, Op::AddRow(x, bias), ng))
    }

    /// `x[n x c] * col[n x 1]`, column broadcast over features.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (cr, cc) = self.dims(col);
        if cr != r || cc != 1 {
            return Err(Error::dim("mul_col", &[r, c], &[cr, cc]));
        }
        let w = self.value(col);
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            for v in &mut out[i * c..(i + 1) * c] {
                *v *= w[i];
            }
        }
        let ng = self.ng(&[x, col]);
        Ok(self.push(r, c, out, Op::MulCol(x, col), ng))
    }

    /// Elementwise product with a fixed factor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f32>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if factor.len() != r * c {
            return Err(Error::dim("mul_const", &[r, c], &[factor.len()]));
        }
        let out = self.value(x).iter().zip(&factor).map(|(a, b)| a * b).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(r, c, out, Op::MulConst(x, factor), ng))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.ng(&[x]);
        self.push(r, c, out, Op::Scale(x, s), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
        let ng = self.ng(&[x]);
        self.push(r, c, out, Op::Sigmoid(x), ng)
    }

    /// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| v * stable_sigmoid(v)).collect();
        let ng = self.ng(&[x]);
        self.push(r, c, out, Op::Silu(x), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let ng = self.ng(&[x]);
        self.push(r, c, out, Op::Gelu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        self.push(r, c, out, Op::SoftmaxRows(x), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma[1 x c]` and `beta[1 x c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gamma, beta] {
            let (pr, pc) = self.dims(p);
            if pr != 1 || pc != c {
                return Err(Error::dim("layer_norm", &[r, c], &[pr, pc]));
            }
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; r * c];
        let mut mean = vec![0.0; r];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            mean[i] = mu;
            rstd[i] = rs;
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            ng,
        ))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(len, c, out, Op::SliceRows(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(p) => self.dims(*p).1,
            None => return Err(Error::contract("concat_rows needs at least one part")),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (pr, pc) = self.dims(*p);
            if pc != c {
                return Err(Error::dim("concat_rows", &[rows, c], &[pr, pc]));
            }
            out.extend_from_slice(self.value(*p));
            rows += pr;
        }
        let ng = self.ng(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row lookup: output row `j` is `table[idx[j]]`. Serves both token
    /// embedding and slot-row extraction.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", &[r, c], &[bad]));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(table, idx.to_vec()), ng))
    }

    /// Copy of `base` with row `idx[j]` replaced by `rows[j]`. Indices must be
    /// distinct.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], rows: Var) -> Result<Var> {
        let (r, c) = self.dims(base);
        let (m, rc) = self.dims(rows);
        if rc != c || m != idx.len() {
            return Err(Error::dim("scatter_rows", &[r, c], &[m, rc]));
        }
        let mut seen = vec![false; r];
        for &i in idx {
            if i >= r || seen[i] {
                return Err(Error::contract(format!(
                    "scatter_rows index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        let mut out = self.value(base).to_vec();
        let src = self.value(rows);
        for (j, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&src[j * c..(j + 1) * c]);
        }
        let ng = self.ng(&[base, rows]);
        Ok(self.push(
            r,
            c,
            out,
            Op::ScatterRows {
                base,
                rows,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Forward identity; no gradient flows back through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).to_vec();
        self.push(r, c, out, Op::StopGradient, false)
    }

    /// Row-weighted interpolation `base + w * (cand - base)` with `w[n x 1]`.
    ///
    /// Rows with weight exactly zero or one are copied bitwise from `base`
    /// or `cand`.
    pub fn blend(&mut self, base: Var, cand: Var, weight: Var) -> Result<Var> {
        let (r, c) = self.same_shape("blend", base, cand)?;
        let (wr, wc) = self.dims(weight);
        if wr != r || wc != 1 {
            return Err(Error::dim("blend", &[r, c], &[wr, wc]));
        }
        let b = self.value(base);
        let cv = self.value(cand);
        let w = self.value(weight);
        let mut out = b.to_vec();
        for (i, &wi) in w.iter().enumerate() {
            let row = i * c..(i + 1) * c;
            if wi == 0.0 {
                continue;
            }
            if wi == 1.0 {
                out[row.clone()].copy_from_slice(&cv[row]);
                continue;
            }
            for j in row {
                out[j] = b[j] + wi * (cv[j] - b[j]);
            }
        }
        let ng = self.ng(&[base, cand, weight]);
        Ok(self.push(r, c, out, Op::Blend { base, cand, weight }, ng))
    }

    /// Multi-head causal self-attention over `q`, `k`, `v` (each `n x d`):
    /// position `i` attends to positions `j <= i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0f32; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qs[i * d + off..i * d + off + dh];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    let s = dot(qi, &ks[j * d + off..j * d + off + dh]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in &mut scores[..=i] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let prow = &mut probs[(h * n + i) * n..(h * n + i) * n + n];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let p = scores[j] / sum;
                    prow[j] = p;
                    for (o, &vv) in orow.iter_mut().zip(&vs[j * d + off..j * d + off + dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(n, d, out, Op::CausalAttention { q, k, v, heads, probs }, ng))
    }

    /// Mean negative log-likelihood of `targets[i]` under `softmax(logits[i])`
    /// over rows with a target; rows with `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::dim("cross_entropy", &[r, c], &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy over an empty target set"));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0f64;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(Error::Vocabulary(format!("target id {t} >= {c}")));
            }
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let lse = max as f64 + sum.ln();
            total += lse - row[t] as f64;
            for j in 0..c {
                probs[i * c + j] = (((row[j] - max) as f64).exp() / sum) as f32;
            }
        }
        let loss = (total / count as f64) as f32;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
                probs,
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let ng = self.ng(&[x]);
        self.push(1, 1, vec![s as f32], Op::SumAll(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.scalar(loss)?;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let live = |v: Var| self.node(v).needs_grad;
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.dims(*a);
                let s = c;
                if live(*a) {
                    let bt = transpose(self.value(*b), q, s);
                    let mut da = vec![0.0; p * q];
                    gemm_acc(g, &bt, &mut da, p, s, q);
                    add_into(&mut grads[a.0], &da);
                }
                if live(*b) {
                    let av = self.value(*a);
                    let mut db = vec![0.0; q * s];
                    for i in 0..p {
                        let grow = &g[i * s..(i + 1) * s];
                        for k in 0..q {
                            let aik = av[i * q + k];
                            for (d, &gv) in db[k * s..(k + 1) * s].iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if live(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if live(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if live(*b) {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    let d: Vec<f32> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if live(*b) {
                    let d: Vec<f32> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddRow(x, bias) => {
                if live(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if live(*bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::MulCol(x, col) => {
                let w = self.value(*col);
                if live(*x) {
                    let mut dx = g.to_vec();
                    for i in 0..r {
                        for v in &mut dx[i * c..(i + 1) * c] {
                            *v *= w[i];
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if live(*col) {
                    let xv = self.value(*x);
                    let dw: Vec<f32> = (0..r)
                        .map(|i| dot(&g[i * c..(i + 1) * c], &xv[i * c..(i + 1) * c]))
                        .collect();
                    add_into(&mut grads[col.0], &dw);
                }
            }
            Op::MulConst(x, factor) => {
                if live(*x) {
                    let d: Vec<f32> = g.iter().zip(factor).map(|(a, b)| a * b).collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Scale(x, s) => {
                if live(*x) {
                    let d: Vec<f32> = g.iter().map(|v| v * s).collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Sigmoid(x) => {
                if live(*x) {
                    let d: Vec<f32> = g.iter().zip(&node.value).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Silu(x) => {
                if live(*x) {
                    let d: Vec<f32> = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(gv, &xv)| {
                            let s = stable_sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::Gelu(x) => {
                if live(*x) {
                    let d: Vec<f32> = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::SoftmaxRows(x) => {
                if live(*x) {
                    let y = &node.value;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma);
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let (mu, rs) = (mean[i], rstd[i]);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        let xh = (xv[i * c + j] - mu) * rs;
                        let gv = g[i * c + j];
                        dg[j] += gv * xh;
                        db[j] += gv;
                        let dxh = gv * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let inv_c = 1.0 / c as f32;
                    for j in 0..c {
                        let xh = (xv[i * c + j] - mu) * rs;
                        let dxh = g[i * c + j] * gam[j];
                        dx[i * c + j] = rs * (dxh - inv_c * sum_dxh - xh * inv_c * sum_dxh_xh);
                    }
                }
                if live(*x) {
                    add_into(&mut grads[x.0], &dx);
                }
                if live(*gamma) {
                    add_into(&mut grads[gamma.0], &dg);
                }
                if live(*beta) {
                    add_into(&mut grads[beta.0], &db);
                }
            }
            Op::SliceRows(x, start) => {
                if live(*x) {
                    let (xr, _) = self.dims(*x);
                    let mut dx = vec![0.0; xr * c];
                    dx[start * c..(start + r) * c].copy_from_slice(g);
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, _) = self.dims(*p);
                    if live(*p) {
                        add_into(&mut grads[p.0], &g[off * c..(off + pr) * c]);
                    }
                    off += pr;
                }
            }
            Op::GatherRows(table, idx) => {
                if live(*table) {
                    let (tr, _) = self.dims(*table);
                    let mut dt = vec![0.0; tr * c];
                    for (j, &i) in idx.iter().enumerate() {
                        for (d, v) in dt[i * c..(i + 1) * c].iter_mut().zip(&g[j * c..(j + 1) * c]) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads[table.0], &dt);
                }
            }
            Op::ScatterRows { base, rows, idx } => {
                if live(*base) {
                    let mut db = g.to_vec();
                    for &i in idx {
                        db[i * c..(i + 1) * c].fill(0.0);
                    }
                    add_into(&mut grads[base.0], &db);
                }
                if live(*rows) {
                    let mut dr = Vec::with_capacity(idx.len() * c);
                    for &i in idx {
                        dr.extend_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    add_into(&mut grads[rows.0], &dr);
                }
            }
            Op::Blend { base, cand, weight } => {
                let w = self.value(*weight);
                if live(*base) {
                    let mut d = g.to_vec();
                    for i in 0..r {
                        for v in &mut d[i * c..(i + 1) * c] {
                            *v *= 1.0 - w[i];
                        }
                    }
                    add_into(&mut grads[base.0], &d);
                }
                if live(*cand) {
                    let mut d = g.to_vec();
                    for i in 0..r {
                        for v in &mut d[i * c..(i + 1) * c] {
                            *v *= w[i];
                        }
                    }
                    add_into(&mut grads[cand.0], &d);
                }
                if live(*weight) {
                    let bv = self.value(*base);
                    let cv = self.value(*cand);
                    let dw: Vec<f32> = (0..r)
                        .map(|i| (i * c..(i + 1) * c).map(|j| g[j] * (cv[j] - bv[j])).sum::<f32>())
                        .collect();
                    add_into(&mut grads[weight.0], &dw);
                }
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                let (n, d) = (r, c);
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qs, ks, vs) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0f32; n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let prow = &probs[(h * n + i) * n..(h * n + i) * n + n];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut sum_pd = 0.0;
                        for j in 0..=i {
                            dp[j] = dot(gi, &vs[j * d + off..j * d + off + dh]);
                            sum_pd += prow[j] * dp[j];
                            for (dvv, &gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                *dvv += prow[j] * gv;
                            }
                        }
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - sum_pd) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for t in 0..dh {
                                dq[i * d + off + t] += ds * ks[j * d + off + t];
                                dk[j * d + off + t] += ds * qs[i * d + off + t];
                            }
                        }
                    }
                }
                if live(*q) {
                    add_into(&mut grads[q.0], &dq);
                }
                if live(*k) {
                    add_into(&mut grads[k.0], &dk);
                }
                if live(*v) {
                    add_into(&mut grads[v.0], &dv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
                probs,
            } => {
                if live(*logits) {
                    let (lr, lc) = self.dims(*logits);
                    let scale = g[0] / *count as f32;
                    let mut dl = vec![0.0; lr * lc];
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..lc {
                            dl[i * lc + j] = probs[i * lc + j] * scale;
                        }
                        dl[i * lc + t] -= scale;
                    }
                    add_into(&mut grads[logits.0], &dl);
                }
            }
            Op::SumAll(x) => {
                if live(*x) {
                    let (xr, xc) = self.dims(*x);
                    add_into(&mut grads[x.0], &vec![g[0]; xr * xc]);
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape, rows: &[Vec<f32>]) -> Var {
        tape.leaf(&Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let m = mat(
            &mut tape,
            &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]],
        );
        let i = tape.leaf(&Tensor::identity(3)).unwrap();
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));

        let a = mat(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = mat(&mut tape, &[vec![0.0], vec![1.0]]);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.dims(out), (2, 1));
        assert_eq!(tape.value(out), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Dimension { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn sigmoid_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(1, 3, vec![0.0, 100.0, 1.0]).unwrap();
        let y = tape.sigmoid(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.5);
        assert!((v[1] as f64 - 1.0).abs() <= 1e-9);
        assert!((v[2] as f64 - 0.731_058_578_6).abs() < 1e-7);
    }

    #[test]
    fn stop_gradient_blocks_only_its_edge() {
        let mut tape = Tape::new();
        let x = tape.variable(2, 2, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), tape.value(x));
        let loss = tape.sum_all(s);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none_or(|g| g.iter().all(|v| *v == 0.0)));

        let sum = tape.add(x, s).unwrap();
        let loss = tape.sum_all(sum);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(2, 4, vec![3.0; 8]).unwrap();
        let y = tape.softmax_rows(x);
        assert!(tape.value(y).iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let x = tape
            .constant(2, 4, vec![1.0, 2.0, 3.0, 4.0, -7.0, 0.5, 2.0, 11.0])
            .unwrap();
        let g = tape.constant(1, 4, vec![1.0; 4]).unwrap();
        let b = tape.constant(1, 4, vec![0.0; 4]).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).chunks(4) {
            let mean = row.iter().sum::<f32>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut tape = Tape::new();
        let q = tape.constant(1, 4, vec![0.3, -2.0, 1.0, 0.1]).unwrap();
        let k = tape.constant(1, 4, vec![1.0, 1.0, -1.0, 0.0]).unwrap();
        let v = tape.constant(1, 4, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.causal_attention(q, k, v, 2).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn blend_zero_weight_rows_copy_base() {
        let mut tape = Tape::new();
        let base = tape.constant(2, 2, vec![-0.0, 1.0, 2.0, 3.0]).unwrap();
        let cand = tape.constant(2, 2, vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let w = tape.constant(2, 1, vec![0.0, 1.0]).unwrap();
        let out = tape.blend(base, cand, w).unwrap();
        let v = tape.value(out);
        assert_eq!(v[0].to_bits(), (-0.0f32).to_bits());
        assert_eq!(&v[2..], &[9.0, 9.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(2, 2, vec![1.0; 4]).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut tape = Tape::new();
        let x = tape
            .variable(3, 4, (0..12).map(|i| (i as f32 * 0.37).sin()).collect())
            .unwrap();
        let w = tape
            .variable(4, 4, (0..16).map(|i| (i as f32 * 0.11).cos()).collect())
            .unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let h = tape.softmax_rows(h);
        let loss = tape.cross_entropy(h, &[Some(1), None, Some(3)]).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for v in [x, w] {
            let a = g1.get(v).unwrap();
            let b = g2.get(v).unwrap();
            assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
