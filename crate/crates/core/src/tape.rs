//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value; `backward` walks the
//! nodes in exact reverse order of recording. Nodes whose inputs all lack
//! `requires_grad` are recorded as constants and skipped on the way back, so
//! a frozen backbone costs only its forward pass.

use crate::error::{MoclError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddN(Vec<Var>),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    MeanRows(Var),
    Sum(Var),
    Cosine(Var, Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Errors if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(idx) => Err(MoclError::NumericalInstability(format!(
                "non-finite value produced at tape node {idx}"
            ))),
        }
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        assert!(
            t.shape().len() <= 2,
            "expected matrix, got shape {:?}",
            t.shape()
        );
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.mat_dims(a);
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg)
    }

    fn same_shape(&self, a: Var, b: Var) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "elementwise shape mismatch"
        );
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        self.same_shape(a, b);
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a[i, j] + b[j]` for a matrix `a` and a row vector `b`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.mat_dims(a);
        assert_eq!(self.value(b).len(), n, "add_row width");
        let rb = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(rb).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, b), rg)
    }

    /// `a[i, j] * g[j]`.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Var {
        let (m, n) = self.mat_dims(a);
        assert_eq!(self.value(g).len(), n, "mul_row width");
        let rg_ = self.value(g).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(rg_).map(|(x, y)| x * y))
            .collect();
        let rg = self.rg(&[a, g]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MulRow(a, g), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the value of the one-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a, s]);
        self.push(out, Op::ScaleBy(a, s), rg)
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let shape = self.value(vars[0]).shape().to_vec();
        let mut out = self.value(vars[0]).to_vec();
        for &v in &vars[1..] {
            assert_eq!(self.value(v).shape(), &shape[..], "add_n shape mismatch");
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        let rg = self.rg(vars);
        self.push(Tensor::from_parts(shape, out), Op::AddN(vars.to_vec()), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.mat_dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.mat_dims(x);
        let mut out = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNormRows { x, inv_std },
            rg,
        )
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, n) = self.mat_dims(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < rows, "gather id {id} >= {rows}");
            out.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::from_parts(vec![ids.len(), n], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let n = self.mat_dims(vars[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &v in vars {
            let (r, c) = self.mat_dims(v);
            assert_eq!(c, n, "concat_rows width");
            m += r;
            out.extend_from_slice(self.value(v).data());
        }
        let rg = self.rg(vars);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows(vars.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let m = self.mat_dims(vars[0]).0;
        let widths: Vec<usize> = vars
            .iter()
            .map(|&v| {
                let (r, c) = self.mat_dims(v);
                assert_eq!(r, m, "concat_cols height");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&v, &w) in vars.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(vars);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(vars.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.mat_dims(x);
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start, len },
            rg,
        )
    }

    /// Column means, as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.mat_dims(a);
        assert!(m > 0);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Cosine similarity of two equally sized tensors viewed as flat vectors.
    ///
    /// Both-zero inputs are rejected; a single zero vector yields 0 with the
    /// zero side receiving no gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = crate::numeric::cosine_similarity(self.value(a).data(), self.value(b).data())?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), rg))
    }

    /// `logsumexp(logits) - logits[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let l = self.value(logits).data();
        if label >= l.len() {
            return Err(MoclError::Index {
                what: "logits",
                index: label,
                size: l.len(),
            });
        }
        let loss = crate::numeric::cross_entropy(l, label)?;
        let mut probs = l.to_vec();
        softmax_in_place(&mut probs);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .reshape(shape)
            .expect("reshape preserves element count");
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Gradients of the one-element node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            // Keep leaf gradients around for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        // Interior nodes were consumed above; only leaves remain populated.
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.mat_dims(*a);
                let n = self.mat_dims(*b).1;
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, &mut |ga| {
                    // dA[i,p] += sum_j g[i,j] * B[p,j]
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(gi, bp);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB[p,j] += sum_i A[i,p] * g[i,j]
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = va[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (r, x) in row.iter_mut().zip(gi) {
                                *r += a_ip * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.mat_dims(*a);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = self.mat_dims(*a).1;
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        axpy(gb, 1.0, row);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let n = self.mat_dims(*a).1;
                let va = self.value(*a).data();
                let vr = self.value(*r).data();
                acc(*a, &mut |ga| {
                    for (grow, orow) in g.chunks(n).zip(ga.chunks_mut(n)) {
                        for ((o, x), y) in orow.iter_mut().zip(grow).zip(vr) {
                            *o += x * y;
                        }
                    }
                });
                acc(*r, &mut |gr| {
                    for (grow, arow) in g.chunks(n).zip(va.chunks(n)) {
                        for ((o, x), y) in gr.iter_mut().zip(grow).zip(arow) {
                            *o += x * y;
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| axpy(ga, *c, g)),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                let va = self.value(*a).data();
                acc(*a, &mut |ga| axpy(ga, c, g));
                acc(*s, &mut |gs| gs[0] += dot(g, va));
            }
            Op::AddN(vars) => {
                for v in vars {
                    acc(*v, &mut |gv| axpy(gv, 1.0, g));
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, &x), gy) in ga.iter_mut().zip(va).zip(g) {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        *o += gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = self.mat_dims(*a).1;
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((yr, gr), orow) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(yr, gr);
                        for ((o, yi), gi) in orow.iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - s);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = self.mat_dims(*x).1;
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for (((yr, gr), orow), inv) in y
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = dot(gr, yr) / n as f64;
                        for ((o, yi), gi) in orow.iter_mut().zip(yr).zip(gr) {
                            *o += inv * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let n = self.mat_dims(*table).1;
                acc(*table, &mut |gt| {
                    for (row, &id) in g.chunks(n).zip(ids) {
                        axpy(&mut gt[id * n..(id + 1) * n], 1.0, row);
                    }
                });
            }
            Op::ConcatRows(vars) => {
                let mut offset = 0;
                for v in vars {
                    let len = self.value(*v).len();
                    acc(*v, &mut |gv| axpy(gv, 1.0, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(vars) => {
                let m = self.mat_dims(vars[0]).0;
                let total: usize = node.value.cols();
                let mut col = 0;
                for v in vars {
                    let w = self.mat_dims(*v).1;
                    acc(*v, &mut |gv| {
                        for i in 0..m {
                            axpy(
                                &mut gv[i * w..(i + 1) * w],
                                1.0,
                                &g[i * total + col..i * total + col + w],
                            );
                        }
                    });
                    col += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = self.mat_dims(*x);
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        axpy(
                            &mut gx[i * n + start..i * n + start + len],
                            1.0,
                            &g[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::MeanRows(a) => {
                let (m, n) = self.mat_dims(*a);
                acc(*a, &mut |ga| {
                    for row in ga.chunks_mut(n) {
                        axpy(row, 1.0 / m as f64, g);
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Cosine(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let c = node.value.item();
                let na = dot(va, va).sqrt();
                let nb = dot(vb, vb).sqrt();
                let s = g[0];
                if na > 0.0 && nb > 0.0 {
                    acc(*a, &mut |ga| {
                        for ((o, x), y) in ga.iter_mut().zip(va).zip(vb) {
                            *o += s * (y / (na * nb) - c * x / (na * na));
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((o, x), y) in gb.iter_mut().zip(vb).zip(va) {
                            *o += s * (y / (na * nb) - c * x / (nb * nb));
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let s = g[0];
                acc(*logits, &mut |gl| {
                    for (i, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let target = if i == *label { 1.0 } else { 0.0 };
                        *o += s * (p - target);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| axpy(ga, 1.0, g)),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` shaped like its value; zeros when unused.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_zero(&self, v: Var) -> bool {
        self.get(v).is_none_or(|g| g.iter().all(|&x| x == 0.0))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, x) in orow.iter_mut().zip(brow) {
                *o += a_ip * x;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
