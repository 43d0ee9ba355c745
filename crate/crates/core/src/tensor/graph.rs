use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng as _;

use super::{gemm, gemm_strided, Mat, Tensor};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    idx: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

/// One entry of a sparse linear assembly: `out[dst] += coeff * inputs[input][src]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseTerm {
    pub input: usize,
    pub src: usize,
    pub dst: usize,
    pub coeff: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    Mean(Var),
    MseLoss(Var, Var),
    SumSquares(Var),
    CausalMask(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Sparse {
        inputs: Vec<Var>,
        terms: Vec<SparseTerm>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use tape. Build the forward pass with the op methods, then
/// call [`Graph::backward`] once on a scalar.
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    dropout: Option<Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            dropout: None,
        }
    }

    /// Training-mode graph drawing dropout masks from `(seed, stream)`.
    pub fn training(seed: u64, stream: u64) -> Self {
        Self {
            dropout: Some(stream_rng(seed, stream)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.idx as usize]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { graph: self.id, idx }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// Adds a row vector (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(row).len() != c {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let ta = self.value(a);
        let tr = self.value(row).data();
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for (x, b) in data[i * c..(i + 1) * c].iter_mut().zip(tr) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let g = self.any_grad(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), g))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let g = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), g)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), g)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut data = ta.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let g = self.any_grad(&[a]);
        self.push(out, Op::Softmax(a), g)
    }

    /// Layer normalisation over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", tx.shape(), self.shape(gamma)));
        }
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gm[j] + bt[j];
            }
        }
        let out = Tensor::new(tx.shape(), out).expect("same shape");
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(Error::shape("concat", self.shape(parts[0]), self.shape(*bad)));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            for i in 0..rows {
                data[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let out = Tensor::new(&[rows, total], data).expect("sized");
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if start + len > c {
            return Err(Error::shape("slice_cols", ta.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let out = Tensor::new(&[r, len], data).expect("sized");
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::SliceCols { a, start }, g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if start + len > r {
            return Err(Error::shape("slice_rows", ta.shape(), &[start, len]));
        }
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(&[len, c], data).expect("sized");
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::SliceRows { a, start }, g))
    }

    /// Gathers the listed rows (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if let Some(bad) = rows.iter().find(|i| **i >= r) {
            return Err(Error::shape("select_rows", ta.shape(), &[*bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(&[rows.len(), c], data).expect("sized");
        let g = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            g,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let g = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), g)
    }

    /// Mean of all elements (scalar).
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), g)
    }

    /// Mean squared difference over all elements (scalar).
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (a, b) = (self.value(pred), self.value(target));
        let n = a.len() as f64;
        let s = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>();
        let g = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::MseLoss(pred, target), g))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), g)
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if r != c {
            return Err(Error::shape("causal_mask", ta.shape(), &[r, r]));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for v in &mut data[i * c + i + 1..(i + 1) * c] {
                *v = f64::NEG_INFINITY;
            }
        }
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::CausalMask(a), g))
    }

    /// Fused causal multi-head attention over `batch` sequences of length
    /// `seq` stacked row-wise. `q`, `k`, `v` are `(batch*seq) x d`; each head
    /// uses `d / heads` consecutive columns and scores scaled by
    /// `1/sqrt(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.value(q).dims2();
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", self.shape(q), &[batch, seq, heads]));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            let base = b * seq * d;
            for h in 0..heads {
                let off = base + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    seq,
                    hd,
                    seq,
                    Mat::new(&tq.data()[off..], d, 1),
                    Mat::new(&tk.data()[off..], d, 1).t(),
                    p,
                    false,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    row[..=i].iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm_strided(
                    seq,
                    seq,
                    hd,
                    Mat::new(p, seq, 1),
                    Mat::new(&tv.data()[off..], d, 1),
                    &mut out[off..],
                    d,
                    false,
                );
            }
        }
        let out = Tensor::new(&[rows, d], out).expect("sized");
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            g,
        ))
    }

    /// Inverted dropout; the identity on evaluation graphs or for `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout.as_mut().filter(|_| rate > 0.0) else {
            return a;
        };
        let n = self.nodes[a.idx as usize].value.len();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let g = self.any_grad(&[a]);
        self.push(out, Op::Dropout { a, mask }, g)
    }

    /// Builds a tensor of `shape` as a sparse linear combination of entries
    /// of `inputs`.
    pub fn sparse_assemble(
        &mut self,
        inputs: &[Var],
        terms: Vec<SparseTerm>,
        shape: &[usize],
    ) -> Result<Var> {
        let mut out = Tensor::zeros(shape);
        for t in &terms {
            let src = self.value(inputs[t.input]);
            if t.src >= src.len() || t.dst >= out.len() {
                return Err(Error::shape("sparse_assemble", src.shape(), shape));
            }
            out.data_mut()[t.dst] += t.coeff * src.data()[t.src];
        }
        let g = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::Sparse {
                inputs: inputs.to_vec(),
                terms,
            },
            g,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id || loss.index() >= self.nodes.len() {
            return Err(Error::DetachedNode(loss.index()));
        }
        let lt = &self.nodes[loss.index()].value;
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(vec![1.0]);
        for i in (0..=loss.index()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.index()].needs_grad {
                return;
            }
            let len = self.nodes[v.index()].value.len();
            let g = grads[v.index()].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                acc(*a, &mut |g| {
                    gemm(m, n, k, Mat::new(gout, n, 1), Mat::new(tb.data(), n, 1).t(), g, true)
                });
                acc(*b, &mut |g| {
                    gemm(k, m, n, Mat::new(ta.data(), k, 1).t(), Mat::new(gout, n, 1), g, true)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |g| add_into(g, gout));
                let c = self.value(*row).len();
                acc(*row, &mut |g| {
                    for chunk in gout.chunks(c) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * tb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * ta[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                g.iter_mut().zip(gout).for_each(|(x, y)| *x += c * y)
            }),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for ((g, x), d) in g.iter_mut().zip(x).zip(gout) {
                        *g += if *x > 0.0 { *d } else { 0.0 };
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*a, &mut |g| {
                    for (r, (gy, yy)) in gout.chunks(c).zip(y.chunks(c)).enumerate() {
                        let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            g[r * c + j] += yy[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gm = self.value(*gamma).data();
                acc(*x, &mut |g| {
                    for (r, gy) in gout.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = gy[j] * gm[j];
                            m1 += d;
                            m2 += d * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let d = gy[j] * gm[j];
                            g[r * c + j] += rstd[r] * (d - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (gy, xh) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += gy[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for gy in gout.chunks(c) {
                        add_into(g, gy);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |g| {
                        for i in 0..rows {
                            add_into(
                                &mut g[i * w..(i + 1) * w],
                                &gout[i * total + off..i * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let c = self.value(*a).cols();
                let len = node.value.cols();
                acc(*a, &mut |g| {
                    for (i, gy) in gout.chunks(len).enumerate() {
                        add_into(&mut g[i * c + start..i * c + start + len], gy);
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let c = node.value.cols();
                acc(*a, &mut |g| {
                    add_into(&mut g[start * c..start * c + gout.len()], gout);
                });
            }
            Op::SelectRows { a, rows } => {
                let c = node.value.cols();
                acc(*a, &mut |g| {
                    for (k, &i) in rows.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &gout[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0] / n));
            }
            Op::MseLoss(p, t) => {
                let (tp, tt) = (self.value(*p).data(), self.value(*t).data());
                let k = 2.0 * gout[0] / tp.len() as f64;
                acc(*p, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += k * (tp[i] - tt[i]);
                    }
                });
                acc(*t, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= k * (tp[i] - tt[i]);
                    }
                });
            }
            Op::SumSquares(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * gout[0] * x[i];
                    }
                });
            }
            Op::CausalMask(a) => {
                let c = node.value.cols();
                acc(*a, &mut |g| {
                    for (i, gy) in gout.chunks(c).enumerate() {
                        add_into(&mut g[i * c..i * c + i + 1], &gy[..=i]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                (*batch, *seq, *heads),
                probs,
                gout,
                grads,
            ),
            Op::Dropout { a, mask } => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * mask[i];
                }
            }),
            Op::Sparse { inputs, terms } => {
                for (slot, var) in inputs.iter().enumerate() {
                    acc(*var, &mut |g| {
                        for t in terms.iter().filter(|t| t.input == slot) {
                            g[t.src] += t.coeff * gout[t.dst];
                        }
                    });
                }
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let n = batch * seq * d;
        let mut gq = vec![0.0; n];
        let mut gk = vec![0.0; n];
        let mut gv = vec![0.0; n];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            let base = b * seq * d;
            for h in 0..heads {
                let off = base + h * hd;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let dout = Mat::new(&gout[off..], d, 1);
                // dV = P^T dO
                gemm_strided(
                    seq,
                    seq,
                    hd,
                    Mat::new(p, seq, 1).t(),
                    dout,
                    &mut gv[off..],
                    d,
                    true,
                );
                // dP = dO V^T
                gemm(seq, hd, seq, dout, Mat::new(&tv.data()[off..], d, 1).t(), &mut dp, false);
                // dS = P * (dP - rowsum(dP * P)) * scale
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                    dr[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                // dQ = dS K, dK = dS^T Q
                gemm_strided(
                    seq,
                    seq,
                    hd,
                    Mat::new(&dp, seq, 1),
                    Mat::new(&tk.data()[off..], d, 1),
                    &mut gq[off..],
                    d,
                    true,
                );
                gemm_strided(
                    seq,
                    seq,
                    hd,
                    Mat::new(&dp, seq, 1).t(),
                    Mat::new(&tq.data()[off..], d, 1),
                    &mut gk[off..],
                    d,
                    true,
                );
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.index()].needs_grad {
                match &mut grads[var.index()] {
                    Some(existing) => add_into(existing, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.graph, self.graph, "variable from another graph");
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as an owned vector of length `len`, zero-filled when
    /// unreached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_gelu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let ge = g.gelu(x);
        assert_eq!(g.value(ge).data()[1], 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 8], 4.2));
        let gm = g.constant(Tensor::full(&[8], 1.0));
        let bt = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gm, bt).unwrap();
        assert!(g.value(y).max_abs() < 1e-12);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let mut other = Graph::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(g.backward(y), Err(Error::DetachedNode(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn eval_dropout_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[4, 4], 1.0));
        assert_eq!(g.dropout(a, 0.5), a);
        let mut t = Graph::training(1, 0);
        let a = t.constant(Tensor::full(&[100, 100], 1.0));
        let d = t.dropout(a, 0.1);
        let kept = t.value(d).data().iter().filter(|v| **v > 0.0).count();
        assert!((8500..9500).contains(&kept));
    }
}
