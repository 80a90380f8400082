//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] owns every intermediate value of one computation. Nodes are
//! appended in evaluation order and may only reference earlier nodes, so the
//! tape is acyclic by construction and a single reverse sweep visits every
//! node after all of its consumers.

use std::cell::RefCell;

use rand::Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sigmoid(Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    PadRowsTop(Var, usize),
    Sum(Var),
    Norm(Var),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 3] {
        match *self {
            Op::Leaf => [None, None, None],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => [Some(a), Some(b), None],
            Op::LayerNorm { x, gain, bias, .. } => [Some(x), Some(gain), Some(bias)],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Dropout(a, _)
            | Op::SliceRows(a, _)
            | Op::PadRowsTop(a, _)
            | Op::Sum(a)
            | Op::Norm(a) => [Some(a), None, None],
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(op.parents().iter().flatten().all(|p| p.0 < id));
        // Nodes that no gradient can reach keep no backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            rows,
            cols,
            data,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].rows, nodes[v.0].cols)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records a leaf; it requires gradients iff the tensor does.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_matrix(&self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.dims(v)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.data.clone()).expect("node shape")
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].data.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, p) = self.dims(b);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul ({n}x{k}) · ({k2}x{p})"
            )));
        }
        let mut out = vec![0.0; n * p];
        {
            let nodes = self.nodes.borrow();
            gemm_nn(&nodes[a.0].data, &nodes[b.0].data, &mut out, n, k, p);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(n, p, out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.0].data;
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
        self.push(c, r, out, Op::Transpose(a), self.rg(a))
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Vec<f64>)> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::ShapeMismatch(format!(
                "{what} ({ra}x{ca}) vs ({rb}x{cb})"
            )));
        }
        let nodes = self.nodes.borrow();
        let out = nodes[a.0]
            .data
            .iter()
            .zip(&nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((ra, ca, out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (r, c, out) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes.borrow()[a.0]
            .data
            .iter()
            .map(|x| x * factor)
            .collect();
        self.push(r, c, out, Op::Scale(a, factor), self.rg(a))
    }

    /// Adds a bias row to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(bias);
        if br * bc != c {
            return Err(Error::ShapeMismatch(format!(
                "bias of {} values for width {c}",
                br * bc
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let b = &nodes[bias.0].data;
            let mut out = nodes[a.0].data.clone();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
            }
            out
        };
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(r, c, out, Op::AddRow(a, bias), rg))
    }

    /// Row-wise softmax with max subtraction. With `causal`, entry (i, j) for
    /// j > i is excluded, which requires a square input.
    pub fn softmax_rows(&self, a: Var, causal: bool) -> Var {
        let (r, c) = self.dims(a);
        assert!(!causal || r == c, "causal softmax needs a square input");
        let mut out = self.nodes.borrow()[a.0].data.clone();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let live = if causal { i + 1 } else { c };
            let max = row[..live]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in &mut row[..live] {
                *v = (*v - max).exp();
                total += *v;
            }
            row[..live].iter_mut().for_each(|v| *v /= total);
            row[live..].iter_mut().for_each(|v| *v = 0.0);
        }
        self.push(r, c, out, Op::Softmax(a), self.rg(a))
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map with `gain` and `bias` (both of the row width).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            let (pr, pc) = self.dims(p);
            if pr * pc != c {
                return Err(Error::ShapeMismatch(format!(
                    "layer norm parameter of {} values for width {c}",
                    pr * pc
                )));
            }
        }
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let xs = &nodes[x.0].data;
            let g = &nodes[gain.0].data;
            let b = &nodes[bias.0].data;
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &xs[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[i] = inv;
                for j in 0..c {
                    let h = (row[j] - mean) * inv;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * g[j] + b[j];
                }
            }
            (out, xhat, inv_std)
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes.borrow()[a.0]
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.push(r, c, out, Op::Sigmoid(a), self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes.borrow()[a.0]
            .data
            .iter()
            .map(|&x| x.max(0.0))
            .collect();
        self.push(r, c, out, Op::Relu(a), self.rg(a))
    }

    /// Inverted dropout: survivors are scaled by 1/(1−p). Identity when not
    /// training or when `p` is zero.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, p: f64, training: bool, rng: &mut R) -> Var {
        assert!(
            (0.0..1.0).contains(&p),
            "dropout probability must be in [0, 1)"
        );
        if !training || p == 0.0 {
            return a;
        }
        let (r, c) = self.dims(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.nodes.borrow()[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        self.push(r, c, out, Op::Dropout(a, mask), self.rg(a))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(Error::ShapeMismatch(format!("concat rows {ra} vs {rb}")));
        }
        let c = ca + cb;
        let mut out = Vec::with_capacity(ra * c);
        {
            let nodes = self.nodes.borrow();
            for i in 0..ra {
                out.extend_from_slice(&nodes[a.0].data[i * ca..(i + 1) * ca]);
                out.extend_from_slice(&nodes[b.0].data[i * cb..(i + 1) * cb]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(ra, c, out, Op::ConcatCols(a, b), rg))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(Error::ShapeMismatch(format!(
                "rows {start}..{} of {r}",
                start + len
            )));
        }
        let out = self.nodes.borrow()[a.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows(a, start), self.rg(a)))
    }

    /// Prepends `n` rows of zeros.
    pub fn pad_rows_top(&self, a: Var, n: usize) -> Var {
        if n == 0 {
            return a;
        }
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; n * c];
        out.extend_from_slice(&self.nodes.borrow()[a.0].data);
        self.push(r + n, c, out, Op::PadRowsTop(a, n), self.rg(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0].data.iter().sum();
        self.push(1, 1, vec![total], Op::Sum(a), self.rg(a))
    }

    /// Frobenius norm. Its gradient at the origin is taken to be zero.
    pub fn norm(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0]
            .data
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        self.push(1, 1, vec![total], Op::Norm(a), self.rg(a))
    }

    /// Computes d`loss`/d(node) for every node that requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.rows * root.cols != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward from a non-scalar ({}x{})",
                root.rows, root.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            for p in node.op.parents().iter().flatten() {
                assert!(p.0 < id, "graph cycle at node {id}");
            }
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (n, k) = (nodes[a.0].rows, nodes[a.0].cols);
                    let p = c;
                    if nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, n * k);
                        gemm_nt(&dy, &nodes[b.0].data, g, n, p, k);
                    }
                    if nodes[b.0].requires_grad {
                        let g = slot(&mut grads, *b, k * p);
                        gemm_tn(&nodes[a.0].data, &dy, g, k, n, p);
                    }
                }
                Op::Transpose(a) => {
                    if nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, r * c);
                        // node is r×c, parent is c×r
                        for i in 0..r {
                            for j in 0..c {
                                g[j * r + i] += dy[i * c + j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if nodes[v.0].requires_grad {
                            axpy(slot(&mut grads, *v, r * c), 1.0, &dy);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[a.0].requires_grad {
                        axpy(slot(&mut grads, *a, r * c), 1.0, &dy);
                    }
                    if nodes[b.0].requires_grad {
                        axpy(slot(&mut grads, *b, r * c), -1.0, &dy);
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, r * c);
                        for ((gv, d), bv) in g.iter_mut().zip(&dy).zip(&nodes[b.0].data) {
                            *gv += d * bv;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let g = slot(&mut grads, *b, r * c);
                        for ((gv, d), av) in g.iter_mut().zip(&dy).zip(&nodes[a.0].data) {
                            *gv += d * av;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    if nodes[a.0].requires_grad {
                        axpy(slot(&mut grads, *a, r * c), *f, &dy);
                    }
                }
                Op::AddRow(a, bias) => {
                    if nodes[a.0].requires_grad {
                        axpy(slot(&mut grads, *a, r * c), 1.0, &dy);
                    }
                    if nodes[bias.0].requires_grad {
                        let g = slot(&mut grads, *bias, c);
                        for row in dy.chunks(c) {
                            axpy(g, 1.0, row);
                        }
                    }
                }
                Op::Softmax(a) => {
                    if nodes[a.0].requires_grad {
                        let y = &node.data;
                        let g = slot(&mut grads, *a, r * c);
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let dr = &dy[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                g[i * c + j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if nodes[x.0].requires_grad {
                        let gv = &nodes[gain.0].data;
                        let g = slot(&mut grads, *x, r * c);
                        let nf = c as f64;
                        for i in 0..r {
                            let dr = &dy[i * c..(i + 1) * c];
                            let hr = &xhat[i * c..(i + 1) * c];
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for j in 0..c {
                                let dh = dr[j] * gv[j];
                                sum_d += dh;
                                sum_dh += dh * hr[j];
                            }
                            for j in 0..c {
                                let dh = dr[j] * gv[j];
                                g[i * c + j] +=
                                    inv_std[i] / nf * (nf * dh - sum_d - hr[j] * sum_dh);
                            }
                        }
                    }
                    if nodes[gain.0].requires_grad {
                        let g = slot(&mut grads, *gain, c);
                        for (dr, hr) in dy.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                g[j] += dr[j] * hr[j];
                            }
                        }
                    }
                    if nodes[bias.0].requires_grad {
                        let g = slot(&mut grads, *bias, c);
                        for row in dy.chunks(c) {
                            axpy(g, 1.0, row);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, r * c);
                        for ((gv, d), y) in g.iter_mut().zip(&dy).zip(&node.data) {
                            *gv += d * y * (1.0 - y);
                        }
                    }
                }
                Op::Relu(a) => {
                    if nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, r * c);
                        for ((gv, d), x) in g.iter_mut().zip(&dy).zip(&nodes[a.0].data) {
                            if *x > 0.0 {
                                *gv += d;
                            }
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    if nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, r * c);
                        for ((gv, d), m) in g.iter_mut().zip(&dy).zip(mask) {
                            *gv += d * m;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a.0].cols;
                    let cb = c - ca;
                    if nodes[a.0].requires_grad {
                        let g = slot(&mut grads, *a, r * ca);
                        for i in 0..r {
                            axpy(&mut g[i * ca..(i + 1) * ca], 1.0, &dy[i * c..i * c + ca]);
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let g = slot(&mut grads, *b, r * cb);
                        for i in 0..r {
                            axpy(
                                &mut g[i * cb..(i + 1) * cb],
                                1.0,
                                &dy[i * c + ca..(i + 1) * c],
                            );
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    if nodes[a.0].requires_grad {
                        let size = nodes[a.0].rows * c;
                        let g = slot(&mut grads, *a, size);
                        axpy(&mut g[start * c..(start + r) * c], 1.0, &dy);
                    }
                }
                Op::PadRowsTop(a, n) => {
                    if nodes[a.0].requires_grad {
                        let size = (r - n) * c;
                        let g = slot(&mut grads, *a, size);
                        axpy(g, 1.0, &dy[n * c..]);
                    }
                }
                Op::Sum(a) => {
                    if nodes[a.0].requires_grad {
                        let size = nodes[a.0].data.len();
                        slot(&mut grads, *a, size)
                            .iter_mut()
                            .for_each(|g| *g += dy[0]);
                    }
                }
                Op::Norm(a) => {
                    let norm = node.data[0];
                    if nodes[a.0].requires_grad && norm > 0.0 {
                        let size = nodes[a.0].data.len();
                        let g = slot(&mut grads, *a, size);
                        axpy(g, dy[0] / norm, &nodes[a.0].data);
                    }
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, size: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; size])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}
