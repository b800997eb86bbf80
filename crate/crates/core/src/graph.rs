//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward pass records its operations on a fresh [`Graph`]. Leaves
//! borrow parameter tensors, so building a graph never copies weights.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! every trainable leaf; the graph is dropped afterwards.
//!
//! All values are viewed as row-major `rows × cols` matrices. A scalar is `1 × 1`.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape of a fused multi-head attention call.
///
/// Queries hold `batch` consecutive groups of rows, keys and values likewise;
/// each group attends only within itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    /// Query position `i` sees key positions `0..=i` only.
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRows {
        x: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Gelu {
        x: usize,
        /// tanh of the inner polynomial, kept for the backward pass
        tanh: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Sum {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of the trainable leaves of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` for leaves the loss does not depend on, or non-trainable ones.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + 0.044715 * x * x * x)).tanh()
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        vec![self.nodes[v.0].rows, self.nodes[v.0].cols]
    }

    /// Records a borrowed tensor; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), Op::Leaf, t.requires_grad())
    }

    /// Records an owned, non-trainable input.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "constant",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape_of(a),
                right: self.shape_of(b),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            0.0,
            MatMut::new(&mut out, m, n),
        );
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul { a: a.0, b: b.0 }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape {
                op: "add",
                left: self.shape_of(a),
                right: self.shape_of(b),
            });
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.dims(a);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// `y[i, :] = x[i, :] + b[i mod rows(b), :]`; a bias is the one-row case.
    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(b);
        if bc != c || r % br != 0 {
            return Err(Error::Shape {
                op: "add_rows",
                left: self.shape_of(x),
                right: self.shape_of(b),
            });
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let brow = &bv[(i % br) * c..(i % br + 1) * c];
            row.iter_mut().zip(brow).for_each(|(y, z)| *y += z);
        }
        let needs = self.needs(x.0) || self.needs(b.0);
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRows { x: x.0, b: b.0 }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape {
                op: "mul",
                left: self.shape_of(a),
                right: self.shape_of(b),
            });
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.dims(a);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let (r, cols) = self.dims(x);
        let needs = self.needs(x.0);
        self.push(Cow::Owned(out), r, cols, Op::Scale { x: x.0, c }, needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tanh: Vec<f64> = self.value(x).iter().map(|&v| gelu_tanh(v)).collect();
        let out: Vec<f64> = self.value(x).iter().zip(&tanh).map(|(v, t)| 0.5 * v * (1.0 + t)).collect();
        let (r, c) = self.dims(x);
        let needs = self.needs(x.0);
        self.push(Cow::Owned(out), r, c, Op::Gelu { x: x.0, tanh }, needs)
    }

    /// Per-row normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::Shape {
                op: "layer_norm",
                left: self.shape_of(x),
                right: self.shape_of(gain),
            });
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + bv[j];
            }
        }
        let needs = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        Ok(self.push(
            Cow::Owned(out),
            r,
            c,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        let needs = self.needs(x.0);
        self.push(Cow::Owned(out), r, c, Op::Softmax { x: x.0 }, needs)
    }

    /// Fused scaled dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = self.dims(q);
        let (kr, kd) = self.dims(k);
        if kd != d || self.dims(v) != (kr, kd) {
            return Err(Error::Shape {
                op: "attention",
                left: self.shape_of(q),
                right: self.shape_of(k),
            });
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Argument(format!("{d} channels do not split into {} heads", spec.heads)));
        }
        if spec.batch == 0 || qr % spec.batch != 0 || kr % spec.batch != 0 {
            return Err(Error::Argument(format!(
                "attention rows {qr}/{kr} do not split into {} groups",
                spec.batch
            )));
        }
        let tq = qr / spec.batch;
        let tk = kr / spec.batch;
        if spec.causal && tq != tk {
            return Err(Error::Argument(format!("causal attention needs square groups, got {tq}x{tk}")));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; spec.batch * spec.heads * tq * tk];
        let mut out = vec![0.0; qr * d];
        let qm = MatRef::new(self.value(q), qr, d);
        let km = MatRef::new(self.value(k), kr, d);
        let vm = MatRef::new(self.value(v), kr, d);
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let base = (b * spec.heads + h) * tq * tk;
                let p = &mut probs[base..base + tq * tk];
                gemm(
                    scale,
                    qm.block(b * tq, h * dh, tq, dh),
                    km.block(b * tk, h * dh, tk, dh).t(),
                    0.0,
                    MatMut::new(p, tq, tk),
                );
                for (i, row) in p.chunks_mut(tk).enumerate() {
                    if spec.causal {
                        softmax_in_place(&mut row[..=i]);
                        row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                    } else {
                        softmax_in_place(row);
                    }
                }
                gemm(
                    1.0,
                    MatRef::new(p, tq, tk),
                    vm.block(b * tk, h * dh, tk, dh),
                    0.0,
                    MatMut::new(&mut out, qr, d).block(b * tq, h * dh, tq, dh),
                );
            }
        }
        let needs = self.needs(q.0) || self.needs(k.0) || self.needs(v.0);
        Ok(self.push(
            Cow::Owned(out),
            qr,
            d,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                spec,
                probs,
            },
            needs,
        ))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Argument("gather_rows needs at least one id".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: id,
                    bound: r,
                });
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let needs = self.needs(table.0);
        Ok(self.push(
            Cow::Owned(out),
            ids.len(),
            c,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(x.0);
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum { x: x.0 }, needs)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target is `pad`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let (n, vocab) = self.dims(logits);
        if targets.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: self.shape_of(logits),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: bad,
                bound: vocab,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t == pad {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
            softmax_in_place(row);
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(logits.0);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape_of(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.needs(loss.0) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], p: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[p].needs_grad {
            return None;
        }
        let len = self.nodes[p].value.len();
        Some(grads[p].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = cols;
                let gm = MatRef::new(g, m, n);
                if let Some(da) = self.slot(grads, *a) {
                    let bm = MatRef::new(&self.nodes[*b].value, k, n);
                    gemm(1.0, gm, bm.t(), 1.0, MatMut::new(da, m, k));
                }
                if let Some(db) = self.slot(grads, *b) {
                    let am = MatRef::new(&self.nodes[*a].value, m, k);
                    gemm(1.0, am.t(), gm, 1.0, MatMut::new(db, k, n));
                }
            }
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    if let Some(d) = self.slot(grads, p) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRows { x, b } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let br = self.nodes[*b].rows;
                if let Some(db) = self.slot(grads, *b) {
                    for (r, grow) in g.chunks(cols).enumerate() {
                        let off = (r % br) * cols;
                        db[off..off + cols].iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = self.slot(grads, *a) {
                    let bv = &self.nodes[*b].value;
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let av = &self.nodes[*a].value;
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, y)| *d += c * y);
                }
            }
            Op::Gelu { x, tanh } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let xv = &self.nodes[*x].value;
                    for j in 0..g.len() {
                        dx[j] += g[j] * gelu_grad(xv[j], tanh[j]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = &self.nodes[*gain].value;
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..cols {
                            dh[j] = gr[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        let out = &mut dx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (j, (gg, h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % cols] += gg * h;
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (j, gg) in g.iter().enumerate() {
                        db[j % cols] += gg;
                    }
                }
            }
            Op::Softmax { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let y = &node.value;
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            dx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(g, *q, *k, *v, *spec, probs, grads);
            }
            Op::Gather { table, ids } => {
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        dt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.nodes[*logits].cols;
                let w = g[0] / *count as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let base = r * vocab;
                        for j in 0..vocab {
                            dl[base + j] += w * probs[base + j];
                        }
                        dl[base + t] -= w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: usize,
        k: usize,
        v: usize,
        spec: AttentionSpec,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qr, d) = (self.nodes[q].rows, self.nodes[q].cols);
        let kr = self.nodes[k].rows;
        let (tq, tk) = (qr / spec.batch, kr / spec.batch);
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk, nv) = (self.needs(q), self.needs(k), self.needs(v));
        let mut dq = if nq { vec![0.0; qr * d] } else { Vec::new() };
        let mut dk = if nk { vec![0.0; kr * d] } else { Vec::new() };
        let mut dv = if nv { vec![0.0; kr * d] } else { Vec::new() };
        let qm = MatRef::new(&self.nodes[q].value, qr, d);
        let km = MatRef::new(&self.nodes[k].value, kr, d);
        let vm = MatRef::new(&self.nodes[v].value, kr, d);
        let gm = MatRef::new(g, qr, d);
        let mut ds = vec![0.0; tq * tk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let base = (b * spec.heads + h) * tq * tk;
                let p = &probs[base..base + tq * tk];
                let pm = MatRef::new(p, tq, tk);
                let g_bh = gm.block(b * tq, h * dh, tq, dh);
                if nv {
                    gemm(1.0, pm.t(), g_bh, 1.0, MatMut::new(&mut dv, kr, d).block(b * tk, h * dh, tk, dh));
                }
                if !(nq || nk) {
                    continue;
                }
                gemm(1.0, g_bh, vm.block(b * tk, h * dh, tk, dh).t(), 0.0, MatMut::new(&mut ds, tq, tk));
                for r in 0..tq {
                    let s = r * tk..(r + 1) * tk;
                    let dot: f64 = ds[s.clone()].iter().zip(&p[s.clone()]).map(|(a, b)| a * b).sum();
                    for j in s {
                        ds[j] = p[j] * (ds[j] - dot);
                    }
                }
                let dsm = MatRef::new(&ds, tq, tk);
                if nq {
                    gemm(
                        scale,
                        dsm,
                        km.block(b * tk, h * dh, tk, dh),
                        1.0,
                        MatMut::new(&mut dq, qr, d).block(b * tq, h * dh, tq, dh),
                    );
                }
                if nk {
                    gemm(
                        scale,
                        dsm.t(),
                        qm.block(b * tq, h * dh, tq, dh),
                        1.0,
                        MatMut::new(&mut dk, kr, d).block(b * tk, h * dh, tk, dh),
                    );
                }
            }
        }
        for (p, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(grads, p) {
                slot.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Numerically stable `log(softmax(row))`.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap().requiring_grad()
    }

    #[test]
    fn identity_product_is_identity() {
        let i2 = t(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let a = g.leaf(&i2);
        let b = g.leaf(&i2);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_product() {
        let a = t(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(2, 1, vec![0.0, 1.0]);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.dims(c), (2, 1));
        assert_eq!(g.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t(2, 3, vec![0.0; 6]);
        let b = t(2, 3, vec![0.0; 6]);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let err = g.matmul(va, vb).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = t(1, 3, vec![0.3, -1.0, 2.0]);
        let mut g = Graph::new();
        let vx = g.leaf(&x);
        let s = g.sum(vx);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(vx).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input_and_accumulates_over_uses() {
        let x = t(1, 3, vec![0.3, -1.0, 2.0]);
        let mut g = Graph::new();
        let vx = g.leaf(&x);
        let sq = g.mul(vx, vx).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(vx).unwrap(), &[0.6, -2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(1, 3, vec![0.0; 3]);
        let mut g = Graph::new();
        let vx = g.leaf(&x);
        let y = g.scale(vx, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = t(1, 10, vec![0.0; 10]);
        let mut g = Graph::new();
        let v = g.leaf(&logits);
        let loss = g.softmax_cross_entropy(v, &[7], 0).unwrap();
        assert!((g.value(loss)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_target_gives_zero_loss() {
        let mut data = vec![0.0; 5];
        data[3] = 1e9;
        let logits = t(1, 5, data);
        let mut g = Graph::new();
        let v = g.leaf(&logits);
        let loss = g.softmax_cross_entropy(v, &[3], 0).unwrap();
        assert!(g.value(loss)[0].abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(v).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn out_of_vocab_target_is_index_error() {
        let logits = t(2, 3, vec![0.0; 6]);
        let mut g = Graph::new();
        let v = g.leaf(&logits);
        assert!(matches!(
            g.softmax_cross_entropy(v, &[1, 3], 0),
            Err(Error::Index { index: 3, bound: 3, .. })
        ));
    }

    #[test]
    fn pad_rows_contribute_no_gradient() {
        let logits = t(3, 4, (0..12).map(|i| (i as f64 * 0.7).cos()).collect());
        let mut g = Graph::new();
        let v = g.leaf(&logits);
        let loss = g.softmax_cross_entropy(v, &[2, 0, 3], 0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(v).unwrap()[4..8].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn causal_attention_hides_future_keys() {
        let q = t(3, 2, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let mut k2 = q.clone();
        let mut g = Graph::new();
        let vq = g.leaf(&q);
        let spec = AttentionSpec { heads: 1, batch: 1, causal: true };
        let o1 = g.attention(vq, vq, vq, spec).unwrap();
        let first = g.value(o1)[..2].to_vec();
        k2.data_mut()[4] = 9.0;
        let mut g2 = Graph::new();
        let vq2 = g2.leaf(&q);
        let vk2 = g2.leaf(&k2);
        let o2 = g2.attention(vq2, vk2, vk2, spec).unwrap();
        assert_eq!(&g2.value(o2)[..2], first.as_slice());
    }
}
