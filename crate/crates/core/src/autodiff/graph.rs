//! Tape-based reverse-mode differentiation over dense row-major tensors.
//!
//! Every operation appends a node to the tape, so node order is a valid
//! topological order and backward is a single reverse sweep. Tensors are
//! lightweight handles into the tape; values are immutable once written.
//!
//! Most operations treat the last extent as the channel axis and all leading
//! extents as rows, which is how per-point shared MLPs are evaluated.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row ranges that `group_max` pools over. An empty range pools to zeros.
pub type RowRanges = [std::ops::Range<usize>];

const NO_ROW: usize = usize::MAX;

enum Op {
    Leaf,
    Linear {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
    },
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    /// `x + c` for a constant vector; the gradient passes straight through.
    Shift(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Clamp {
        x: Tensor,
        lo: f64,
        hi: f64,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GatherRows {
        x: Tensor,
        idx: Vec<usize>,
    },
    InterpRows {
        x: Tensor,
        idx: Vec<[usize; 3]>,
        weights: Vec<[f64; 3]>,
    },
    GroupMax {
        x: Tensor,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Tensor>),
    SliceCols {
        x: Tensor,
        start: usize,
    },
    Reshape(Tensor),
    SmoothL1 {
        x: Tensor,
        target: Vec<f64>,
        beta: f64,
    },
    SoftmaxCe {
        logits: Tensor,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SumCols(Tensor),
    WeightedSum {
        x: Tensor,
        weights: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Tensor>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&c, rest)) => (rest.iter().product(), c),
    }
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

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value[0]
    }

    /// (rows, channels) view of a tensor.
    pub fn dims(&self, t: Tensor) -> (usize, usize) {
        rows_cols(&self.nodes[t.0].shape)
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    fn check_len(shape: &[usize], len: usize) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != len {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {len}"
            )));
        }
        Ok(())
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Tensor> {
        Self::check_len(shape, value.len())?;
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false))
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn variable(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Tensor> {
        Self::check_len(shape, value.len())?;
        Ok(self.push(shape.to_vec(), value, Op::Leaf, true))
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        if let Some(&t) = self.params.get(&id) {
            return t;
        }
        let entry = store.entry(id);
        let t = self.push(
            entry.shape.clone(),
            entry.values.clone(),
            Op::Leaf,
            entry.trainable,
        );
        self.params.insert(id, t);
        t
    }

    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Tensor)> + '_ {
        self.params.iter().map(|(&p, &t)| (p, t))
    }

    /// `y = x W (+ b)` with `x: [.., Cin]`, `W: [Cin, Cout]`, `b: [Cout]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let (rows, cin) = self.dims(x);
        let wshape = self.shape(w);
        if wshape.len() != 2 || wshape[0] != cin {
            return Err(Error::Dimension(format!(
                "linear: input has {cin} channels, weight shape {wshape:?}"
            )));
        }
        let cout = wshape[1];
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != cout {
                return Err(Error::Dimension(format!(
                    "linear: bias has {} entries, expected {cout}",
                    bv.len()
                )));
            }
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            cin,
            cout,
            self.value(x),
            (cin as isize, 1),
            self.value(w),
            (cout as isize, 1),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = self.shape(x).to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        *shape.last_mut().unwrap() = cout;
        let parents: Vec<Tensor> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let rg = self.rg(&parents);
        Ok(self.push(shape, out, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, a: Tensor, b: Tensor, name: &str) -> Result<Vec<usize>> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.binary(a, b, "add")?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.binary(a, b, "sub")?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let shape = self.binary(a, b, "mul")?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let v = self.value(x).iter().map(|&a| a * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Scale(x, c), rg)
    }

    pub fn shift(&mut self, x: Tensor, c: &[f64]) -> Result<Tensor> {
        if c.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "shift: {} offsets for shape {:?}",
                c.len(),
                self.shape(x)
            )));
        }
        let v = zip(self.value(x), c, |a, b| a + b);
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), v, Op::Shift(x), rg))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).iter().map(|&a| a.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).iter().map(|&a| a.exp()).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Exp(x), rg)
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Tensor, lo: f64, hi: f64) -> Tensor {
        let v = self.value(x).iter().map(|&a| a.clamp(lo, hi)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Clamp { x, lo, hi }, rg)
    }

    /// Per-channel normalization. With `stats = None` the batch statistics over
    /// all rows are used and returned; otherwise the given (mean, var) are applied.
    pub fn batch_norm(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        let (rows, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension(format!(
                "batch_norm: {c} channels but affine params of length {} / {}",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        let xv = self.value(x);
        let (mean, var, batch) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                if rows > 0 {
                    for r in 0..rows {
                        for (m, &a) in mean.iter_mut().zip(&xv[r * c..(r + 1) * c]) {
                            *m += a;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= rows as f64);
                    for r in 0..rows {
                        for j in 0..c {
                            let d = xv[r * c + j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= rows as f64);
                }
                let bs = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: rows,
                };
                (mean, var, Some(bs))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for j in 0..c {
                let h = (xv[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = batch.is_some();
        let t = self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((t, batch))
    }

    /// Row `r` of the output is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("gather row {i} of {rows}")));
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted sum of three rows per output row (inverse-distance interpolation).
    pub fn interp_rows(
        &mut self,
        x: Tensor,
        idx: &[[usize; 3]],
        weights: &[[f64; 3]],
    ) -> Result<Tensor> {
        if idx.len() != weights.len() {
            return Err(Error::Dimension("interp_rows: index/weight count".into()));
        }
        let (rows, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; idx.len() * c];
        for (r, (ix, wt)) in idx.iter().zip(weights).enumerate() {
            let o = &mut out[r * c..(r + 1) * c];
            for (&i, &w) in ix.iter().zip(wt) {
                if i >= rows {
                    return Err(Error::Index(format!("interp row {i} of {rows}")));
                }
                for (a, &v) in o.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                    *a += w * v;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            Op::InterpRows {
                x,
                idx: idx.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Channelwise max over each row range; empty ranges yield zeros.
    pub fn group_max(&mut self, x: Tensor, groups: &RowRanges) -> Result<Tensor> {
        let (rows, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![0.0; groups.len() * c];
        let mut argmax = vec![NO_ROW; groups.len() * c];
        for (g, range) in groups.iter().enumerate() {
            if range.end > rows {
                return Err(Error::Index(format!(
                    "group {g} spans rows {range:?} of {rows}"
                )));
            }
            if range.is_empty() {
                continue;
            }
            for j in 0..c {
                let mut best = range.start;
                let mut bv = xv[best * c + j];
                for r in range.clone().skip(1) {
                    let v = xv[r * c + j];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out[g * c + j] = bv;
                argmax[g * c + j] = best;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![groups.len(), c], out, Op::GroupMax { x, argmax }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let rows = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(Error::Argument("concat of zero tensors".into())),
        };
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat: row counts {rows} and {r}"
                )));
            }
            width += c;
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.dims(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, width], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (rows, c) = self.dims(x);
        if start > end || end > c {
            return Err(Error::Index(format!("columns {start}..{end} of {c}")));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * c + start..r * c + end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows, w], out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        Self::check_len(shape, self.value(x).len())?;
        let v = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    /// Elementwise smooth-L1 of `x - target`.
    pub fn smooth_l1(&mut self, x: Tensor, target: &[f64], beta: f64) -> Result<Tensor> {
        if target.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "smooth_l1: {} targets for shape {:?}",
                target.len(),
                self.shape(x)
            )));
        }
        let v = zip(self.value(x), target, |a, t| smooth_l1_value(a - t, beta));
        let rg = self.rg(&[x]);
        Ok(self.push(
            self.shape(x).to_vec(),
            v,
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
                beta,
            },
            rg,
        ))
    }

    /// Per-row `-log softmax(logits)[label]`, shape `[rows]`.
    pub fn softmax_cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let (rows, c) = self.dims(logits);
        if labels.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for {rows} rows",
                labels.len()
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; rows * c];
        let mut out = Vec::with_capacity(rows);
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index(format!("label {label} with {c} classes")));
            }
            let row = &lv[r * c..(r + 1) * c];
            let (p, lse) = softmax_row(row);
            out.push(lse - row[label]);
            probs[r * c..(r + 1) * c].copy_from_slice(&p);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![rows],
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row sums, shape `[rows]`.
    pub fn sum_cols(&mut self, x: Tensor) -> Tensor {
        let (rows, c) = self.dims(x);
        let xv = self.value(x);
        let v = (0..rows)
            .map(|r| xv[r * c..(r + 1) * c].iter().sum())
            .collect();
        let rg = self.rg(&[x]);
        self.push(vec![rows], v, Op::SumCols(x), rg)
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let n = self.value(x).len();
        self.weighted_sum(x, &vec![1.0; n])
            .expect("matching length")
    }

    /// Scalar `Σ w_k x_k`.
    pub fn weighted_sum(&mut self, x: Tensor, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "weighted_sum: {} weights for shape {:?}",
                weights.len(),
                self.shape(x)
            )));
        }
        let s = self.value(x).iter().zip(weights).map(|(a, w)| a * w).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![1],
            vec![s],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Tensor) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visits = vec![0u32; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(dy);
                continue;
            }
            visits[id] += 1;
            self.backprop_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads, visits })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |t: Tensor, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[t.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[t.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, cin) = self.dims(*x);
                let cout = node.shape.last().copied().unwrap_or(1);
                let xv = self.value(*x);
                let wv = self.value(*w);
                acc(*x, &mut |g| {
                    // dx = dy W^T
                    gemm(
                        rows,
                        cout,
                        cin,
                        dy,
                        (cout as isize, 1),
                        wv,
                        (1, cout as isize),
                        g,
                        1.0,
                    );
                });
                acc(*w, &mut |g| {
                    // dW = x^T dy
                    gemm(
                        cin,
                        rows,
                        cout,
                        xv,
                        (1, cin as isize),
                        dy,
                        (cout as isize, 1),
                        g,
                        1.0,
                    );
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for r in 0..rows {
                            for (a, &d) in g.iter_mut().zip(&dy[r * cout..(r + 1) * cout]) {
                                *a += d;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(a, d)| *a -= d));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, &mut |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *x += d * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *x += d * o;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                g.iter_mut().zip(dy).for_each(|(a, d)| *a += c * d)
            }),
            Op::Shift(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, dy)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |g| {
                    for ((a, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > 0.0 {
                            *a += d;
                        }
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |g| {
                for ((a, &d), &y) in g.iter_mut().zip(dy).zip(&node.value) {
                    *a += d * y;
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                acc(*x, &mut |g| {
                    for ((a, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > *lo && v < *hi {
                            *a += d;
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (rows, c) = self.dims(*x);
                let gv = self.value(*gamma);
                acc(*gamma, &mut |g| {
                    for r in 0..rows {
                        for j in 0..c {
                            g[j] += dy[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for r in 0..rows {
                        for j in 0..c {
                            g[j] += dy[r * c + j];
                        }
                    }
                });
                acc(*x, &mut |g| {
                    if !*batch_stats {
                        for r in 0..rows {
                            for j in 0..c {
                                g[r * c + j] += dy[r * c + j] * gv[j] * inv_std[j];
                            }
                        }
                        return;
                    }
                    let n = rows as f64;
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dh = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            let d = dy[r * c + j] * gv[j];
                            sum_d[j] += d;
                            sum_dh[j] += d * xhat[r * c + j];
                        }
                    }
                    for r in 0..rows {
                        for j in 0..c {
                            let d = dy[r * c + j] * gv[j];
                            g[r * c + j] +=
                                inv_std[j] / n * (n * d - sum_d[j] - xhat[r * c + j] * sum_dh[j]);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let (_, c) = self.dims(*x);
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &dy[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::InterpRows { x, idx, weights } => {
                let (_, c) = self.dims(*x);
                acc(*x, &mut |g| {
                    for (r, (ix, wt)) in idx.iter().zip(weights).enumerate() {
                        for (&i, &w) in ix.iter().zip(wt) {
                            for (a, &d) in g[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&dy[r * c..(r + 1) * c])
                            {
                                *a += w * d;
                            }
                        }
                    }
                });
            }
            Op::GroupMax { x, argmax } => {
                let (_, c) = self.dims(*x);
                acc(*x, &mut |g| {
                    for (k, &row) in argmax.iter().enumerate() {
                        if row != NO_ROW {
                            g[row * c + k % c] += dy[k];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let width = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.dims(p);
                    acc(p, &mut |g| {
                        for r in 0..rows {
                            add_into(
                                &mut g[r * c..(r + 1) * c],
                                &dy[r * width + off..r * width + off + c],
                            );
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, c) = self.dims(*x);
                let w = node.shape[1];
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        add_into(
                            &mut g[r * c + start..r * c + start + w],
                            &dy[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::SmoothL1 { x, target, beta } => {
                let xv = self.value(*x);
                acc(*x, &mut |g| {
                    for (((a, &d), &v), &t) in g.iter_mut().zip(dy).zip(xv).zip(target) {
                        *a += d * smooth_l1_grad(v - t, *beta);
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let (_, c) = self.dims(*logits);
                acc(*logits, &mut |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == label { 1.0 } else { 0.0 };
                            g[r * c + j] += dy[r] * (probs[r * c + j] - ind);
                        }
                    }
                });
            }
            Op::SumCols(x) => {
                let (rows, c) = self.dims(*x);
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        g[r * c..(r + 1) * c].iter_mut().for_each(|a| *a += dy[r]);
                    }
                });
            }
            Op::WeightedSum { x, weights } => acc(*x, &mut |g| {
                for (a, &w) in g.iter_mut().zip(weights) {
                    *a += dy[0] * w;
                }
            }),
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visits: Vec<u32>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    /// How many times each node was processed during the sweep.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }

    /// Gradients of every trainable parameter leaf on the graph.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = graph
            .param_nodes()
            .filter(|(_, t)| graph.requires_grad(*t))
            .map(|(p, t)| {
                let g = self
                    .get(t)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; graph.value(t).len()]);
                (p, g)
            })
            .collect();
        out.sort_by_key(|(p, _)| p.index());
        out
    }
}

pub fn smooth_l1_value(e: f64, beta: f64) -> f64 {
    let a = e.abs();
    if a < beta {
        0.5 * e * e / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

/// Softmax probabilities and log-sum-exp of one row.
pub fn softmax_row(row: &[f64]) -> (Vec<f64>, f64) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), m + s.ln())
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// `C = A B + beta C` with A `m×k`, B `k×n`, C `m×n` row-major; strides are (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths cover every index reachable from the given
    // dimensions and strides; all callers pass dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_row_pick() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let x = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = g.constant(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = g.constant(&[2], vec![1.0, 1.0]).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn linear_rejects_bad_inner_dim() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 3], vec![0.0; 3]).unwrap();
        let w = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(g.linear(x, w, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_linear_weight_grad_is_column_input_sum() {
        let mut g = Graph::new();
        let xv: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(&[3, 4], xv.clone()).unwrap();
        let w = g.variable(&[4, 2], vec![0.1; 8]).unwrap();
        let y = g.linear(x, w, None).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let gw = grads.get(w).unwrap();
        for i in 0..4 {
            let col: f64 = (0..3).map(|r| xv[r * 4 + i]).sum();
            assert!((gw[i * 2] - col).abs() < 1e-12);
            assert!((gw[i * 2 + 1] - col).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1_value(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1_value(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1_value(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1_value(-2.0, 1.0), 1.5);
    }

    #[test]
    fn smooth_l1_derivative_continuous_at_beta() {
        let beta = 1.0;
        let h = 1e-7;
        let left = smooth_l1_grad(beta - h, beta);
        let right = smooth_l1_grad(beta + h, beta);
        assert!((left - right).abs() < 1e-6);
        assert!((smooth_l1_value(beta - 1e-12, beta) - smooth_l1_value(beta, beta)).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let l = g.constant(&[1, 4], vec![0.3; 4]).unwrap();
        let ce = g.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-12);

        let l = g.constant(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(g.scalar(ce).abs() < 1e-12);

        let l = g.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let ce = g.softmax_cross_entropy(l, &[2]).unwrap();
        // -ln(e^3 / (e + e^2 + e^3))
        let direct = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((g.scalar(ce) - direct).abs() < 1e-12);
        assert!((g.scalar(ce) - 0.4076).abs() < 1e-4);

        assert!(matches!(
            g.softmax_cross_entropy(l, &[3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one() {
        let (p, _) = softmax_row(&[3.0, -1.0, 200.0, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_max_empty_group_is_zero() {
        let mut g = Graph::new();
        let x = g
            .variable(&[3, 2], vec![1.0, -2.0, 0.5, 4.0, -1.0, -1.0])
            .unwrap();
        let y = g.group_max(x, &[0..2, 2..2, 2..3]).unwrap();
        assert_eq!(g.value(y), &[1.0, 4.0, 0.0, 0.0, -1.0, -1.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let a = g.variable(&[2, 2], vec![0.5, -0.3, 0.2, 0.9]).unwrap();
        let b = g.relu(a);
        let c = g.add(a, b).unwrap();
        let d = g.mul(c, b).unwrap();
        let e = g.exp(d);
        let f = g.concat_cols(&[e, c]).unwrap();
        let s = g.sum(f);
        let grads = g.backward(s).unwrap();
        assert!(grads.visit_counts().iter().all(|&v| v == 1));
        assert_eq!(grads.visit_counts().len(), g.len());
    }
}
