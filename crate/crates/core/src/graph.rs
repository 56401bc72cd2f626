//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Graph`] owns every intermediate value of one differentiable
//! computation. Operations execute immediately and append a record; the
//! backward pass replays the records in exact reverse order, accumulating
//! gradients additively. One graph is confined to a single logical thread;
//! the kernels inside an op may use rayon but always produce bit-identical
//! results regardless of scheduling (see `linalg`).

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{numel, Tensor};
use rayon::prelude::*;

/// Identity of a value within one computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Guard used wherever a norm or square root would otherwise divide by zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Classification targets for the fused softmax cross-entropy.
#[derive(Debug, Clone)]
pub enum Targets {
    /// One class index per batch row.
    Hard(Vec<usize>),
    /// One probability row per batch row, flattened row-major.
    Soft(Vec<f64>),
}

impl Targets {
    pub fn one_hot(indices: &[usize], classes: usize) -> Targets {
        let mut rows = vec![0.0; indices.len() * classes];
        for (i, &c) in indices.iter().enumerate() {
            rows[i * classes + c] = 1.0;
        }
        Targets::Soft(rows)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, m: usize, n: usize },
    Conv2d { x: NodeId, k: NodeId, geom: ConvGeom },
    AddChannelBias { x: NodeId, b: NodeId, c: usize, plane: usize },
    AddRowBias { x: NodeId, b: NodeId, n: usize },
    Relu { x: NodeId },
    GlobalAvgPool { x: NodeId, c: usize, plane: usize },
    L2NormalizeRows { x: NodeId, cols: usize, norms: Vec<f64> },
    Mix { a: NodeId, b: NodeId, lambda: f64 },
    PermuteRows { x: NodeId, perm: Vec<usize>, row: usize },
    Scale { x: NodeId, c: f64 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    SqrtGuarded { x: NodeId },
    Softplus { x: NodeId },
    GatherPairs { x: NodeId, cols: Vec<usize>, n: usize },
    MeanAll { x: NodeId },
    SumAll { x: NodeId },
    SoftmaxCe { logits: NodeId, probs: Vec<f64>, targets: Targets, batch: usize, classes: usize },
    PairwiseSqDist { z: NodeId, rows: usize, cols: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

/// Eager reverse-mode tape. Records start from leaves created with
/// [`Graph::leaf`]; `backward` fills every node's gradient.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        let n = data.len();
        self.nodes.push(Node { shape, grad: vec![0.0; n], data });
        self.ops.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "leaf shape {:?} expects {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    pub fn leaf_of(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![], vec![v], Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- ops ---------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!("matmul expects rank-2 inputs, got {sa:?} and {sb:?}")));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner extents differ: {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        linalg::matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose expects rank-2 input, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; m * n];
        linalg::transpose_into(self.data(x), &mut out, m, n);
        Ok(self.push(vec![n, m], out, Op::Transpose { x, m, n }))
    }

    /// Cross-correlation (no kernel flip) over a batch of CHW images.
    /// `x` may be rank 3 (single image) or rank 4 (batched); the output
    /// keeps the input's rank.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if ks.len() != 4 {
            return Err(Error::Dimension(format!("conv kernel must be rank 4, got {ks:?}")));
        }
        let (batched, batch, c_in, h, w) = match xs.len() {
            3 => (false, 1, xs[0], xs[1], xs[2]),
            4 => (true, xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(Error::Dimension(format!("conv input must be rank 3 or 4, got {xs:?}"))),
        };
        if ks[1] != c_in {
            return Err(Error::Dimension(format!(
                "kernel expects {} input channels, image has {}",
                ks[1], c_in
            )));
        }
        if stride == 0 {
            return Err(Error::Validation("conv stride must be positive".into()));
        }
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Dimension(format!(
                        "kernel {kh}x{kw} larger than input {h}x{w} under valid padding"
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                if kh > h + pad_h || kw > w + pad_w {
                    return Err(Error::Dimension(format!(
                        "kernel {kh}x{kw} larger than padded input under same padding"
                    )));
                }
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        let geom = ConvGeom { batch, c_in, h, w, c_out, kh, kw, stride, out_h, out_w, pad_top, pad_left };

        let cols_rows = c_in * kh * kw;
        let plane_out = out_h * out_w;
        let mut out = vec![0.0; batch * c_out * plane_out];
        {
            let xdata = self.data(x);
            let kdata = self.data(k);
            let img = h * w * c_in;
            let run = |b: usize, out_img: &mut [f64]| {
                let mut cols = vec![0.0; cols_rows * plane_out];
                im2col(&xdata[b * img..(b + 1) * img], &geom, &mut cols);
                linalg::matmul_into(kdata, &cols, out_img, c_out, cols_rows, plane_out);
            };
            if batch > 1 {
                out.par_chunks_mut(c_out * plane_out).enumerate().for_each(|(b, o)| run(b, o));
            } else {
                run(0, &mut out);
            }
        }
        let out_shape = if batched {
            vec![batch, c_out, out_h, out_w]
        } else {
            vec![c_out, out_h, out_w]
        };
        Ok(self.push(out_shape, out, Op::Conv2d { x, k, geom }))
    }

    /// x of shape (B, C, H, W) or (C, H, W) plus a per-channel bias of shape (C).
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        let (c, plane) = match xs.len() {
            3 => (xs[0], xs[1] * xs[2]),
            4 => (xs[1], xs[2] * xs[3]),
            _ => return Err(Error::Dimension(format!("channel bias expects rank 3 or 4, got {xs:?}"))),
        };
        if bs != vec![c] {
            return Err(Error::Dimension(format!("bias shape {bs:?} does not match {c} channels")));
        }
        let bias = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_mut(c * plane) {
            for (ch, &bv) in bias.iter().enumerate() {
                for v in &mut chunk[ch * plane..(ch + 1) * plane] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(xs, out, Op::AddChannelBias { x, b, c, plane }))
    }

    /// x of shape (B, n) plus a bias row of shape (n).
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Dimension(format!("row bias {bs:?} does not fit {xs:?}")));
        }
        let n = xs[1];
        let bias = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.push(xs, out, Op::AddRowBias { x, b, n }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(shape, out, Op::Relu { x })
    }

    /// (B, C, H, W) -> (B, C) spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("global_avg_pool expects rank 4, got {xs:?}")));
        }
        let (batch, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let xdata = self.data(x);
        let mut out = vec![0.0; batch * c];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let mut acc = 0.0;
                for &v in &xdata[base..base + plane] {
                    acc += v;
                }
                out[b * c + ch] = acc / plane as f64;
            }
        }
        Ok(self.push(vec![batch, c], out, Op::GlobalAvgPool { x, c, plane }))
    }

    /// Normalize each row to unit L2 norm, with the zero vector mapped to
    /// itself through the `NORM_EPS` guard. Rank-1 input is one row.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let cols = match xs.len() {
            1 => xs[0],
            2 => xs[1],
            _ => return Err(Error::Dimension(format!("l2_normalize expects rank 1 or 2, got {xs:?}"))),
        };
        let xdata = self.data(x);
        let rows = xdata.len() / cols.max(1);
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; xdata.len()];
        for r in 0..rows {
            let seg = &xdata[r * cols..(r + 1) * cols];
            let norm = seg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(seg) {
                *o = v / denom;
            }
            norms.push(norm);
        }
        Ok(self.push(xs, out, Op::L2NormalizeRows { x, cols, norms }))
    }

    /// lambda * a + (1 - lambda) * b. The endpoints return a bit-exact copy
    /// of the corresponding operand.
    pub fn mix(&mut self, a: NodeId, b: NodeId, lambda: f64) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mix operands differ in shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Validation(format!("mix coefficient {lambda} outside [0, 1]")));
        }
        let shape = self.shape(a).to_vec();
        let out = if lambda == 1.0 {
            self.data(a).to_vec()
        } else if lambda == 0.0 {
            self.data(b).to_vec()
        } else {
            self.data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&av, &bv)| lambda * av + (1.0 - lambda) * bv)
                .collect()
        };
        Ok(self.push(shape, out, Op::Mix { a, b, lambda }))
    }

    /// Reorder slices along dimension 0: out[i] = x[perm[i]].
    pub fn permute_rows(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || perm.len() != xs[0] {
            return Err(Error::Dimension(format!(
                "permutation of length {} does not match leading extent of {:?}",
                perm.len(),
                xs
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Validation("permute_rows: not a permutation".into()));
            }
            seen[p] = true;
        }
        let row = numel(&xs[1..]);
        let xdata = self.data(x);
        let mut out = vec![0.0; xdata.len()];
        for (i, &src) in perm.iter().enumerate() {
            out[i * row..(i + 1) * row].copy_from_slice(&xdata[src * row..(src + 1) * row]);
        }
        Ok(self.push(xs, out, Op::PermuteRows { x, perm: perm.to_vec(), row }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| c * v).collect();
        self.push(shape, out, Op::Scale { x, c })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "mul_elem", |x, y| x * y, Op::MulElem { a, b })
    }

    fn zip_op(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name} operands differ in shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(shape, out, op))
    }

    /// Elementwise square root; the backward pass guards the slope at zero.
    pub fn sqrt_guarded(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| v.max(0.0).sqrt()).collect();
        self.push(shape, out, Op::SqrtGuarded { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| stable_softplus(v)).collect();
        self.push(shape, out, Op::Softplus { x })
    }

    /// out[i] = x[i, cols[i]] for a square (B, B) matrix.
    pub fn gather_pairs(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != cols.len() {
            return Err(Error::Dimension(format!(
                "gather_pairs needs one column index per row of {xs:?}, got {}",
                cols.len()
            )));
        }
        let n = xs[1];
        if cols.iter().any(|&c| c >= n) {
            return Err(Error::Validation("gather_pairs column index out of range".into()));
        }
        let xdata = self.data(x);
        let out = cols.iter().enumerate().map(|(i, &c)| xdata[i * n + c]).collect();
        Ok(self.push(vec![xs[0]], out, Op::GatherPairs { x, cols: cols.to_vec(), n }))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.data(x).len();
        let mut acc = 0.0;
        for &v in self.data(x) {
            acc += v;
        }
        self.push(vec![], vec![acc / n as f64], Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0;
        for &v in self.data(x) {
            acc += v;
        }
        self.push(vec![], vec![acc], Op::SumAll { x })
    }

    /// Mean over the batch of -sum_j t_j log softmax(logits)_j, stabilized by
    /// per-row max subtraction. Soft target rows must sum to one.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &Targets) -> Result<NodeId> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(Error::Dimension(format!("cross-entropy expects rank-2 logits, got {ls:?}")));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if classes < 2 {
            return Err(Error::Validation(format!("cross-entropy needs at least 2 classes, got {classes}")));
        }
        match targets {
            Targets::Hard(idx) => {
                if idx.len() != batch {
                    return Err(Error::Dimension(format!(
                        "{} hard targets for batch of {batch}",
                        idx.len()
                    )));
                }
                if let Some(&c) = idx.iter().find(|&&c| c >= classes) {
                    return Err(Error::Validation(format!("target class {c} out of range 0..{classes}")));
                }
            }
            Targets::Soft(rows) => {
                if rows.len() != batch * classes {
                    return Err(Error::Dimension(format!(
                        "soft targets hold {} values, expected {}",
                        rows.len(),
                        batch * classes
                    )));
                }
                for (r, row) in rows.chunks(classes).enumerate() {
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(Error::Validation(format!(
                            "soft target row {r} sums to {s}, expected 1"
                        )));
                    }
                }
            }
        }

        let zdata = self.data(logits);
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &zdata[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut lse = 0.0;
            for &v in row {
                lse += (v - max).exp();
            }
            let lse = lse.ln() + max;
            for (j, &v) in row.iter().enumerate() {
                probs[r * classes + j] = (v - lse).exp();
            }
            let dot = match targets {
                Targets::Hard(idx) => row[idx[r]],
                Targets::Soft(rows) => {
                    let trow = &rows[r * classes..(r + 1) * classes];
                    let mut acc = 0.0;
                    for (&t, &v) in trow.iter().zip(row) {
                        acc += t * v;
                    }
                    acc
                }
            };
            loss += lse - dot;
        }
        loss /= batch as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::SoftmaxCe { logits, probs, targets: targets.clone(), batch, classes },
        ))
    }

    /// (B, d) -> (B, B) matrix of squared Euclidean distances between rows.
    /// Symmetric with a zero diagonal by construction.
    pub fn pairwise_sq_distances(&mut self, z: NodeId) -> Result<NodeId> {
        let zs = self.shape(z).to_vec();
        if zs.len() != 2 {
            return Err(Error::Dimension(format!("pairwise distances expect rank 2, got {zs:?}")));
        }
        let (rows, cols) = (zs[0], zs[1]);
        if rows < 2 {
            return Err(Error::Usage(format!("pairwise distances need at least 2 rows, got {rows}")));
        }
        let zdata = self.data(z);
        let mut out = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in (i + 1)..rows {
                let a = &zdata[i * cols..(i + 1) * cols];
                let b = &zdata[j * cols..(j + 1) * cols];
                let mut acc = 0.0;
                for (&av, &bv) in a.iter().zip(b) {
                    let d = av - bv;
                    acc += d * d;
                }
                out[i * rows + j] = acc;
                out[j * rows + i] = acc;
            }
        }
        Ok(self.push(vec![rows, rows], out, Op::PairwiseSqDist { z, rows, cols }))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar root. Gradients of every node accumulate
    /// additively; leaves keep theirs for the caller to read.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.nodes[root.0].grad[0] = 1.0;
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        Ok(())
    }

    fn take_grad(&self, id: usize) -> Vec<f64> {
        self.nodes[id].grad.clone()
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f64]) {
        let g = &mut self.nodes[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gv, &dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops are swapped out and back to satisfy the borrow checker without
        // cloning the record's aux buffers.
        let op = std::mem::replace(&mut self.ops[idx], Op::Leaf);
        let g_out = self.take_grad(idx);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut da = vec![0.0; m * k];
                linalg::matmul_nt_into(&g_out, self.data(*b), &mut da, m, n, k);
                self.add_grad(*a, &da);
                let mut db = vec![0.0; k * n];
                linalg::matmul_tn_into(self.data(*a), &g_out, &mut db, m, k, n);
                self.add_grad(*b, &db);
            }
            Op::Transpose { x, m, n } => {
                let mut dx = vec![0.0; m * n];
                linalg::transpose_into(&g_out, &mut dx, *n, *m);
                self.add_grad(*x, &dx);
            }
            Op::Conv2d { x, k, geom } => {
                self.backward_conv(*x, *k, *geom, &g_out);
            }
            Op::AddChannelBias { x, b, c, plane } => {
                self.add_grad(*x, &g_out);
                let mut db = vec![0.0; *c];
                for chunk in g_out.chunks(c * plane) {
                    for (ch, dv) in db.iter_mut().enumerate() {
                        for &gv in &chunk[ch * plane..(ch + 1) * plane] {
                            *dv += gv;
                        }
                    }
                }
                self.add_grad(*b, &db);
            }
            Op::AddRowBias { x, b, n } => {
                self.add_grad(*x, &g_out);
                let mut db = vec![0.0; *n];
                for row in g_out.chunks(*n) {
                    for (dv, &gv) in db.iter_mut().zip(row) {
                        *dv += gv;
                    }
                }
                self.add_grad(*b, &db);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .data(*x)
                    .iter()
                    .zip(&g_out)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::GlobalAvgPool { x, c, plane } => {
                let mut dx = vec![0.0; g_out.len() * plane];
                let inv = 1.0 / *plane as f64;
                for (bc, &gv) in g_out.iter().enumerate() {
                    let _ = c;
                    let base = bc * plane;
                    for v in &mut dx[base..base + plane] {
                        *v = gv * inv;
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::L2NormalizeRows { x, cols, norms } => {
                let cols = *cols;
                let ydata = &self.nodes[idx].data;
                let mut dx = vec![0.0; g_out.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let seg = r * cols..(r + 1) * cols;
                    let y = &ydata[seg.clone()];
                    let g = &g_out[seg.clone()];
                    if norm > NORM_EPS {
                        let dot: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
                        for ((dv, &gv), &yv) in dx[seg].iter_mut().zip(g).zip(y) {
                            *dv = (gv - yv * dot) / norm;
                        }
                    } else {
                        for (dv, &gv) in dx[seg].iter_mut().zip(g) {
                            *dv = gv / NORM_EPS;
                        }
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::Mix { a, b, lambda } => {
                let da: Vec<f64> = g_out.iter().map(|&g| g * lambda).collect();
                let db: Vec<f64> = g_out.iter().map(|&g| g * (1.0 - lambda)).collect();
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::PermuteRows { x, perm, row } => {
                let mut dx = vec![0.0; g_out.len()];
                for (i, &src) in perm.iter().enumerate() {
                    for (dv, &gv) in dx[src * row..(src + 1) * row]
                        .iter_mut()
                        .zip(&g_out[i * row..(i + 1) * row])
                    {
                        *dv += gv;
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g_out.iter().map(|&g| g * c).collect();
                self.add_grad(*x, &dx);
            }
            Op::Add { a, b } => {
                self.add_grad(*a, &g_out);
                self.add_grad(*b, &g_out);
            }
            Op::Sub { a, b } => {
                self.add_grad(*a, &g_out);
                let db: Vec<f64> = g_out.iter().map(|&g| -g).collect();
                self.add_grad(*b, &db);
            }
            Op::MulElem { a, b } => {
                let da: Vec<f64> = g_out.iter().zip(self.data(*b)).map(|(&g, &bv)| g * bv).collect();
                let db: Vec<f64> = g_out.iter().zip(self.data(*a)).map(|(&g, &av)| g * av).collect();
                self.add_grad(*a, &da);
                self.add_grad(*b, &db);
            }
            Op::SqrtGuarded { x } => {
                let ydata = &self.nodes[idx].data;
                let dx: Vec<f64> = g_out
                    .iter()
                    .zip(ydata)
                    .map(|(&g, &y)| g / (2.0 * y.max(NORM_EPS)))
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::Softplus { x } => {
                let dx: Vec<f64> = g_out
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &xv)| g * stable_sigmoid(xv))
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::GatherPairs { x, cols, n } => {
                let mut dx = vec![0.0; cols.len() * n];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] += g_out[i];
                }
                self.add_grad(*x, &dx);
            }
            Op::MeanAll { x } => {
                let nd = self.nodes[x.0].data.len();
                let gv = g_out[0] / nd as f64;
                let dx = vec![gv; nd];
                self.add_grad(*x, &dx);
            }
            Op::SumAll { x } => {
                let nd = self.nodes[x.0].data.len();
                let dx = vec![g_out[0]; nd];
                self.add_grad(*x, &dx);
            }
            Op::SoftmaxCe { logits, probs, targets, batch, classes } => {
                let scale = g_out[0] / *batch as f64;
                let mut dz = probs.clone();
                match targets {
                    Targets::Hard(idx2) => {
                        for (r, &c) in idx2.iter().enumerate() {
                            dz[r * classes + c] -= 1.0;
                        }
                    }
                    Targets::Soft(rows) => {
                        for (dv, &tv) in dz.iter_mut().zip(rows) {
                            *dv -= tv;
                        }
                    }
                }
                for dv in &mut dz {
                    *dv *= scale;
                }
                self.add_grad(*logits, &dz);
            }
            Op::PairwiseSqDist { z, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let zdata = self.data(*z);
                let mut dz = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..rows {
                        let g = g_out[i * rows + j];
                        if g == 0.0 || i == j {
                            continue;
                        }
                        for c in 0..cols {
                            let diff = zdata[i * cols + c] - zdata[j * cols + c];
                            dz[i * cols + c] += 2.0 * g * diff;
                            dz[j * cols + c] -= 2.0 * g * diff;
                        }
                    }
                }
                self.add_grad(*z, &dz);
            }
        }
        self.ops[idx] = op;
    }

    fn backward_conv(&mut self, x: NodeId, k: NodeId, geom: ConvGeom, g_out: &[f64]) {
        let ConvGeom { batch, c_in, h, w, c_out, kh, kw, out_h, out_w, .. } = geom;
        let cols_rows = c_in * kh * kw;
        let plane_out = out_h * out_w;
        let img = c_in * h * w;

        // dK accumulates over the batch in a fixed chunk layout, so the
        // summation order is independent of the rayon pool size.
        let chunk = batch.div_ceil(8).max(1);
        let mut dk = vec![0.0; c_out * cols_rows];
        {
            let xdata = self.data(x);
            let partials: Vec<Vec<f64>> = (0..batch)
                .collect::<Vec<_>>()
                .par_chunks(chunk)
                .map(|bs| {
                    let mut acc = vec![0.0; c_out * cols_rows];
                    let mut dk_img = vec![0.0; c_out * cols_rows];
                    let mut cols = vec![0.0; cols_rows * plane_out];
                    for &b in bs {
                        im2col(&xdata[b * img..(b + 1) * img], &geom, &mut cols);
                        let g_img = &g_out[b * c_out * plane_out..(b + 1) * c_out * plane_out];
                        linalg::matmul_nt_into(g_img, &cols, &mut dk_img, c_out, plane_out, cols_rows);
                        for (a, &v) in acc.iter_mut().zip(&dk_img) {
                            *a += v;
                        }
                    }
                    acc
                })
                .collect();
            for part in &partials {
                for (a, &v) in dk.iter_mut().zip(part) {
                    *a += v;
                }
            }
        }
        self.add_grad(k, &dk);

        // dX per image is independent.
        let mut dx = vec![0.0; batch * img];
        {
            let kdata = self.data(k);
            let run = |b: usize, dx_img: &mut [f64]| {
                let g_img = &g_out[b * c_out * plane_out..(b + 1) * c_out * plane_out];
                let mut dcols = vec![0.0; cols_rows * plane_out];
                linalg::matmul_tn_into(kdata, g_img, &mut dcols, c_out, cols_rows, plane_out);
                col2im_add(&dcols, &geom, dx_img);
            };
            if batch > 1 {
                dx.par_chunks_mut(img).enumerate().for_each(|(b, d)| run(b, d));
            } else {
                run(0, &mut dx);
            }
        }
        self.add_grad(x, &dx);
    }
}

/// Valid output-column range [lo, hi) for one kernel tap: the set of ox with
/// 0 <= ox*stride + kj - pad_left < w.
fn col_range(w: usize, out_w: usize, stride: usize, kj: usize, pad_left: usize) -> (usize, usize) {
    let lo = if kj >= pad_left { 0 } else { (pad_left - kj).div_ceil(stride) };
    let hi = if w + pad_left > kj {
        (((w + pad_left - kj - 1) / stride) + 1).min(out_w)
    } else {
        0
    };
    (lo.min(out_w), hi.max(lo).min(out_w))
}

fn im2col(x: &[f64], geom: &ConvGeom, cols: &mut [f64]) {
    let ConvGeom { c_in, h, w, kh, kw, stride, out_h, out_w, pad_top, pad_left, .. } = *geom;
    let plane_out = out_h * out_w;
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = col_range(w, out_w, stride, kj, pad_left);
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad_top as isize;
                    let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_base = (ci * h + iy as usize) * w;
                    dst_row[..lo].fill(0.0);
                    dst_row[hi..].fill(0.0);
                    if stride == 1 {
                        let start = src_base + lo + kj - pad_left;
                        dst_row[lo..hi].copy_from_slice(&x[start..start + (hi - lo)]);
                    } else {
                        for (ox, d) in dst_row[lo..hi].iter_mut().enumerate() {
                            let ix = (lo + ox) * stride + kj - pad_left;
                            *d = x[src_base + ix];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom { c_in, h, w, kh, kw, stride, out_h, out_w, pad_top, pad_left, .. } = *geom;
    let plane_out = out_h * out_w;
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = col_range(w, out_w, stride, kj, pad_left);
                for oy in 0..out_h {
                    let iy = (oy * stride + ki) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w;
                    let src_row = &src[oy * out_w..(oy + 1) * out_w];
                    if stride == 1 {
                        let start = dst_base + lo + kj - pad_left;
                        for (d, &v) in dx[start..start + (hi - lo)].iter_mut().zip(&src_row[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in src_row[lo..hi].iter().enumerate() {
                            let ix = (lo + ox) * stride + kj - pad_left;
                            dx[dst_base + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.leaf(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let a = g.leaf(&[2, 3], vec![1.5, -2.0, 0.25, 4.0, 5.0, -6.5]).unwrap();
        let eye = g.leaf(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = g.leaf(&[3, 2], vec![0.0; 6]).unwrap();
        let ai = g.matmul(a, eye).unwrap();
        assert_eq!(g.data(ai), g.data(a));
        let az = g.matmul(a, zero).unwrap();
        assert!(g.data(az).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.leaf(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.leaf(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 3, 3], (0..9).map(|v| v as f64 / 10.0).collect()).unwrap();
        let k = g.leaf(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = g.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(g.data(y), g.data(x));
        assert_eq!(g.shape(y), &[1, 3, 3]);
    }

    #[test]
    fn conv_constant_image_all_ones_kernel() {
        let mut g = Graph::new();
        let c = 0.37;
        let x = g.leaf(&[1, 5, 5], vec![c; 25]).unwrap();
        let k = g.leaf(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = g.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        for &v in g.data(y) {
            assert!(close(v, 9.0 * c, 1e-12));
        }
    }

    #[test]
    fn conv_impulse_reproduces_kernel() {
        // Cross-correlation convention: unit impulse recovers the kernel
        // itself, not its flip.
        let mut g = Graph::new();
        let mut img = vec![0.0; 25];
        img[12] = 1.0; // center of a 5x5 image
        let x = g.leaf(&[1, 5, 5], img).unwrap();
        let kvals: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let k = g.leaf(&[1, 1, 3, 3], kvals.clone()).unwrap();
        let y = g.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        // Output (oy, ox) sees the impulse at kernel tap (2-oy, 2-ox); the
        // full valid map is the 180-degree rotation of the kernel -- reading
        // it at the impulse-centered position reproduces kernel order.
        let out = g.data(y);
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(out[oy * 3 + ox], kvals[(2 - oy) * 3 + (2 - ox)]);
            }
        }
    }

    #[test]
    fn conv_kernel_too_large_errors() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 2, 2], vec![0.0; 4]).unwrap();
        let k = g.leaf(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        assert!(matches!(g.conv2d(x, k, 1, Padding::Valid), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_same_padding_keeps_extent() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 1, 8, 8], vec![1.0; 64]).unwrap();
        let k = g.leaf(&[4, 1, 3, 3], vec![0.1; 36]).unwrap();
        let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 8, 8]);
        let y2 = g.conv2d(x, k, 2, Padding::Same).unwrap();
        assert_eq!(g.shape(y2), &[1, 4, 4, 4]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.leaf(&[1, 5], vec![0.0; 5]).unwrap();
        let loss = g.softmax_cross_entropy(z, &Targets::Hard(vec![3])).unwrap();
        assert!(close(g.value(loss), 5.0_f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_closed_form() {
        let mut g = Graph::new();
        let z = g.leaf(&[1, 2], vec![0.0, 3.0_f64.ln()]).unwrap();
        let loss = g.softmax_cross_entropy(z, &Targets::Hard(vec![0])).unwrap();
        assert!(close(g.value(loss), 4.0_f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_matching_soft_target_is_entropy() {
        let mut g = Graph::new();
        let logits = vec![0.3, -1.2, 2.0];
        let z = g.leaf(&[1, 3], logits.clone()).unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let p: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
        let entropy: f64 = -p.iter().map(|&q| q * q.ln()).sum::<f64>();
        // The soft row sums to 1 only within float error; renormalize.
        let s: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|v| v / s).collect();
        let loss = g.softmax_cross_entropy(z, &Targets::Soft(p)).unwrap();
        assert!(close(g.value(loss), entropy, 1e-9));
    }

    #[test]
    fn cross_entropy_rejects_unnormalized_soft_target() {
        let mut g = Graph::new();
        let z = g.leaf(&[1, 2], vec![0.0, 0.0]).unwrap();
        let r = g.softmax_cross_entropy(z, &Targets::Soft(vec![0.6, 0.6]));
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn hard_target_equals_one_hot_soft_exactly() {
        let mut g = Graph::new();
        let logits = vec![0.37, -2.4, 1.9, 0.001, -0.6, 3.3, 0.2, 1.1];
        let z = g.leaf(&[2, 4], logits).unwrap();
        let hard = g.softmax_cross_entropy(z, &Targets::Hard(vec![2, 0])).unwrap();
        let soft = g.softmax_cross_entropy(z, &Targets::one_hot(&[2, 0], 4)).unwrap();
        assert_eq!(g.value(hard).to_bits(), g.value(soft).to_bits());
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let v = g.leaf(&[2], vec![3.0, 4.0]).unwrap();
        let y = g.l2_normalize_rows(v).unwrap();
        assert!(close(g.data(y)[0], 0.6, 1e-15));
        assert!(close(g.data(y)[1], 0.8, 1e-15));

        let u = g.leaf(&[2], vec![1.0, 0.0]).unwrap();
        let yu = g.l2_normalize_rows(u).unwrap();
        assert_eq!(g.data(yu), &[1.0, 0.0]);

        let z = g.leaf(&[2], vec![0.0, 0.0]).unwrap();
        let yz = g.l2_normalize_rows(z).unwrap();
        assert_eq!(g.data(yz), &[0.0, 0.0]);
    }

    #[test]
    fn pairwise_examples() {
        let mut g = Graph::new();
        let z = g.leaf(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let d = g.pairwise_sq_distances(z).unwrap();
        assert_eq!(g.data(d), &[0.0, 25.0, 25.0, 0.0]);

        let same = g.leaf(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let d2 = g.pairwise_sq_distances(same).unwrap();
        assert!(g.data(d2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let sq = g.mul_elem(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[2.0, 4.0]);
    }

    #[test]
    fn backward_disconnected_param_keeps_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let unused = g.leaf(&[3], vec![5.0, 6.0, 7.0]).unwrap();
        let sq = g.mul_elem(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn mix_endpoints_bit_exact_and_symmetric() {
        let mut g = Graph::new();
        let a = g.leaf(&[3], vec![0.1, -2.7, 3.9]).unwrap();
        let b = g.leaf(&[3], vec![5.5, 0.0, -1.25]).unwrap();
        let m1 = g.mix(a, b, 1.0).unwrap();
        assert_eq!(g.data(m1), g.data(a));
        let m0 = g.mix(a, b, 0.0).unwrap();
        assert_eq!(g.data(m0), g.data(b));
        let lam = 0.3125; // exactly representable
        let mab = g.mix(a, b, lam).unwrap();
        let mba = g.mix(b, a, 1.0 - lam).unwrap();
        for (x, y) in g.data(mab).iter().zip(g.data(mba)) {
            assert!(close(*x, *y, 1e-15));
        }
    }

    #[test]
    fn permute_rows_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = g.permute_rows(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.data(p), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        let back = g.permute_rows(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(&[2, 3], vec![0.3, 1.7, -0.4, 0.9, -1.1, 2.2]).unwrap();
            let w = g.leaf(&[3, 2], vec![0.5, -0.25, 1.5, 0.75, -0.8, 0.1]).unwrap();
            let z = g.matmul(x, w).unwrap();
            let r = g.relu(z);
            let loss = g.softmax_cross_entropy(r, &Targets::Hard(vec![0, 1])).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).to_bits(), g.grad(w).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(build(), build());
    }
}
