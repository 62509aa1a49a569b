//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep that visits each
//! node once.

use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::distance::{self, Metric};
use crate::error::{Error, Result};
use crate::losses::{self, RankingConfig};

/// Additive logit applied to padded attention keys.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Batch of equal-length (padded) sequences laid out as `[batch * seq_len, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
    /// One flag per row; `false` marks a padded slot that must not be attended to.
    pub valid: Vec<bool>,
}

impl SeqLayout {
    pub fn unpadded(batch: usize, seq_len: usize) -> Self {
        Self {
            batch,
            seq_len,
            valid: vec![true; batch * seq_len],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Geometry of a 2-D convolution over HWC-flattened images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        inputs: Vec<Var>,
        index: Vec<Option<(usize, usize)>>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Im2Col {
        x: Var,
        geom: ConvGeometry,
    },
    GroupMeanRows {
        x: Var,
        group: usize,
    },
    Focal {
        scores: Var,
        dscore: Vec<f64>,
    },
    Ranking {
        t: Var,
        pos: Var,
        negs: Var,
        per_item: usize,
        metric: Metric,
        coef_pos: Vec<f64>,
        coef_neg: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Im2Col { .. } => "im2col",
            Op::GroupMeanRows { .. } => "group_mean_rows",
            Op::Focal { .. } => "focal_loss",
            Op::Ranking { .. } => "setwise_ranking_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. } | Op::Im2Col { x, .. } | Op::GroupMeanRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatCols(xs) => xs.clone(),
            Op::GatherRows { inputs, .. } => inputs.clone(),
            Op::Focal { scores, .. } => vec![*scores],
            Op::Ranking { t, pos, negs, .. } => vec![*t, *pos, *negs],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph in which no node requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape_of(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::new(shape, data)?, op)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(Tensor::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` bias to every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape_of(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape_of(x), self.shape_of(bias)),
            ));
        }
        let shape = self.shape_of(x).to_vec();
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis })
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.shape_of(gamma) != [d] || self.shape_of(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape_of(x),
                    self.shape_of(gamma),
                    self.shape_of(beta)
                ),
            ));
        }
        let shape = self.shape_of(x).to_vec();
        let rows = self.value(x).rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product attention over projected `q`, `k`, `v`, split into
    /// `heads` column groups. Padded keys receive [`MASKED_LOGIT`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: &SeqLayout) -> Result<Var> {
        let shape = self.shape_of(q).to_vec();
        if shape.len() != 2 || self.shape_of(k) != shape || self.shape_of(v) != shape {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", shape, self.shape_of(k), self.shape_of(v)),
            ));
        }
        let (rows, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        if rows != layout.rows() || layout.valid.len() != rows {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows for layout {}x{}", layout.batch, layout.seq_len),
            ));
        }
        let (l, dh) = (layout.seq_len, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; layout.batch * heads * l * l];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; l];
        for b in 0..layout.batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..l {
                    let qi = &qd[(b * l + i) * d + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..l {
                        let kj = &kd[(b * l + j) * d + col..][..dh];
                        let mask = if layout.valid[b * l + j] { 0.0 } else { MASKED_LOGIT };
                        scores[j] = dot(qi, kj) * scale + mask;
                        max = max.max(scores[j]);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let p = &mut probs[((b * heads + h) * l + i) * l..][..l];
                    for j in 0..l {
                        p[j] = scores[j] / sum;
                    }
                    let o = &mut out[(b * l + i) * d + col..][..dh];
                    for j in 0..l {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b * l + j) * d + col..][..dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len: l,
                probs,
            },
        )
    }

    /// Concatenates 2-D inputs along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = match xs.first() {
            Some(&x) => self.value(x).rows(),
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        for &x in xs {
            if self.shape_of(x).len() != 2 || self.value(x).rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("input {:?} with {rows} rows", self.shape_of(x)),
                ));
            }
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(xs.to_vec()))
    }

    /// Builds a matrix whose rows are picked from `inputs`; `None` yields a
    /// zero row. 1-D inputs count as a single row.
    pub fn gather_rows(&mut self, inputs: &[Var], index: Vec<Option<(usize, usize)>>) -> Result<Var> {
        let cols = match inputs.first() {
            Some(&x) => self.value(x).cols(),
            None => return Err(Error::shape("gather_rows", "no inputs")),
        };
        for &x in inputs {
            if self.value(x).cols() != cols || self.shape_of(x).len() > 2 {
                return Err(Error::shape(
                    "gather_rows",
                    format!("input {:?}, expected {cols} cols", self.shape_of(x)),
                ));
            }
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for slot in &index {
            match *slot {
                Some((src, row)) => {
                    let t = inputs
                        .get(src)
                        .map(|&x| self.value(x))
                        .filter(|t| row < t.rows())
                        .ok_or_else(|| Error::shape("gather_rows", format!("row ({src},{row}) out of range")))?;
                    out.extend_from_slice(t.row(row));
                }
                None => out.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let rows = index.len();
        self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::GatherRows {
                inputs: inputs.to_vec(),
                index,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Unfolds `[n, h*w*c]` images into `[n*oh*ow, k*k*c]` patches.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.cols() != geom.input_len() || geom.kernel == 0 || geom.stride == 0 {
            return Err(Error::shape("im2col", format!("{:?} for {geom:?}", t.shape())));
        }
        let n = t.rows();
        let (oh, ow, plen) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let mut out = vec![0.0; n * oh * ow * plen];
        for img in 0..n {
            let src = t.row(img);
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = &mut out[((img * oh + oy) * ow + ox) * plen..][..plen];
                    im2col_patch(&geom, oy, ox, |p, s| dst[p] = src[s]);
                }
            }
        }
        self.push(Tensor::new(vec![n * oh * ow, plen], out)?, Op::Im2Col { x, geom })
    }

    /// Averages consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if group == 0 || t.shape().len() != 2 || !t.rows().is_multiple_of(group) {
            return Err(Error::shape("group_mean_rows", format!("{:?} / {group}", t.shape())));
        }
        let (rows, cols) = (t.rows() / group, t.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for g in 0..group {
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(t.row(r * group + g)) {
                    *o += v;
                }
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= group as f64;
            }
        }
        self.push(Tensor::new(vec![rows, cols], out)?, Op::GroupMeanRows { x, group })
    }

    /// Mean focal loss of probability scores against binary labels.
    pub fn focal_loss(&mut self, scores: Var, labels: &[u8], gamma: f64, alpha: f64) -> Result<Var> {
        let s = self.value(scores).data();
        if s.len() != labels.len() || s.is_empty() {
            return Err(Error::shape(
                "focal_loss",
                format!("{} scores, {} labels", s.len(), labels.len()),
            ));
        }
        let n = s.len() as f64;
        let mut total = 0.0;
        let mut dscore = Vec::with_capacity(s.len());
        for (&p, &y) in s.iter().zip(labels) {
            let (loss, grad) = losses::focal_terms(p, y, gamma, alpha)?;
            total += loss;
            dscore.push(grad / n);
        }
        self.push(Tensor::scalar(total / n), Op::Focal { scores, dscore })
    }

    /// Mean set-wise ranking loss over a batch. `t` and `pos` are `[B, d]`,
    /// `negs` is `[B * per_item, d]` grouped by instance.
    pub fn setwise_ranking_loss(
        &mut self,
        t: Var,
        pos: Var,
        negs: Var,
        per_item: usize,
        config: &RankingConfig,
    ) -> Result<Var> {
        let (tt, pt, nt) = (self.value(t), self.value(pos), self.value(negs));
        let batch = tt.rows();
        if tt.shape().len() != 2
            || pt.shape() != tt.shape()
            || per_item == 0
            || nt.rows() != batch * per_item
            || nt.cols() != tt.cols()
            || batch == 0
        {
            return Err(Error::shape(
                "setwise_ranking_loss",
                format!(
                    "t {:?}, positive {:?}, negatives {:?} ({per_item} per item)",
                    tt.shape(),
                    pt.shape(),
                    nt.shape()
                ),
            ));
        }
        let mut total = 0.0;
        let mut coef_pos = Vec::with_capacity(batch);
        let mut coef_neg = Vec::with_capacity(batch * per_item);
        for b in 0..batch {
            let negatives: Vec<&[f64]> = (0..per_item).map(|j| nt.row(b * per_item + j)).collect();
            let terms = losses::ranking_terms(tt.row(b), pt.row(b), &negatives, config)?;
            total += terms.loss;
            coef_pos.push(terms.coef_pos / batch as f64);
            coef_neg.extend(terms.coef_neg.iter().map(|c| c / batch as f64));
        }
        self.push(
            Tensor::scalar(total / batch as f64),
            Op::Ranking {
                t,
                pos,
                negs,
                per_item,
                metric: config.metric,
                coef_pos,
                coef_neg,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Every leaf that requires a
    /// gradient receives one (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape_of(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    /// Gradients of all parameters bound to this graph, ordered by id.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].requires_grad {
                    let da = matmul_nt(g, val(*b), m, n, k);
                    add_into(slot(nodes, grads, *a).unwrap(), &da);
                }
                if nodes[b.0].requires_grad {
                    let db = matmul_tn(val(*a), g, m, k, n);
                    add_into(slot(nodes, grads, *b).unwrap(), &db);
                }
            }
            Op::Add(a, b) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g);
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    add_into(s, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    add_into(s, g);
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for (o, gv) in s.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for ((o, gv), x) in s.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    add_into(s, g);
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    let n = s.len();
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for (o, gv) in s.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((o, gv), &v) in s.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_grad(v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((o, gv), &yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((o, gv), &v) in s.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                if let Some(s) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let mut dotp = 0.0;
                            for j in 0..n {
                                dotp += y[at(j)] * g[at(j)];
                            }
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gam = val(*gamma);
                if let Some(s) = slot(nodes, grads, *gamma) {
                    for (r, grow) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            s[j] += grow[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *beta) {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, grow) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = grow[j] * gam[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * h[j];
                        }
                        let inv = inv_std[r] / d as f64;
                        for j in 0..d {
                            s[r * d + j] += inv * (d as f64 * dxhat[j] - sum_d - h[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (heads, l) = (*heads, *seq_len);
                let d = node.value.cols();
                let dh = d / heads;
                let batch = node.value.rows() / l;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; l];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        for i in 0..l {
                            let p = &probs[((b * heads + h) * l + i) * l..][..l];
                            let go = &g[(b * l + i) * d + col..][..dh];
                            let mut weighted = 0.0;
                            for j in 0..l {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vd[(b * l + j) * d + col..][..dh];
                                dp[j] = dot(go, vj);
                                weighted += p[j] * dp[j];
                                let dvj = &mut dv[(b * l + j) * d + col..][..dh];
                                for (o, &gv) in dvj.iter_mut().zip(go) {
                                    *o += p[j] * gv;
                                }
                            }
                            let qi = &qd[(b * l + i) * d + col..][..dh];
                            for j in 0..l {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let kj = &kd[(b * l + j) * d + col..][..dh];
                                let dqi = &mut dq[(b * l + i) * d + col..][..dh];
                                for (o, &kv) in dqi.iter_mut().zip(kj) {
                                    *o += ds * kv;
                                }
                                let dkj = &mut dk[(b * l + j) * d + col..][..dh];
                                for (o, &qv) in dkj.iter_mut().zip(qi) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *q) {
                    add_into(s, &dq);
                }
                if let Some(s) = slot(nodes, grads, *k) {
                    add_into(s, &dk);
                }
                if let Some(s) = slot(nodes, grads, *v) {
                    add_into(s, &dv);
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let c = nodes[x.0].value.cols();
                    if let Some(s) = slot(nodes, grads, x) {
                        for (r, grow) in g.chunks(total).enumerate() {
                            add_into(&mut s[r * c..(r + 1) * c], &grow[offset..offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { inputs, index } => {
                let cols = node.value.cols();
                for (r, entry) in index.iter().enumerate() {
                    if let Some((src, row)) = *entry {
                        if let Some(s) = slot(nodes, grads, inputs[src]) {
                            add_into(&mut s[row * cols..(row + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    add_into(s, g);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for o in s.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let n = s.len() as f64;
                    for o in s.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::Im2Col { x, geom } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let (oh, ow, plen) = (geom.out_height(), geom.out_width(), geom.patch_len());
                    let ilen = geom.input_len();
                    let n = s.len() / ilen;
                    for img in 0..n {
                        let dst = &mut s[img * ilen..(img + 1) * ilen];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let src = &g[((img * oh + oy) * ow + ox) * plen..][..plen];
                                im2col_patch(geom, oy, ox, |p, i| dst[i] += src[p]);
                            }
                        }
                    }
                }
            }
            Op::GroupMeanRows { x, group } => {
                let cols = node.value.cols();
                if let Some(s) = slot(nodes, grads, *x) {
                    for (r, grow) in g.chunks(cols).enumerate() {
                        for k in 0..*group {
                            let dst = &mut s[(r * group + k) * cols..][..cols];
                            for (o, gv) in dst.iter_mut().zip(grow) {
                                *o += gv / *group as f64;
                            }
                        }
                    }
                }
            }
            Op::Focal { scores, dscore } => {
                if let Some(s) = slot(nodes, grads, *scores) {
                    for (o, d) in s.iter_mut().zip(dscore) {
                        *o += g[0] * d;
                    }
                }
            }
            Op::Ranking {
                t,
                pos,
                negs,
                per_item,
                metric,
                coef_pos,
                coef_neg,
            } => {
                let d = nodes[t.0].value.cols();
                let (tv, pv, nv) = (val(*t), val(*pos), val(*negs));
                let batch = coef_pos.len();
                let mut dt = vec![0.0; tv.len()];
                let mut dpos = vec![0.0; pv.len()];
                let mut dneg = vec![0.0; nv.len()];
                for b in 0..batch {
                    let trow = &tv[b * d..(b + 1) * d];
                    let c = g[0] * coef_pos[b];
                    if c != 0.0 {
                        let grad = distance::gradient(*metric, trow, &pv[b * d..(b + 1) * d]);
                        add_scaled(&mut dt[b * d..(b + 1) * d], &grad, c);
                        add_scaled(&mut dpos[b * d..(b + 1) * d], &grad, -c);
                    }
                    for j in 0..*per_item {
                        let r = b * per_item + j;
                        let c = g[0] * coef_neg[r];
                        if c == 0.0 {
                            continue;
                        }
                        let grad = distance::gradient(*metric, trow, &nv[r * d..(r + 1) * d]);
                        add_scaled(&mut dt[b * d..(b + 1) * d], &grad, c);
                        add_scaled(&mut dneg[r * d..(r + 1) * d], &grad, -c);
                    }
                }
                if let Some(s) = slot(nodes, grads, *t) {
                    add_into(s, &dt);
                }
                if let Some(s) = slot(nodes, grads, *pos) {
                    add_into(s, &dpos);
                }
                if let Some(s) = slot(nodes, grads, *negs) {
                    add_into(s, &dneg);
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += c * v;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Visits every in-bounds (patch position, input position) pair of the
/// receptive field of output pixel `(oy, ox)`.
fn im2col_patch(geom: &ConvGeometry, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    let c = geom.channels;
    for ky in 0..geom.kernel {
        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
        if iy < 0 || iy >= geom.height as isize {
            continue;
        }
        for kx in 0..geom.kernel {
            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
            if ix < 0 || ix >= geom.width as isize {
                continue;
            }
            let p = (ky * geom.kernel + kx) * c;
            let s = (iy as usize * geom.width + ix as usize) * c;
            for ch in 0..c {
                f(p + ch, s + ch);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
