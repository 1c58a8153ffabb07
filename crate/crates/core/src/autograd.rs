//! Reverse-mode differentiation over a linear tape of `f64` tensor ops.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Only parameter leaves (keyed by [`ParamKey`])
//! report gradients; constants and detached values never receive one.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::{self, HintsDistance};
use crate::tensor::{gemm, Layout, Tensor};

const NORMALIZE_EPS: f64 = 1e-12;

/// Identifies a trainable tensor across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    /// Encoder, adapter or projection parameter by store index.
    Weight(usize),
    /// Prototype bank by head index.
    Bank(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Statistics source for [`Tape::batch_norm`].
pub enum NormStats<'a> {
    Batch {
        eps: f64,
    },
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Flatten(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Kl {
        student: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
    },
    Hints {
        student: Var,
        teacher: Var,
        distance: HintsDistance,
        dists: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    key: Option<ParamKey>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.map.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            key: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, key: ParamKey, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].key = Some(key);
        v
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "linear input {xs:?} vs weight {ws:?}"
            )));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = Tensor::zeros(&[batch, out]);
        gemm(
            batch,
            inp,
            out,
            self.value(x).data(),
            Layout::N,
            self.value(w).data(),
            Layout::T,
            0.0,
            y.data_mut(),
        );
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [out] {
                return Err(Error::Shape(format!(
                    "bias {:?} for {out} outputs",
                    bias.shape()
                )));
            }
            for r in 0..batch {
                for (o, bv) in y.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut y = self.value(x).clone();
        y.scale_in_place(factor);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, factor), rg)
    }

    /// Square-kernel 2-d convolution without bias; `x: [B,C,H,W]`, `w: [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let mut y = Tensor::zeros(&[geom.batch, geom.out_c, geom.out_h, geom.out_w]);
        let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
        let xin = self.value(x).data();
        let wd = self.value(w).data();
        let out_stride = geom.out_c * geom.col_cols();
        for b in 0..geom.batch {
            geom.im2col(&xin[b * geom.in_len()..(b + 1) * geom.in_len()], &mut cols);
            gemm(
                geom.out_c,
                geom.col_rows(),
                geom.col_cols(),
                wd,
                Layout::N,
                &cols,
                Layout::N,
                0.0,
                &mut y.data_mut()[b * out_stride..(b + 1) * out_stride],
            );
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(y, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// Per-channel normalization of `[B, C]` or `[B, C, H, W]` followed by an affine map.
    ///
    /// With [`NormStats::Batch`] the second return value holds the batch mean
    /// and biased variance per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch norm input {shape:?}")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(Error::Shape(format!(
                "batch norm affine {:?} for {channels} channels",
                self.value(gamma).shape()
            )));
        }
        let xd = self.value(x).data();
        let count = (batch * spatial) as f64;
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        let base = (b * channels + c) * spatial;
                        s += xd[base..base + spatial].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for b in 0..batch {
                        let base = (b * channels + c) * spatial;
                        v += xd[base..base + spatial]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = v / count;
                }
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::Shape(format!(
                        "running statistics of length {} for {channels} channels",
                        mean.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = Tensor::zeros(&shape);
        let yd = y.data_mut();
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for i in base..base + spatial {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    yd[i] = g[c] * h + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            y,
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
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Spatial mean of `[B, C, H, W]` into `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "global pooling expects [B,C,H,W], got {shape:?}"
            )));
        }
        let spatial = shape[2] * shape[3];
        let xd = self.value(x).data();
        let mut y = Tensor::zeros(&shape[..2]);
        for (o, chunk) in y.data_mut().iter_mut().zip(xd.chunks_exact(spatial)) {
            *o = chunk.iter().sum::<f64>() / spatial as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::GlobalAvgPool(x), rg))
    }

    /// Reshapes `[B, ...]` into `[B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, width) = (t.rows(), t.row_len());
        let y = t
            .clone()
            .reshaped(&[rows, width])
            .expect("same element count");
        let rg = self.rg(x);
        self.push(y, Op::Flatten(x), rg)
    }

    /// Row-wise L2 normalization of `[B, D]`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "l2 normalize expects [B,D], got {:?}",
                t.shape()
            )));
        }
        let mut y = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = y.row_mut(r);
            let n = crate::tensor::norm(row).max(NORMALIZE_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::L2Normalize { x, norms }, rg))
    }

    /// Batch-mean cross-entropy of `[B, K]` logits against hard labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let value = losses::ce_loss_batch(t, labels)?;
        let mut probs = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            probs.extend(losses::softmax(t.row(r))?);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Batch-mean `KL(softmax(teacher) || softmax(student))`.
    ///
    /// The teacher distribution is a constant of this node: no gradient is
    /// routed to `teacher` regardless of whether it is detached.
    pub fn kl_div(&mut self, teacher: Var, student: Var) -> Result<Var> {
        let (t, s) = (self.value(teacher), self.value(student));
        let value = losses::kl_loss_batch(t, s)?;
        let mut teacher_probs = Vec::with_capacity(t.len());
        let mut student_probs = Vec::with_capacity(s.len());
        for r in 0..t.rows() {
            teacher_probs.extend(losses::softmax(t.row(r))?);
            student_probs.extend(losses::softmax(s.row(r))?);
        }
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Kl {
                student,
                teacher_probs,
                student_probs,
            },
            rg,
        ))
    }

    /// Batch-mean feature distance between two equally shaped tensors.
    pub fn hints(&mut self, student: Var, teacher: Var, distance: HintsDistance) -> Result<Var> {
        let (s, t) = (self.value(student), self.value(teacher));
        let value = losses::hints_loss_with(s, t, distance)?;
        let dists = (0..s.rows())
            .map(|r| {
                s.row(r)
                    .iter()
                    .zip(t.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.rg(student) || self.rg(teacher);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Hints {
                student,
                teacher,
                distance,
                dists,
            },
            rg,
        ))
    }

    /// `Σ coeff · term` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Shape(format!(
                    "weighted sum term {:?} is not scalar",
                    t.shape()
                )));
            }
            total += c * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(key) = node.key {
                        out.map.insert(key, g);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, inp, outc) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(xv.shape());
                        gemm(
                            batch,
                            outc,
                            inp,
                            g.data(),
                            Layout::N,
                            wv.data(),
                            Layout::N,
                            0.0,
                            dx.data_mut(),
                        );
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = Tensor::zeros(wv.shape());
                        gemm(
                            outc,
                            batch,
                            inp,
                            g.data(),
                            Layout::T,
                            xv.data(),
                            Layout::N,
                            0.0,
                            dw.data_mut(),
                        );
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        let mut db = Tensor::zeros(&[outc]);
                        for r in 0..batch {
                            for (d, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                        self.accumulate(&mut grads, b, db);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Scale(x, factor) => {
                    let mut dx = g;
                    dx.scale_in_place(*factor);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let geom = ConvGeom::new(xv.shape(), wv.shape(), *stride, *pad)?;
                    let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
                    let mut dcols = vec![0.0; cols.len()];
                    let mut dw = Tensor::zeros(wv.shape());
                    let mut dx = Tensor::zeros(xv.shape());
                    let out_stride = geom.out_c * geom.col_cols();
                    for b in 0..geom.batch {
                        let gy = &g.data()[b * out_stride..(b + 1) * out_stride];
                        let xb = &xv.data()[b * geom.in_len()..(b + 1) * geom.in_len()];
                        if self.rg(*w) {
                            geom.im2col(xb, &mut cols);
                            gemm(
                                geom.out_c,
                                geom.col_cols(),
                                geom.col_rows(),
                                gy,
                                Layout::N,
                                &cols,
                                Layout::T,
                                1.0,
                                dw.data_mut(),
                            );
                        }
                        if self.rg(*x) {
                            gemm(
                                geom.col_rows(),
                                geom.out_c,
                                geom.col_cols(),
                                wv.data(),
                                Layout::T,
                                gy,
                                Layout::N,
                                0.0,
                                &mut dcols,
                            );
                            let len = geom.in_len();
                            geom.col2im(&dcols, &mut dx.data_mut()[b * len..(b + 1) * len]);
                        }
                    }
                    if self.rg(*w) {
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.rg(*x) {
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = g.shape().to_vec();
                    let (batch, channels) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let count = (batch * spatial) as f64;
                    let gd = g.data();
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            for i in base..base + spatial {
                                dgamma[c] += gd[i] * xhat[i];
                                dbeta[c] += gd[i];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let gam = self.value(*gamma).data();
                        let mut dx = Tensor::zeros(&shape);
                        let dxd = dx.data_mut();
                        for b in 0..batch {
                            for c in 0..channels {
                                let base = (b * channels + c) * spatial;
                                let k = gam[c] * inv_std[c];
                                for i in base..base + spatial {
                                    dxd[i] = if *batch_stats {
                                        k * (gd[i] - dbeta[c] / count - xhat[i] * dgamma[c] / count)
                                    } else {
                                        k * gd[i]
                                    };
                                }
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*gamma) {
                        self.accumulate(&mut grads, *gamma, Tensor::from_vec(&[channels], dgamma)?);
                    }
                    if self.rg(*beta) {
                        self.accumulate(&mut grads, *beta, Tensor::from_vec(&[channels], dbeta)?);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x).shape();
                    let spatial = xs[2] * xs[3];
                    let mut dx = Tensor::zeros(xs);
                    for (chunk, gv) in dx.data_mut().chunks_exact_mut(spatial).zip(g.data()) {
                        chunk.iter_mut().for_each(|d| *d = gv / spatial as f64);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Flatten(x) => {
                    let dx = g.reshaped(self.value(*x).shape())?;
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape());
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = crate::tensor::dot(yr, gr);
                        let clamped = *n <= NORMALIZE_EPS;
                        for ((d, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = if clamped {
                                gv / n
                            } else {
                                (gv - yv * proj) / n
                            };
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let shape = self.value(*logits).shape();
                    let (batch, k) = (shape[0], shape[1]);
                    let scale = g.item() / batch as f64;
                    let mut d = Tensor::from_vec(shape, probs.clone())?;
                    for (r, &y) in labels.iter().enumerate() {
                        d.data_mut()[r * k + y] -= 1.0;
                    }
                    d.scale_in_place(scale);
                    self.accumulate(&mut grads, *logits, d);
                }
                Op::Kl {
                    student,
                    teacher_probs,
                    student_probs,
                } => {
                    let shape = self.value(*student).shape();
                    let scale = g.item() / shape[0] as f64;
                    let data = student_probs
                        .iter()
                        .zip(teacher_probs)
                        .map(|(s, t)| (s - t) * scale)
                        .collect();
                    self.accumulate(&mut grads, *student, Tensor::from_vec(shape, data)?);
                }
                Op::Hints {
                    student,
                    teacher,
                    distance,
                    dists,
                } => {
                    let (s, t) = (self.value(*student), self.value(*teacher));
                    let scale = g.item() / s.rows() as f64;
                    let mut d = Tensor::zeros(s.shape());
                    for (r, dist) in dists.iter().enumerate() {
                        let coeff = match distance {
                            HintsDistance::Squared => 2.0 * scale,
                            HintsDistance::Euclidean if *dist > 0.0 => scale / dist,
                            HintsDistance::Euclidean => 0.0,
                        };
                        for ((o, a), b) in d.row_mut(r).iter_mut().zip(s.row(r)).zip(t.row(r)) {
                            *o = coeff * (a - b);
                        }
                    }
                    if self.rg(*teacher) {
                        let mut neg = d.clone();
                        neg.scale_in_place(-1.0);
                        self.accumulate(&mut grads, *teacher, neg);
                    }
                    if self.rg(*student) {
                        self.accumulate(&mut grads, *student, d);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        if self.rg(v) {
                            let shape = self.value(v).shape();
                            self.accumulate(&mut grads, v, Tensor::full(shape, c * g.item()));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv input {xs:?} vs kernel {ws:?} (stride {stride})"
            )));
        }
        let kernel = ws[2];
        if xs[2] + 2 * pad < kernel || xs[3] + 2 * pad < kernel {
            return Err(Error::Shape(format!(
                "conv kernel {kernel} larger than padded input {xs:?}"
            )));
        }
        Ok(Self {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            out_h: (xs[2] + 2 * pad - kernel) / stride + 1,
            out_w: (xs[3] + 2 * pad - kernel) / stride + 1,
            kernel,
            stride,
            pad,
        })
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every (column-row, column-col, input offset) triple inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.col_cols();
        for c in 0..self.in_c {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = (c * self.in_h + iy as usize) * self.in_w + ix as usize;
                            f(row * cols + oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|dst, src| cols[dst] = x[src]);
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|src, dst| dx[dst] += cols[src]);
    }
}
