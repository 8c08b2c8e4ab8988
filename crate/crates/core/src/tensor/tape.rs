use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Param, ParamId, Tensor};
use crate::error::{invalid, shape_err, PoeError, Result};
use crate::instrument;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the form folded into running statistics.
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f32> },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, batch: bool },
    GlobalAvgPool { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    ConcatCols { parts: Vec<Var> },
    GatherCols { x: Var, idx: Vec<usize> },
    LogSoftmax { x: Var },
    Softmax { x: Var },
    KlDiv { p: Var, log_q: Var },
    L1 { a: Var, b: Var },
    CrossEntropy { x: Var, labels: Vec<usize>, probs: Vec<f32> },
    WeightedSum { x: Var, w: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of forward operations. Backward replays it in reverse and
/// consumes the tape.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            record: true,
        }
    }

    /// A forward-only tape: nothing requires grad and no backward state is saved.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
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

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A free leaf that collects a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// Registers a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, p: &Param, trainable: bool) -> Result<Var> {
        let v = self.push(p.value.clone(), Op::Leaf, trainable, "param")?;
        if trainable && self.record {
            self.params.push((v, p.id()));
        }
        Ok(v)
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0) {
            return shape_err(format!("matmul {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg, "matmul")
    }

    /// `x[N,F] + b[F]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.rank() != 1 || tx.dim(1) != tb.dim(0) {
            return shape_err(format!("add_bias {:?} + {:?}", tx.shape(), tb.shape()));
        }
        let f = tb.dim(0);
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias { x, b }, rg, "add_bias")
    }

    /// Convolution of `x[N,C,H,W]` with `w[O,C,k,k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 || tx.dim(1) != tw.dim(1) || tw.dim(2) != tw.dim(3) {
            return shape_err(format!("conv2d {:?} * {:?}", tx.shape(), tw.shape()));
        }
        if stride == 0 || tx.dim(2) + 2 * pad < tw.dim(2) || tx.dim(3) + 2 * pad < tw.dim(2) {
            return shape_err(format!("conv2d geometry {:?} k={} s={stride}", tx.shape(), tw.dim(2)));
        }
        let geom = ConvGeom {
            n: tx.dim(0),
            c: tx.dim(1),
            h: tx.dim(2),
            w: tx.dim(3),
            k: tw.dim(2),
            stride,
            pad,
        };
        let o = tw.dim(0);
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let cols = kernels::im2col(tx.data(), geom);
        let ncols = geom.col_cols();
        let mut out_c = vec![0.0; o * ncols];
        kernels::gemm(o, geom.col_rows(), ncols, tw.data(), false, &cols, false, 0.0, &mut out_c);
        let out = kernels::channels_to_batch(&out_c, geom.n, o, ho * wo);
        let rg = self.rg(x) || self.rg(w);
        let cols = if rg && self.record { cols } else { Vec::new() };
        self.push(
            Tensor::new(vec![geom.n, o, ho, wo], out)?,
            Op::Conv2d { x, w, geom, cols },
            rg,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg, "relu")
    }

    /// Per-channel batch norm over `[N,C,...]`. With `running = None` the batch
    /// statistics normalize and are returned; otherwise the given running
    /// `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return shape_err(format!("batch_norm on {:?}", tx.shape()));
        }
        let (n, c) = (tx.dim(0), tx.dim(1));
        let s: usize = tx.shape()[2..].iter().product();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != c || tb.len() != c {
            return shape_err(format!("batch_norm params for {c} channels"));
        }
        let m = n * s;
        let xd = tx.data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return shape_err("batch_norm running stats");
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return invalid("batch_norm in batch mode needs at least two values per channel");
                }
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        acc += xd[(ni * c + ci) * s..][..s].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0f64;
                    for ni in 0..n {
                        sq += xd[(ni * c + ci) * s..][..s]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ci] = mu as f32;
                    var[ci] = (sq / m as f64) as f32;
                }
                let unbiased = var.iter().map(|v| v * m as f32 / (m - 1) as f32).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * s;
                let (g, b, mu, is) = (tg.data()[ci], tb.data()[ci], mean[ci], inv_std[ci]);
                for j in off..off + s {
                    let h = (xd[j] - mu) * is;
                    xhat[j] = h;
                    out[j] = g * h + b;
                }
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, inv_std) = if rg && self.record { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        let batch = stats.is_some();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch },
            rg,
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// `[N,C,H,W]` → `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return shape_err(format!("global_avg_pool on {:?}", tx.shape()));
        }
        let (n, c) = (tx.dim(0), tx.dim(1));
        let s = tx.dim(2) * tx.dim(3);
        let out: Vec<f32> = tx
            .data()
            .chunks(s)
            .map(|plane| plane.iter().sum::<f32>() / s as f32)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool { x }, rg, "global_avg_pool")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.data_mut().iter_mut().zip(tb.data()).for_each(|(o, v)| *o += v);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg, "add")
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg, "scale")
    }

    /// Joins 2-D tensors `[N,F_i]` along the class axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat of zero tensors");
        }
        let n = self.value(parts[0]).dim(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.dim(0) != n {
                return shape_err(format!("concat_cols part {:?}", t.shape()));
            }
            widths.push(t.dim(1));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols { parts: parts.to_vec() },
            rg,
            "concat_cols",
        )
    }

    /// Selects columns `idx` of a 2-D tensor, in the given order.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return shape_err(format!("gather_cols on {:?}", tx.shape()));
        }
        let f = tx.dim(1);
        if let Some(bad) = idx.iter().find(|&&i| i >= f) {
            return Err(PoeError::Domain(format!("column {bad} out of range for width {f}")));
        }
        let n = tx.dim(0);
        let mut out = Vec::with_capacity(n * idx.len());
        for i in 0..n {
            let row = tx.row(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, idx.len()], out)?,
            Op::GatherCols { x, idx: idx.to_vec() },
            rg,
            "gather_cols",
        )
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = map_rows(self.value(x), super::functional::log_softmax_into)?;
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax { x }, rg, "log_softmax")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = map_rows(self.value(x), super::functional::softmax_into)?;
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, rg, "softmax")
    }

    /// `mean_rows Σ_j p_j (ln p_j − log_q_j)`, with `0·ln 0 = 0`.
    pub fn kl_div(&mut self, p: Var, log_q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(log_q));
        if tp.shape() != tq.shape() || tp.rank() != 2 {
            return shape_err(format!("kl_div {:?} vs {:?}", tp.shape(), tq.shape()));
        }
        let n = tp.dim(0);
        let mut total = 0.0f64;
        for (&pv, &lq) in tp.data().iter().zip(tq.data()) {
            if pv > 0.0 {
                if !lq.is_finite() {
                    return Err(PoeError::Domain("q is zero where p is positive".into()));
                }
                total += pv as f64 * ((pv as f64).ln() - lq as f64);
            }
        }
        let rg = self.rg(p) || self.rg(log_q);
        // Divergences are nonnegative; clamp round-off below zero.
        let value = (total / n as f64).max(0.0) as f32;
        self.push(Tensor::scalar(value), Op::KlDiv { p, log_q }, rg, "kl_div")
    }

    /// `mean_rows Σ_j |a_j − b_j|`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rank() != 2 {
            return shape_err(format!("l1 {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let n = ta.dim(0);
        let total: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs() as f64).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar((total / n as f64) as f32), Op::L1 { a, b }, rg, "l1")
    }

    /// Mean negative log-likelihood of `labels` under `softmax(x)`.
    pub fn cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.dim(0) != labels.len() {
            return shape_err(format!("cross_entropy {:?} with {} labels", tx.shape(), labels.len()));
        }
        let f = tx.dim(1);
        if let Some(bad) = labels.iter().find(|&&l| l >= f) {
            return Err(PoeError::Domain(format!("label {bad} out of range for {f} classes")));
        }
        let logp = map_rows(tx, super::functional::log_softmax_into)?;
        let n = labels.len();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(logp.row(i)[l] as f64))
            .sum();
        let rg = self.rg(x);
        let probs = if rg && self.record {
            logp.data().iter().map(|v| v.exp()).collect()
        } else {
            Vec::new()
        };
        self.push(
            Tensor::scalar((total / n as f64) as f32),
            Op::CrossEntropy { x, labels: labels.to_vec(), probs },
            rg,
            "cross_entropy",
        )
    }

    /// `Σ x ⊙ w` for a constant `w`.
    pub fn weighted_sum(&mut self, x: Var, w: &[f32]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != w.len() {
            return shape_err(format!("weighted_sum {:?} with {} weights", tx.shape(), w.len()));
        }
        let total: f64 = tx.data().iter().zip(w).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(total as f32),
            Op::WeightedSum { x, w: w.to_vec() },
            rg,
            "weighted_sum",
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return invalid(format!("backward from non-scalar {:?}", self.value(loss).shape()));
        }
        let Tape { nodes, params, .. } = self;
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, params: HashMap::new() });
        }
        grads[loss.0] = Some(vec![1.0]);
        instrument::note_grad_buffer();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, n, k, &g, false, tb.data(), true, 0.0, &mut ga);
                        accumulate(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, m, n, ta.data(), true, &g, false, 0.0, &mut gb);
                        accumulate(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::AddBias { x, b } => {
                    if nodes[b.0].requires_grad {
                        let f = nodes[b.0].value.len();
                        let mut gb = vec![0.0; f];
                        for row in g.chunks(f) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        accumulate(&mut grads, &nodes, *b, gb);
                    }
                    if nodes[x.0].requires_grad {
                        accumulate(&mut grads, &nodes, *x, g);
                    }
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let tw = &nodes[w.0].value;
                    let o = tw.dim(0);
                    let s = geom.out_h() * geom.out_w();
                    let g_c = kernels::batch_to_channels(&g, geom.n, o, s);
                    let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                    if nodes[w.0].requires_grad {
                        let mut gw = vec![0.0; o * rows];
                        kernels::gemm(o, ncols, rows, &g_c, false, cols, true, 0.0, &mut gw);
                        accumulate(&mut grads, &nodes, *w, gw);
                    }
                    if nodes[x.0].requires_grad {
                        let mut gcols = vec![0.0; rows * ncols];
                        kernels::gemm(rows, o, ncols, tw.data(), true, &g_c, false, 0.0, &mut gcols);
                        accumulate(&mut grads, &nodes, *x, kernels::col2im(&gcols, *geom));
                    }
                }
                Op::Relu { x } => {
                    if nodes[x.0].requires_grad {
                        let gx = g
                            .iter()
                            .zip(val.data())
                            .map(|(gv, &y)| if y > 0.0 { *gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                    let tx = &nodes[x.0].value;
                    let (n, c) = (tx.dim(0), tx.dim(1));
                    let s = tx.len() / (n * c);
                    let m = (n * s) as f32;
                    let mut sum_g = vec![0.0f32; c];
                    let mut sum_gx = vec![0.0f32; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * s;
                            for j in off..off + s {
                                sum_g[ci] += g[j];
                                sum_gx[ci] += g[j] * xhat[j];
                            }
                        }
                    }
                    if nodes[gamma.0].requires_grad {
                        accumulate(&mut grads, &nodes, *gamma, sum_gx.clone());
                    }
                    if nodes[beta.0].requires_grad {
                        accumulate(&mut grads, &nodes, *beta, sum_g.clone());
                    }
                    if nodes[x.0].requires_grad {
                        let gam = nodes[gamma.0].value.data();
                        let mut gx = vec![0.0f32; g.len()];
                        for ni in 0..n {
                            for ci in 0..c {
                                let off = (ni * c + ci) * s;
                                let k = gam[ci] * inv_std[ci];
                                for j in off..off + s {
                                    gx[j] = if *batch {
                                        k * (g[j] - sum_g[ci] / m - xhat[j] * sum_gx[ci] / m)
                                    } else {
                                        k * g[j]
                                    };
                                }
                            }
                        }
                        accumulate(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if nodes[x.0].requires_grad {
                        let tx = &nodes[x.0].value;
                        let s = tx.dim(2) * tx.dim(3);
                        let mut gx = vec![0.0f32; tx.len()];
                        for (plane, gv) in gx.chunks_mut(s).zip(&g) {
                            plane.fill(gv / s as f32);
                        }
                        accumulate(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::Add { a, b } => {
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, &nodes, *b, g.clone());
                    }
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, &nodes, *a, g);
                    }
                }
                Op::Scale { x, c } => {
                    if nodes[x.0].requires_grad {
                        accumulate(&mut grads, &nodes, *x, g.iter().map(|v| v * c).collect());
                    }
                }
                Op::ConcatCols { parts } => {
                    let n = val.dim(0);
                    let total = val.dim(1);
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.dim(1);
                        if nodes[p.0].requires_grad {
                            let mut gp = Vec::with_capacity(n * w);
                            for i in 0..n {
                                gp.extend_from_slice(&g[i * total + offset..][..w]);
                            }
                            accumulate(&mut grads, &nodes, *p, gp);
                        }
                        offset += w;
                    }
                }
                Op::GatherCols { x, idx } => {
                    if nodes[x.0].requires_grad {
                        let tx = &nodes[x.0].value;
                        let (n, f) = (tx.dim(0), tx.dim(1));
                        let mut gx = vec![0.0f32; n * f];
                        for i in 0..n {
                            for (k, &j) in idx.iter().enumerate() {
                                gx[i * f + j] += g[i * idx.len() + k];
                            }
                        }
                        accumulate(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::LogSoftmax { x } => {
                    if nodes[x.0].requires_grad {
                        let f = val.dim(1);
                        let mut gx = vec![0.0f32; g.len()];
                        for ((gr, yr), out) in g.chunks(f).zip(val.data().chunks(f)).zip(gx.chunks_mut(f)) {
                            let sg: f32 = gr.iter().sum();
                            for j in 0..f {
                                out[j] = gr[j] - yr[j].exp() * sg;
                            }
                        }
                        accumulate(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::Softmax { x } => {
                    if nodes[x.0].requires_grad {
                        let f = val.dim(1);
                        let mut gx = vec![0.0f32; g.len()];
                        for ((gr, yr), out) in g.chunks(f).zip(val.data().chunks(f)).zip(gx.chunks_mut(f)) {
                            let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..f {
                                out[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        accumulate(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::KlDiv { p, log_q } => {
                    let (tp, tq) = (&nodes[p.0].value, &nodes[log_q.0].value);
                    let scale = g[0] / tp.dim(0) as f32;
                    if nodes[log_q.0].requires_grad {
                        let gq = tp.data().iter().map(|pv| -pv * scale).collect();
                        accumulate(&mut grads, &nodes, *log_q, gq);
                    }
                    if nodes[p.0].requires_grad {
                        let gp = tp
                            .data()
                            .iter()
                            .zip(tq.data())
                            .map(|(&pv, &lq)| if pv > 0.0 { (pv.ln() - lq + 1.0) * scale } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, &nodes, *p, gp);
                    }
                }
                Op::L1 { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let scale = g[0] / ta.dim(0) as f32;
                    let sign: Vec<f32> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(x, y)| {
                            if x > y {
                                scale
                            } else if x < y {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, &nodes, *b, sign.iter().map(|v| -v).collect());
                    }
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, &nodes, *a, sign);
                    }
                }
                Op::CrossEntropy { x, labels, probs } => {
                    if nodes[x.0].requires_grad {
                        let f = nodes[x.0].value.dim(1);
                        let scale = g[0] / labels.len() as f32;
                        let mut gx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                        for (i, &l) in labels.iter().enumerate() {
                            gx[i * f + l] -= scale;
                        }
                        accumulate(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::WeightedSum { x, w } => {
                    if nodes[x.0].requires_grad {
                        accumulate(&mut grads, &nodes, *x, w.iter().map(|v| v * g[0]).collect());
                    }
                }
            }
        }

        let mut by_param = HashMap::with_capacity(params.len());
        for (v, id) in params {
            if let Some(g) = grads[v.0].take() {
                let t = Tensor::new(nodes[v.0].value.shape().to_vec(), g)?.check_finite("backward")?;
                by_param.insert(id, t);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(PoeError::NonFinite("backward"));
                }
                debug_assert_eq!(g.len(), nodes[i].value.len());
            }
        }
        Ok(Gradients { grads, params: by_param })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], nodes: &[Node], v: Var, g: Vec<f32>) {
    debug_assert_eq!(g.len(), nodes[v.0].value.len());
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => {
            instrument::note_grad_buffer();
            *slot = Some(g);
        }
    }
}

fn map_rows(t: &Tensor, f: fn(&[f32], &mut [f32])) -> Result<Tensor> {
    if t.rank() != 2 || t.dim(1) == 0 {
        return shape_err(format!("row-wise op on {:?}", t.shape()));
    }
    let cols = t.dim(1);
    let mut out = vec![0.0f32; t.len()];
    for (src, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
        f(src, dst);
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a free leaf (see [`Tape::leaf`]).
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}
