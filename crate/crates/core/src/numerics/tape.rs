//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op appends one node whose inputs are strictly earlier nodes, so the
//! record is already in topological order and `backward` is a single reverse
//! sweep. Activations use a channels-last layout: `[batch, time, joint, channel]`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::gemm::{gemm, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Probability floor applied inside the negative log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    MatMul {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst {
        x: Var,
        factor: Arc<Vec<f64>>,
    },
    Abs(Var),
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanMiddle(Var),
    GraphMix {
        x: Var,
        adj: Arc<Tensor>,
    },
    TemporalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNormTrain(Box<BnSaved>),
    BatchNormEval(Box<BnSaved>),
    LogSoftmax(Var),
    Nll {
        logp: Var,
        labels: Vec<usize>,
        clamped: Vec<bool>,
    },
    TileContext {
        c: Var,
        pe: Var,
    },
    RepeatTime {
        x: Var,
        steps: usize,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    Stack(Vec<Var>),
    Reshape(Var),
}

struct BnSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    /// Normalized input, kept for the backward pass (train mode only).
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch mean and biased batch variance (train mode only).
    mean: Vec<f64>,
    var: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Batch statistics observed by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over the normalized rows.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Ordered record of executed primitive ops. One training step owns one tape.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index]
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        if cfg!(debug_assertions) && !value.all_finite() {
            let finite_inputs = inputs.iter().all(|&v| self.value(v).all_finite());
            debug_assert!(!finite_inputs, "non-finite output from finite inputs");
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Var { tape: self.id, index }
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool, name: Option<String>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            name,
        });
        Var { tape: self.id, index }
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// An anonymous leaf; its gradient is available through [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    /// A named trainable leaf; its gradient is reported under `path`.
    pub fn param(&mut self, path: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(value, true, Some(path.into()))
    }

    // ---- primitive ops -------------------------------------------------

    /// `[..., k] · [k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || ws[0] != k {
            return shape_err(format!("matmul {xs:?} by {ws:?}"));
        }
        let n = ws[1];
        let rows = self.value(x).numel() / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(
            self.value(x).data(),
            View::dense(rows, k),
            self.value(w).data(),
            View::dense(k, n),
            0.0,
            &mut out,
            View::dense(rows, n),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { x, w }, &[x, w]))
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return shape_err(format!("bias {:?} for last dim {n}", self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("{what} {:?} with {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// Elementwise product with a fixed factor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).numel() {
            return shape_err("mul_const factor length");
        }
        let data = self.value(x).data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(
            out,
            Op::MulConst {
                x,
                factor: Arc::new(factor),
            },
            &[x],
        ))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Sum over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.rows().map(|r| r.iter().sum()).collect();
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data).expect("sum_last shape");
        self.push(out, Op::SumLast(x), &[x])
    }

    /// Mean over every axis between the first and the last: `[B, ..., C] -> [B, C]`.
    pub fn mean_middle(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return shape_err("mean_middle needs rank >= 2");
        }
        let b = t.shape()[0];
        let c = t.last_dim();
        let inner = t.numel() / (b * c).max(1);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let acc = &mut out[bi * c..(bi + 1) * c];
            for row in t.data()[bi * inner * c..(bi + 1) * inner * c].chunks_exact(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv = 1.0 / inner as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        Ok(self.push(Tensor::new([b, c], out)?, Op::MeanMiddle(x), &[x]))
    }

    /// Mixes the joint axis with a fixed `[J, J]` matrix: for `x` of shape
    /// `[..., J, C]`, `out[.., j, :] = Σ_k adj[j, k] · x[.., k, :]`.
    pub fn graph_mix(&mut self, x: Var, adj: Arc<Tensor>) -> Result<Var> {
        let t = self.value(x);
        let j = adj.shape()[0];
        if adj.shape() != [j, j] || t.rank() < 2 || t.shape()[t.rank() - 2] != j {
            return shape_err(format!("graph_mix {:?} with adjacency {:?}", t.shape(), adj.shape()));
        }
        let c = t.last_dim();
        let out = mix_joints(t.data(), adj.data(), j, c, false);
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::GraphMix { x, adj }, &[x]))
    }

    /// Temporal convolution with zero "same" padding.
    ///
    /// `x: [B, T, J, Cin]`, `w: [ks, Cin, Cout]`, `b: [Cout]` → `[B, T, J, Cout]`.
    /// Weights are shared across joints; `ks` must be odd.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 3 || ws[1] != xs[3] {
            return shape_err(format!("temporal_conv input {xs:?} weights {ws:?}"));
        }
        let (bsz, t, j, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (ks, cout) = (ws[0], ws[2]);
        if ks % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {ks} must be odd")));
        }
        if self.shape(b) != [cout] {
            return shape_err("temporal_conv bias");
        }
        let mut out = vec![0.0; bsz * t * j * cout];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for bi in 0..bsz {
            for k in 0..ks {
                let Some((t0, t1, src)) = conv_tap_range(t, ks, k) else {
                    continue;
                };
                let rows = (t1 - t0) * j;
                gemm(
                    xd,
                    View::dense(rows, cin).at((bi * t + src) * j * cin),
                    wd,
                    View::dense(cin, cout).at(k * cin * cout),
                    1.0,
                    &mut out,
                    View::dense(rows, cout).at((bi * t + t0) * j * cout),
                );
            }
        }
        let out = Tensor::new([bsz, t, j, cout], out)?;
        Ok(self.push(out, Op::TemporalConv { x, w, b }, &[x, w, b]))
    }

    /// Batch normalization with batch statistics over all rows of `[..., C]`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        self.check_bn_params(gamma, beta, c)?;
        let t = self.value(x);
        let n = t.numel() / c;
        if n == 0 {
            return shape_err("batch_norm over zero rows");
        }
        let mut mean = vec![0.0; c];
        for row in t.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in t.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.rows() {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + bt[ch]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let saved = BnSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mean,
            var,
        };
        Ok(self.push(out, Op::BatchNormTrain(Box::new(saved)), &[x, gamma, beta]))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(x).last_dim();
        self.check_bn_params(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm running statistics");
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.rows() {
            for ch in 0..c {
                out.push(g[ch] * ((row[ch] - running_mean[ch]) * inv_std[ch]) + bt[ch]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let saved = BnSaved {
            x,
            gamma,
            beta,
            xhat: Vec::new(),
            inv_std,
            mean: running_mean.to_vec(),
            var: Vec::new(),
        };
        Ok(self.push(out, Op::BatchNormEval(Box::new(saved)), &[x, gamma, beta]))
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "batch_norm parameters {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(())
    }

    /// Statistics computed by a train-mode batch normalization node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        match &self.node(v).op {
            Op::BatchNormTrain(s) => Some(BatchStats {
                mean: s.mean.clone(),
                var: s.var.clone(),
                count: s.xhat.len() / s.mean.len().max(1),
            }),
            _ => None,
        }
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.rows() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("log_softmax shape");
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    ///
    /// Probabilities below [`PROB_FLOOR`] are clamped there; clamped rows pass
    /// no gradient and are reported by [`Tape::clamped_rows`].
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logp);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return shape_err(format!("nll over {:?} with {} labels", t.shape(), labels.len()));
        }
        let c = t.shape()[1];
        let floor = PROB_FLOOR.ln();
        let mut total = 0.0;
        let mut clamped = Vec::with_capacity(labels.len());
        for (row, &l) in t.rows().zip(labels) {
            if l >= c {
                return Err(Error::InvalidArgument(format!("label {l} out of {c} classes")));
            }
            let lp = row[l];
            clamped.push(lp < floor);
            total -= lp.max(floor);
        }
        let out = Tensor::scalar(total / labels.len().max(1) as f64);
        Ok(self.push(
            out,
            Op::Nll {
                logp,
                labels: labels.to_vec(),
                clamped,
            },
            &[logp],
        ))
    }

    /// Number of rows whose probability hit the floor in an `nll` node.
    pub fn clamped_rows(&self, v: Var) -> usize {
        match &self.node(v).op {
            Op::Nll { clamped, .. } => clamped.iter().filter(|&&c| c).count(),
            _ => 0,
        }
    }

    /// `out[b, t, j, :] = c[b, :] + pe[t, :]` for `joints` identical joints.
    pub fn tile_context(&mut self, c: Var, pe: Var, joints: usize) -> Result<Var> {
        let (cs, ps) = (self.shape(c).to_vec(), self.shape(pe).to_vec());
        if cs.len() != 2 || ps.len() != 2 || cs[1] != ps[1] {
            return shape_err(format!("tile_context {cs:?} with {ps:?}"));
        }
        let (b, d, m) = (cs[0], cs[1], ps[0]);
        let (cd, pd) = (self.value(c).data(), self.value(pe).data());
        let mut out = Vec::with_capacity(b * m * joints * d);
        for bi in 0..b {
            let crow = &cd[bi * d..(bi + 1) * d];
            for t in 0..m {
                let prow = &pd[t * d..(t + 1) * d];
                for _ in 0..joints {
                    out.extend(crow.iter().zip(prow).map(|(x, y)| x + y));
                }
            }
        }
        let out = Tensor::new([b, m, joints, d], out)?;
        Ok(self.push(out, Op::TileContext { c, pe }, &[c, pe]))
    }

    /// Repeats `[B, ...]` along a new axis 1: `[B, steps, ...]`.
    pub fn repeat_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 1 {
            return shape_err("repeat_time on a scalar");
        }
        let b = t.shape()[0];
        let inner = t.numel() / b.max(1);
        let mut out = Vec::with_capacity(t.numel() * steps);
        for bi in 0..b {
            let src = &t.data()[bi * inner..(bi + 1) * inner];
            for _ in 0..steps {
                out.extend_from_slice(src);
            }
        }
        let mut shape = vec![b, steps];
        shape.extend_from_slice(&t.shape()[1..]);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::RepeatTime { x, steps }, &[x]))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err(format!("concat_last {sa:?} with {sb:?}"));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut out = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        for (ra, rb) in self.value(a).rows().zip(self.value(b).rows()) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::ConcatLast { a, b }, &[a, b]))
    }

    /// Stacks equally shaped `[B, ...]` values into `[B, n, ...]`.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.is_empty() || items.iter().any(|&v| self.shape(v) != s0.as_slice()) {
            return shape_err("stack of mismatched shapes");
        }
        let b = s0[0];
        let inner = self.value(first).numel() / b.max(1);
        let mut out = Vec::with_capacity(inner * b * items.len());
        for bi in 0..b {
            for &v in items {
                out.extend_from_slice(&self.value(v).data()[bi * inner..(bi + 1) * inner]);
            }
        }
        let mut shape = vec![b, items.len()];
        shape.extend_from_slice(&s0[1..]);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Stack(items.to_vec()), items))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ---- reverse sweep ------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.contains(loss) {
            return Err(Error::InvalidArgument("loss is not recorded on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        let mut named = BTreeMap::new();
        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
            let g = Tensor::new(node.value.shape().to_vec(), g)?;
            if let Some(name) = &node.name {
                match named.get_mut(name) {
                    None => {
                        named.insert(name.clone(), g.clone());
                    }
                    Some(acc) => add_into((acc as &mut Tensor).data_mut(), g.data()),
                }
            }
            leaves.push((i, g));
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
            named,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.index] {
            slot @ None => *slot = Some(contribution),
            Some(existing) => add_into(existing, &contribution),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.index].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul { x, w } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let rows = g.len() / n.max(1);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * k];
                    gemm(
                        g,
                        View::dense(rows, n),
                        self.value(*w).data(),
                        View::dense(k, n).t(),
                        0.0,
                        &mut dx,
                        View::dense(rows, k),
                    );
                    self.acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(
                        self.value(*x).data(),
                        View::dense(rows, k).t(),
                        g,
                        View::dense(rows, n),
                        0.0,
                        &mut dw,
                        View::dense(k, n),
                    );
                    self.acc(grads, *w, dw);
                }
            }
            Op::AddBias { x, b } => {
                self.acc(grads, *x, g.to_vec());
                let n = self.value(*b).numel();
                self.acc_with(grads, *b, |db| {
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.acc(grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::MulConst { x, factor } => {
                self.acc(grads, *x, g.iter().zip(factor.iter()).map(|(g, f)| g * f).collect())
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, g.iter().zip(xv).map(|(g, v)| g * sign(*v)).collect());
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::SumLast(x) => {
                let n = self.value(*x).last_dim();
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.acc(grads, *x, d);
            }
            Op::MeanMiddle(x) => {
                let xs = self.value(*x);
                let (b, c) = (xs.shape()[0], xs.last_dim());
                let inner = xs.numel() / (b * c).max(1);
                let inv = 1.0 / inner as f64;
                let mut d = Vec::with_capacity(xs.numel());
                for bi in 0..b {
                    let row: Vec<f64> = g[bi * c..(bi + 1) * c].iter().map(|v| v * inv).collect();
                    for _ in 0..inner {
                        d.extend_from_slice(&row);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::GraphMix { x, adj } => {
                let j = adj.shape()[0];
                let c = out.last_dim();
                self.acc(grads, *x, mix_joints(g, adj.data(), j, c, true));
            }
            Op::TemporalConv { x, w, b } => self.temporal_conv_backward(*x, *w, *b, g, grads),
            Op::BatchNormTrain(s) => {
                let c = s.mean.len();
                let n = s.xhat.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, hrow) in g.chunks_exact(c).zip(s.xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * hrow[ch];
                    }
                }
                if self.needs(s.x) {
                    let gamma = self.value(s.gamma).data();
                    let nf = n as f64;
                    let coef: Vec<f64> = (0..c).map(|ch| gamma[ch] * s.inv_std[ch] / nf).collect();
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, hrow) in g.chunks_exact(c).zip(s.xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dx.push(coef[ch] * (nf * grow[ch] - sum_g[ch] - hrow[ch] * sum_gx[ch]));
                        }
                    }
                    self.acc(grads, s.x, dx);
                }
                self.acc(grads, s.gamma, sum_gx);
                self.acc(grads, s.beta, sum_g);
            }
            Op::BatchNormEval(s) => {
                let c = s.mean.len();
                let gamma = self.value(s.gamma).data();
                let xv = self.value(s.x).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Vec::with_capacity(g.len());
                for (grow, xrow) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                    for ch in 0..c {
                        let h = (xrow[ch] - s.mean[ch]) * s.inv_std[ch];
                        dgamma[ch] += grow[ch] * h;
                        dbeta[ch] += grow[ch];
                        dx.push(grow[ch] * gamma[ch] * s.inv_std[ch]);
                    }
                }
                self.acc(grads, s.x, dx);
                self.acc(grads, s.gamma, dgamma);
                self.acc(grads, s.beta, dbeta);
            }
            Op::LogSoftmax(x) => {
                let c = out.last_dim();
                let mut d = Vec::with_capacity(g.len());
                for (grow, lrow) in g.chunks_exact(c).zip(out.rows()) {
                    let total: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(lrow).map(|(gv, lp)| gv - lp.exp() * total));
                }
                self.acc(grads, *x, d);
            }
            Op::Nll { logp, labels, clamped } => {
                let c = self.value(*logp).last_dim();
                let scale = g[0] / labels.len().max(1) as f64;
                self.acc_with(grads, *logp, |d| {
                    for (row, (&l, &cl)) in labels.iter().zip(clamped).enumerate() {
                        if !cl {
                            d[row * c + l] -= scale;
                        }
                    }
                });
            }
            Op::TileContext { c, pe } => {
                let s = out.shape();
                let (b, m, j, d) = (s[0], s[1], s[2], s[3]);
                self.acc_with(grads, *c, |dc| {
                    for bi in 0..b {
                        let acc = &mut dc[bi * d..(bi + 1) * d];
                        for row in g[bi * m * j * d..(bi + 1) * m * j * d].chunks_exact(d) {
                            add_into(acc, row);
                        }
                    }
                });
                self.acc_with(grads, *pe, |dp| {
                    for bi in 0..b {
                        for t in 0..m {
                            let acc = &mut dp[t * d..(t + 1) * d];
                            let base = ((bi * m + t) * j) * d;
                            for row in g[base..base + j * d].chunks_exact(d) {
                                add_into(acc, row);
                            }
                        }
                    }
                });
            }
            Op::RepeatTime { x, steps } => {
                let xs = self.value(*x);
                let b = xs.shape()[0];
                let inner = xs.numel() / b.max(1);
                self.acc_with(grads, *x, |dx| {
                    for bi in 0..b {
                        let acc = &mut dx[bi * inner..(bi + 1) * inner];
                        for s in 0..*steps {
                            let base = (bi * steps + s) * inner;
                            add_into(acc, &g[base..base + inner]);
                        }
                    }
                });
            }
            Op::ConcatLast { a, b } => {
                let na = self.value(*a).last_dim();
                let nb = self.value(*b).last_dim();
                let rows = g.chunks_exact(na + nb);
                if self.needs(*a) {
                    self.acc(grads, *a, rows.clone().flat_map(|r| r[..na].iter().copied()).collect());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, rows.flat_map(|r| r[na..].iter().copied()).collect());
                }
            }
            Op::Stack(items) => {
                let b = out.shape()[0];
                let n = items.len();
                let inner = out.numel() / (b * n).max(1);
                for (s, &v) in items.iter().enumerate() {
                    if !self.needs(v) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(b * inner);
                    for bi in 0..b {
                        let base = (bi * n + s) * inner;
                        d.extend_from_slice(&g[base..base + inner]);
                    }
                    self.acc(grads, v, d);
                }
            }
        }
    }

    fn temporal_conv_backward(&self, x: Var, w: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let (bsz, t, j, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = self.shape(w);
        let (ks, cout) = (ws[0], ws[2]);
        self.acc_with(grads, b, |db| {
            for row in g.chunks_exact(cout) {
                add_into(db, row);
            }
        });
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        if self.needs(x) {
            let mut dx = vec![0.0; xd.len()];
            for bi in 0..bsz {
                for k in 0..ks {
                    let Some((t0, t1, src)) = conv_tap_range(t, ks, k) else {
                        continue;
                    };
                    let rows = (t1 - t0) * j;
                    gemm(
                        g,
                        View::dense(rows, cout).at((bi * t + t0) * j * cout),
                        wd,
                        View::dense(cin, cout).at(k * cin * cout).t(),
                        1.0,
                        &mut dx,
                        View::dense(rows, cin).at((bi * t + src) * j * cin),
                    );
                }
            }
            self.acc(grads, x, dx);
        }
        if self.needs(w) {
            let mut dw = vec![0.0; wd.len()];
            for k in 0..ks {
                for bi in 0..bsz {
                    let Some((t0, t1, src)) = conv_tap_range(t, ks, k) else {
                        continue;
                    };
                    let rows = (t1 - t0) * j;
                    gemm(
                        xd,
                        View::dense(rows, cin).at((bi * t + src) * j * cin).t(),
                        g,
                        View::dense(rows, cout).at((bi * t + t0) * j * cout),
                        1.0,
                        &mut dw,
                        View::dense(cin, cout).at(k * cin * cout),
                    );
                }
            }
            self.acc(grads, w, dw);
        }
    }
}

/// Output frames `[t0, t1)` read input frames starting at `src` for tap `k`.
fn conv_tap_range(t: usize, ks: usize, k: usize) -> Option<(usize, usize, usize)> {
    let pad = (ks - 1) / 2;
    let t0 = pad.saturating_sub(k);
    let t1 = (t + pad).saturating_sub(k).min(t);
    (t1 > t0).then(|| (t0, t1, t0 + k - pad))
}

fn mix_joints(x: &[f64], adj: &[f64], j: usize, c: usize, transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let block = j * c;
    for (src, dst) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for a in 0..j {
            let drow = &mut dst[a * c..(a + 1) * c];
            for k in 0..j {
                let coef = if transpose { adj[k * j + a] } else { adj[a * j + k] };
                if coef == 0.0 {
                    continue;
                }
                for (d, s) in drow.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                    *d += coef * s;
                }
            }
        }
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    tape: u64,
    leaves: Vec<(usize, Tensor)>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of an individual leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.iter().find(|(i, _)| *i == v.index).map(|(_, g)| g)
    }

    /// Gradients of named parameters, summed over every use of the same path.
    pub fn by_path(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_by_path(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_seeds_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(y), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constants_receive_no_gradient_entry() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param("x", Tensor::scalar(5.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.by_path()["x"].item(), 2.0);
    }

    #[test]
    fn repeated_path_gradients_are_summed() {
        let mut tape = Tape::new();
        let a = tape.param("w", Tensor::scalar(1.0));
        let b = tape.param("w", Tensor::scalar(1.0));
        let s = tape.add(a, b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.by_path()["w"].item(), 2.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        let w = tape.constant(Tensor::zeros([2, 1, 1]));
        let b = tape.constant(Tensor::zeros([1]));
        assert!(matches!(tape.temporal_conv(x, w, b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conv_tap_ranges() {
        // T=5, ks=3: tap 0 reads t-1, tap 1 reads t, tap 2 reads t+1
        assert_eq!(conv_tap_range(5, 3, 0), Some((1, 5, 0)));
        assert_eq!(conv_tap_range(5, 3, 1), Some((0, 5, 0)));
        assert_eq!(conv_tap_range(5, 3, 2), Some((0, 4, 1)));
        // T=2, ks=9: far taps fall entirely into padding
        assert_eq!(conv_tap_range(2, 9, 0), None);
        assert_eq!(conv_tap_range(2, 9, 4), Some((0, 2, 0)));
        assert_eq!(conv_tap_range(2, 9, 5), Some((0, 1, 1)));
    }
}
