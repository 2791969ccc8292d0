//! Operation tape and the reverse sweep.

use super::conv::{conv2d_backward, conv2d_forward, Conv2dConfig};
use super::loss::{cross_entropy, focal_loss, masked_smooth_l1, FocalConfig};
use super::norm::{bn_eval_backward, bn_eval_forward, bn_train_backward, bn_train_forward, BnSaved};
use super::pool::{maxpool_backward, maxpool_forward};
use super::spike::{atan_surrogate_grad, fire, FireMode, LifRecurrence, LifTrace};
use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        cfg: Conv2dConfig,
        fill: Option<Vec<S>>,
    },
    BnTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: BnSaved<S>,
    },
    BnEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Tensor<S>,
        var: Tensor<S>,
        eps: S,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
    },
    Lif {
        x: usize,
        w: Option<usize>,
        steps: usize,
        v0: Vec<S>,
        rec: LifRecurrence<S>,
        trace: LifTrace<S>,
    },
    Spike {
        v: usize,
        alpha: S,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: S,
    },
    SumAll {
        x: usize,
    },
    WeightedSum {
        x: usize,
        weights: Vec<S>,
    },
    SumTimeSpatial {
        x: usize,
        steps: usize,
    },
    SumTime {
        x: usize,
        steps: usize,
    },
    AnchorRows {
        x: usize,
        anchors: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        grad: Vec<S>,
    },
    Focal {
        logits: usize,
        grad: Vec<S>,
    },
    SmoothL1 {
        pred: usize,
        grad: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// traverse them in reverse.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    record: bool,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<S: Scalar>(w: S) -> S {
    S::one() / (S::one() + (-w).exp())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            consumed: false,
        }
    }

    /// A tape that keeps values but records nothing for backward.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            consumed: false,
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

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad && self.record, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        let op = if self.record && requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.record,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: Conv2dConfig,
        pad_fill: Option<&[S]>,
    ) -> Result<Var, TensorError> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &cfg,
            pad_fill,
        )?;
        let mut ins = vec![x.0, w.0];
        ins.extend(b.map(|b| b.0));
        let rg = self.rg(&ins);
        Ok(self.push(
            out,
            rg,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                cfg,
                fill: pad_fill.map(|f| f.to_vec()),
            },
        ))
    }

    /// Train-mode batch norm. `running_mean`/`running_var` are updated in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [S],
        running_var: &mut [S],
        momentum: S,
        eps: S,
    ) -> Result<Var, TensorError> {
        let (out, saved, unbiased) =
            bn_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        if running_mean.len() != saved.mean.len() || running_var.len() != unbiased.len() {
            return Err(shape_err("batch_norm", "running statistics do not match channels"));
        }
        for (r, m) in running_mean.iter_mut().zip(&saved.mean) {
            *r = (S::one() - momentum) * *r + momentum * *m;
        }
        for (r, v) in running_var.iter_mut().zip(&unbiased) {
            *r = (S::one() - momentum) * *r + momentum * *v;
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            rg,
            Op::BnTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                saved,
            },
        ))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<S>,
        var: &Tensor<S>,
        eps: S,
    ) -> Result<Var, TensorError> {
        let out = bn_eval_forward(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let op = if rg && self.record {
            Op::BnEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, rg, op))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (out, argmax) = maxpool_forward(self.value(x), kernel, stride, padding)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, rg, Op::MaxPool { x: x.0, argmax }))
    }

    /// Channel-wise concatenation of 4-D tensors, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self
            .value(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let d = self.value(*p).dims4()?;
            if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?}: only channels may differ", first, d),
                ));
            }
            channels.push(d[1]);
        }
        let [n, _, h, w] = first;
        let hw = h * w;
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (p, &c) in parts.iter().zip(&channels) {
                let src = self.value(*p).data();
                out.extend_from_slice(&src[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(vec![n, total, h, w], out)?, rg, Op::Concat { parts: idx }))
    }

    /// Multi-step LIF neuron over `x` shaped `(steps·N, ...)`, time-major.
    ///
    /// `leak_param`, when given, is a one-element tensor `w` with leak
    /// `sigmoid(w)`; otherwise `rec.leak` is used as is. Returns the spikes
    /// and the membrane after the last step.
    pub fn lif(
        &mut self,
        x: Var,
        steps: usize,
        v0: Option<&[S]>,
        leak_param: Option<Var>,
        mut rec: LifRecurrence<S>,
    ) -> Result<(Var, Vec<S>), TensorError> {
        let xv = self.value(x);
        if steps == 0 || xv.shape().first().is_none_or(|n| n % steps != 0) {
            return Err(shape_err(
                "lif",
                format!("leading dim of {:?} not divisible by {} steps", xv.shape(), steps),
            ));
        }
        let per_step = xv.len() / steps;
        let v0 = match v0 {
            Some(v) if v.len() == per_step => v.to_vec(),
            Some(v) => {
                return Err(shape_err(
                    "lif",
                    format!("state has {} values, step has {}", v.len(), per_step),
                ))
            }
            None => vec![rec.v_reset; per_step],
        };
        if let Some(w) = leak_param {
            rec.leak = sigmoid(self.value(w).data()[0]);
        }
        let trace = rec.forward(xv.data(), steps, &v0);
        let out = Tensor::new(xv.shape().to_vec(), trace.spikes.clone())?;
        let final_v = trace.final_v.clone();
        let mut ins = vec![x.0];
        ins.extend(leak_param.map(|w| w.0));
        let rg = self.rg(&ins);
        let var = self.push(
            out,
            rg,
            Op::Lif {
                x: x.0,
                w: leak_param.map(|w| w.0),
                steps,
                v0,
                rec,
                trace,
            },
        );
        Ok((var, final_v))
    }

    /// Heaviside step with the ATan surrogate in backward.
    pub fn spike(&mut self, v: Var, alpha: S) -> Var {
        let out = self.value(v).map(|x| fire(x, alpha, FireMode::Heaviside));
        let rg = self.rg(&[v.0]);
        self.push(out, rg, Op::Spike { v: v.0, alpha })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x.0]);
        self.push(out, rg, Op::Scale { x: x.0, factor })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x.0]);
        self.push(out, rg, Op::SumAll { x: x.0 })
    }

    /// Scalar `Σ x·w` against constant weights of the same length.
    pub fn weighted_sum(&mut self, x: Var, weights: &[S]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(shape_err("weighted_sum", format!("{} values, {} weights", xv.len(), weights.len())));
        }
        let out = Tensor::scalar(xv.data().iter().zip(weights).map(|(a, b)| *a * *b).sum());
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            out,
            rg,
            Op::WeightedSum {
                x: x.0,
                weights: weights.to_vec(),
            },
        ))
    }

    /// `(steps·N, C, H, W)` → `(N, C)`: sum over space, then over time.
    pub fn sum_time_spatial(&mut self, x: Var, steps: usize) -> Result<Var, TensorError> {
        let [tn, c, h, w] = self.value(x).dims4()?;
        if steps == 0 || tn % steps != 0 {
            return Err(shape_err("sum_time_spatial", "batch not divisible by steps"));
        }
        let n = tn / steps;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); n * c];
        for t in 0..steps {
            for s in 0..n {
                for ch in 0..c {
                    let off = ((t * n + s) * c + ch) * hw;
                    let plane: S = src[off..off + hw].iter().copied().sum();
                    out[s * c + ch] = out[s * c + ch] + plane;
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, rg, Op::SumTimeSpatial { x: x.0, steps }))
    }

    /// `(steps·N, ...)` → `(N, ...)` by summing the time slices.
    pub fn sum_time(&mut self, x: Var, steps: usize) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        if steps == 0 || shape.is_empty() || !shape[0].is_multiple_of(steps) {
            return Err(shape_err("sum_time", "batch not divisible by steps"));
        }
        let n = shape[0] / steps;
        let per = self.value(x).len() / steps;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); per];
        for t in 0..steps {
            for (o, v) in out.iter_mut().zip(&src[t * per..(t + 1) * per]) {
                *o = *o + *v;
            }
        }
        let mut new_shape = shape;
        new_shape[0] = n;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(new_shape, out)?, rg, Op::SumTime { x: x.0, steps }))
    }

    /// `(N, A·P, H, W)` → `(N, H·W·A, P)`; rows ordered by cell then anchor.
    pub fn anchor_rows(&mut self, x: Var, anchors: usize) -> Result<Var, TensorError> {
        let [n, ap, h, w] = self.value(x).dims4()?;
        if anchors == 0 || ap % anchors != 0 {
            return Err(shape_err("anchor_rows", format!("{} channels for {} anchors", ap, anchors)));
        }
        let p = ap / anchors;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for s in 0..n {
            for a in 0..anchors {
                for k in 0..p {
                    let ch = a * p + k;
                    for cell in 0..hw {
                        out[((s * hw + cell) * anchors + a) * p + k] = src[(s * ap + ch) * hw + cell];
                    }
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![n, hw * anchors, p], out)?, rg, Op::AnchorRows { x: x.0, anchors }))
    }

    /// Concatenates `(N, M_i, P)` tensors along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut dims = Vec::new();
        for p in parts {
            match self.value(*p).shape() {
                [n, m, w] => dims.push((*n, *m, *w)),
                s => return Err(shape_err("concat_rows", format!("expected 3-D, got {:?}", s))),
            }
        }
        let (n, _, width) = *dims.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        if dims.iter().any(|d| d.0 != n || d.2 != width) {
            return Err(shape_err("concat_rows", format!("{:?}", dims)));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(n * total * width);
        for s in 0..n {
            for (p, d) in parts.iter().zip(&dims) {
                let block = d.1 * width;
                out.extend_from_slice(&self.value(*p).data()[s * block..(s + 1) * block]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(vec![n, total, width], out)?, rg, Op::ConcatRows { parts: idx }))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(logits);
        let [n, k] = match v.shape() {
            [n, k] => [*n, *k],
            s => return Err(shape_err("cross_entropy", format!("expected (N, K), got {:?}", s))),
        };
        if labels.len() != n || labels.iter().any(|l| *l >= k) {
            return Err(shape_err("cross_entropy", "labels do not match logits"));
        }
        let (loss, grad) = cross_entropy(v.data(), k, labels);
        let rg = self.rg(&[logits.0]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits: logits.0, grad }))
    }

    /// Softmax focal loss over rows of `(N, M, K+1)` logits, divided by
    /// `max(1, positives)`. Target `0` is background.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], cfg: &FocalConfig) -> Result<Var, TensorError> {
        let v = self.value(logits);
        let classes = *v.shape().last().unwrap_or(&0);
        if classes == 0 || v.len() != targets.len() * classes || targets.iter().any(|t| *t >= classes) {
            return Err(shape_err("focal_loss", "targets do not match logits"));
        }
        let positives = targets.iter().filter(|t| **t != 0).count().max(1);
        let (loss, grad) = focal_loss(v.data(), classes, targets, cfg, S::from_f64(positives as f64));
        let rg = self.rg(&[logits.0]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Focal { logits: logits.0, grad }))
    }

    /// Smooth-L1 between `(N, M, W)` predictions and targets on masked rows,
    /// divided by `max(1, positives)`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<S>, mask: &[bool]) -> Result<Var, TensorError> {
        let v = self.value(pred);
        if v.shape() != target.shape() {
            return Err(shape_err("smooth_l1", format!("{:?} vs {:?}", v.shape(), target.shape())));
        }
        let width = *v.shape().last().unwrap_or(&1);
        if mask.len() * width != v.len() {
            return Err(shape_err("smooth_l1", "mask does not match rows"));
        }
        let positives = mask.iter().filter(|m| **m).count().max(1);
        let (loss, grad) = masked_smooth_l1(v.data(), target.data(), mask, width, S::from_f64(positives as f64));
        let rg = self.rg(&[pred.0]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::SmoothL1 { pred: pred.0, grad }))
    }

    fn accumulate(&mut self, idx: usize, g: Vec<S>) {
        let node = &mut self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
            None => node.grad = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`. Each record is consumed once; a
    /// second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.record || self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = vec![S::one(); self.nodes[loss.0].value.len()];
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let contributions = self.backprop_op(i, &op, &g)?;
            for (idx, grad) in contributions {
                self.accumulate(idx, grad);
            }
        }
        Ok(())
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn backprop_op(&self, node: usize, op: &Op<S>, g: &[S]) -> Result<Vec<(usize, Vec<S>)>, TensorError> {
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, cfg, fill } => {
                let (dx, dw, db) = conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    cfg,
                    fill.as_deref(),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                )?;
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
            }
            Op::BnTrain { x, gamma, beta, saved } => {
                let (dx, dg, db) = bn_train_backward(&self.nodes[*x].value, &self.nodes[*gamma].value, saved, g);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (dx, dg, db) =
                    bn_eval_backward(&self.nodes[*x].value, &self.nodes[*gamma].value, mean, var, *eps, g);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, maxpool_backward(self.nodes[*x].value.len(), argmax, g)));
            }
            Op::Concat { parts } => {
                let [n, total, h, w] = self.nodes[node].value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    let mut d = Vec::with_capacity(n * c * hw);
                    for s in 0..n {
                        let base = (s * total + offset) * hw;
                        d.extend_from_slice(&g[base..base + c * hw]);
                    }
                    out.push((p, d));
                    offset += c;
                }
            }
            Op::Lif {
                x,
                w,
                steps,
                v0,
                rec,
                trace,
            } => {
                let xs = self.nodes[*x].value.data();
                let (dx, dk) = rec.backward(xs, *steps, v0, trace, g);
                out.push((*x, dx));
                if let Some(w) = w {
                    let k = rec.leak;
                    out.push((*w, vec![dk * k * (S::one() - k)]));
                }
            }
            Op::Spike { v, alpha } => {
                let vs = self.nodes[*v].value.data();
                out.push((*v, vs.iter().zip(g).map(|(x, g)| *g * atan_surrogate_grad(*x, *alpha)).collect()));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Scale { x, factor } => out.push((*x, g.iter().map(|v| *v * *factor).collect())),
            Op::SumAll { x } => out.push((*x, vec![g[0]; self.nodes[*x].value.len()])),
            Op::WeightedSum { x, weights } => out.push((*x, weights.iter().map(|w| *w * g[0]).collect())),
            Op::SumTimeSpatial { x, steps } => {
                let [tn, c, h, w] = self.nodes[*x].value.dims4()?;
                let n = tn / steps;
                let hw = h * w;
                let mut d = vec![S::zero(); tn * c * hw];
                for t in 0..*steps {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = ((t * n + s) * c + ch) * hw;
                            d[off..off + hw].iter_mut().for_each(|v| *v = g[s * c + ch]);
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::SumTime { x, steps } => {
                let mut d = Vec::with_capacity(g.len() * steps);
                for _ in 0..*steps {
                    d.extend_from_slice(g);
                }
                out.push((*x, d));
            }
            Op::AnchorRows { x, anchors } => {
                let [n, ap, h, w] = self.nodes[*x].value.dims4()?;
                let p = ap / anchors;
                let hw = h * w;
                let mut d = vec![S::zero(); g.len()];
                for s in 0..n {
                    for a in 0..*anchors {
                        for k in 0..p {
                            let ch = a * p + k;
                            for cell in 0..hw {
                                d[(s * ap + ch) * hw + cell] = g[((s * hw + cell) * anchors + a) * p + k];
                            }
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::ConcatRows { parts } => {
                let shape = self.nodes[node].value.shape();
                let (n, total, width) = (shape[0], shape[1], shape[2]);
                let mut offset = 0;
                for &p in parts {
                    let m = self.nodes[p].value.shape()[1];
                    let mut d = Vec::with_capacity(n * m * width);
                    for s in 0..n {
                        let base = (s * total + offset) * width;
                        d.extend_from_slice(&g[base..base + m * width]);
                    }
                    out.push((p, d));
                    offset += m;
                }
            }
            Op::CrossEntropy { logits, grad } | Op::Focal { logits, grad } => {
                out.push((*logits, grad.iter().map(|v| *v * g[0]).collect()));
            }
            Op::SmoothL1 { pred, grad } => out.push((*pred, grad.iter().map(|v| *v * g[0]).collect())),
        }
        Ok(out)
    }
}
