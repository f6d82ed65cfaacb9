//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! [`Tape::backward`] walks it in reverse, so gradient accumulation order is
//! fixed by the tape and repeated runs are bit-identical.

mod check;
mod params;

pub use check::{grad_check, relative_error, GradCheckConfig, GradReport, ParamCheck};
pub use params::{ParamKind, ParamStore};

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::tensor::{
    self, Activation, BinaryOp, BnTrainSaved, ConvGeom, LayerNormSaved, Scalar, Shape, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise reduction across a list of same-shaped values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Min,
    Add,
}

enum Op<T: Scalar> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnTrainSaved<T>,
    },
    BnInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
    LayerNorm {
        gamma: Var,
        beta: Var,
        x: Var,
        saved: LayerNormSaved<T>,
    },
    Shuffle {
        x: Var,
        groups: usize,
    },
    Gap {
        x: Var,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Act {
        kind: Activation,
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    NarrowBatch {
        x: Var,
        start: usize,
    },
    StackBatch {
        parts: Vec<Var>,
    },
    Gate {
        x: Var,
        y: Var,
        w: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Reduce {
        kind: Reduce,
        views: Vec<Var>,
        /// Winning view per element for max/min.
        winner: Vec<u32>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a train-mode batch norm, for updating the
/// running estimates after the step.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    record: bool,
    consumed: bool,
    profile: Option<Vec<OpCost>>,
    branches: Option<BranchLog>,
}

/// Branch choices of the piecewise-linear operations (ReLU signs and
/// max/min winners) of one forward pass, in execution order.
pub type Branches = Arc<Vec<Vec<u32>>>;

enum BranchLog {
    Record(Vec<Vec<u32>>),
    Replay { choices: Branches, next: usize },
}

/// Multiply-accumulate count of one convolution or linear call, recorded by
/// a [`Tape::profiling`] tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpCost {
    /// Name of the weight parameter without its `.weight` suffix.
    pub layer: String,
    pub macs: u64,
    pub output: Shape,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
            consumed: false,
            profile: None,
            branches: None,
        }
    }

    /// A tape that keeps values but no backward state; [`Tape::backward`] on
    /// it yields no gradients.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    /// An inference tape that also records the cost of every convolution
    /// and linear layer; see [`Tape::take_profile`].
    pub fn profiling() -> Self {
        Self {
            profile: Some(Vec::new()),
            ..Self::inference()
        }
    }

    /// Records the branch taken by every ReLU and max/min; see
    /// [`Tape::take_branches`].
    pub fn recording_branches(mut self) -> Self {
        self.branches = Some(BranchLog::Record(Vec::new()));
        self
    }

    /// Forces every ReLU and max/min to take the branches recorded by an
    /// earlier pass of the same computation, which makes the forward a
    /// smooth function of its inputs around that pass.
    pub fn replaying_branches(mut self, choices: Branches) -> Self {
        self.branches = Some(BranchLog::Replay { choices, next: 0 });
        self
    }

    /// Branches recorded by a [`Tape::recording_branches`] tape.
    pub fn take_branches(&mut self) -> Branches {
        match self.branches.as_mut() {
            Some(BranchLog::Record(v)) => Arc::new(std::mem::take(v)),
            _ => Arc::default(),
        }
    }

    /// Logs `computed` when recording; when replaying, returns the recorded
    /// choice instead.
    fn branch(&mut self, computed: Vec<u32>) -> Vec<u32> {
        match self.branches.as_mut() {
            None => computed,
            Some(BranchLog::Record(v)) => {
                v.push(computed.clone());
                computed
            }
            Some(BranchLog::Replay { choices, next }) => {
                let c = choices
                    .get(*next)
                    .filter(|c| c.len() == computed.len())
                    .expect("replayed branches do not match the computation")
                    .clone();
                *next += 1;
                c
            }
        }
    }

    /// Costs recorded so far, in execution order.
    pub fn take_profile(&mut self) -> Vec<OpCost> {
        self.profile.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn record_cost(&mut self, w: Var, macs: u64, output: Shape) {
        if self.profile.is_none() {
            return;
        }
        let name = self
            .params
            .iter()
            .find(|(_, &v)| v == w)
            .map(|(n, _)| n.strip_suffix(".weight").unwrap_or(n).to_string())
            .unwrap_or_else(|| "<unnamed>".to_string());
        if let Some(p) = self.profile.as_mut() {
            p.push(OpCost {
                layer: name,
                macs,
                output,
            });
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that does not require a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input leaf whose gradient is wanted.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a named trainable parameter. Repeated calls with the same
    /// name return the same leaf, so a parameter shared by several branches
    /// accumulates a single gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.input(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    // -- operations ---------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = tensor::conv2d_forward(self.value(x), &geom, self.value(w), b.map(|b| self.value(b)))?;
        let ys = y.shape();
        let macs = (geom.kh * geom.kw * (geom.in_c / geom.groups) * geom.out_c) as u64 * (ys.n * ys.plane()) as u64;
        self.record_cost(w, macs, ys);
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::Conv { x, w, b, geom }, &ins))
    }

    /// Train-mode batch norm; also returns the batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BnBatchStats<T>)> {
        let (y, saved) =
            tensor::batch_norm_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        let stats = BnBatchStats {
            mean: saved.mean.clone(),
            var: saved.var.clone(),
        };
        let v = self.push(
            y,
            Op::BnTrain {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let y = tensor::batch_norm_infer(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            var,
            eps,
        )?;
        Ok(self.push(
            y,
            Op::BnInfer {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, saved) =
            tensor::layer_norm_channels(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let y = tensor::channel_shuffle(self.value(x), groups)?;
        Ok(self.push(y, Op::Shuffle { x, groups }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::Gap { x }, &[x]))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let mut y = tensor::binary(op, self.value(a), self.value(b))?;
        if op == BinaryOp::Max && self.branches.is_some() {
            // Broadcast both operands to the output shape to pick per element.
            let zero = Tensor::zeros(y.shape());
            let fa = tensor::binary(BinaryOp::Add, self.value(a), &zero)?;
            let fb = tensor::binary(BinaryOp::Add, self.value(b), &zero)?;
            let computed = fa.data().iter().zip(fb.data()).map(|(&x, &z)| u32::from(x < z)).collect();
            let choice = self.branch(computed);
            for (i, o) in y.data_mut().iter_mut().enumerate() {
                *o = if choice[i] == 0 { fa.data()[i] } else { fb.data()[i] };
            }
        }
        Ok(self.push(y, Op::Binary { op, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let mut y = tensor::activation(kind, self.value(x));
        if kind == Activation::Relu && self.branches.is_some() {
            let xv = self.value(x);
            let computed = xv.data().iter().map(|&v| u32::from(v > T::zero())).collect();
            let choice = self.branch(computed);
            let xv = self.value(x).clone();
            for ((o, &v), &c) in y.data_mut().iter_mut().zip(xv.data()).zip(&choice) {
                *o = if c == 1 { v } else { T::zero() };
            }
        }
        self.push(y, Op::Act { kind, x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = tensor::concat_channels(&ts)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = tensor::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(y, Op::Narrow { x, start }, &[x]))
    }

    pub fn split_channels(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        if total != self.shape(x).c {
            return Err(invalid(format!(
                "split widths {widths:?} sum to {total}, input has {} channels",
                self.shape(x).c
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.narrow_channels(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Batch elements `start..start + len`.
    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).batch_slice(start, len)?;
        Ok(self.push(y, Op::NarrowBatch { x, start }, &[x]))
    }

    /// Concatenates along the batch axis.
    pub fn stack_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = Tensor::stack_batch(&ts)?;
        Ok(self.push(
            y,
            Op::StackBatch {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// `y + w * (x - y)`.
    pub fn gate(&mut self, x: Var, y: Var, w: Var) -> Result<Var> {
        let out = tensor::gate(self.value(x), self.value(y), self.value(w))?;
        Ok(self.push(out, Op::Gate { x, y, w }, &[x, y, w]))
    }

    /// Fully connected layer on `(B, in, 1, 1)` rows with weight `(out, in, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let inner = xs.c * xs.plane();
        if ws.c * ws.plane() != inner {
            return Err(invalid(format!("linear: input {xs} does not match weight {ws}")));
        }
        let mut y = vec![T::zero(); xs.n * ws.n];
        tensor::matmul(
            xs.n,
            inner,
            ws.n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != ws.n {
                return Err(invalid(format!("linear: bias length {} vs {} outputs", bd.len(), ws.n)));
            }
            for row in y.chunks_mut(ws.n) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let y = Tensor::from_vec(Shape::vector(xs.n, ws.n), y)?;
        self.record_cost(w, (xs.n * inner * ws.n) as u64, y.shape());
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &ins))
    }

    /// Mean cross-entropy of `(B, K)` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let k = s.c * s.plane();
        if labels.len() != s.n {
            return Err(invalid(format!("{} labels for a batch of {}", labels.len(), s.n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(s.n * k);
        let mut loss = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let se: f64 = row.iter().map(|&v| (v - m).as_f64().exp()).sum();
            let lse = m.as_f64() + se.ln();
            loss += lse - row[label].as_f64();
            probs.extend(row.iter().map(|&v| T::c((v.as_f64() - lse).exp())));
        }
        let y = Tensor::scalar(T::c(loss / s.n as f64));
        Ok(self.push(
            y,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale { x, k }, &[x])
    }

    /// Elementwise max/min/sum over equally shaped values. Ties in max/min
    /// resolve to the earliest view.
    pub fn reduce(&mut self, kind: Reduce, views: &[Var]) -> Result<Var> {
        let first = *views
            .first()
            .ok_or_else(|| invalid("reduce needs at least one input"))?;
        let s = self.shape(first);
        for &v in views {
            if self.shape(v) != s {
                return Err(invalid(format!("reduce: {} vs {s}", self.shape(v))));
            }
        }
        let mut out = self.value(first).clone();
        let mut winner = vec![0u32; s.numel()];
        for (vi, &v) in views.iter().enumerate().skip(1) {
            for (i, (o, &x)) in out.data_mut().iter_mut().zip(self.value(v).data()).enumerate() {
                match kind {
                    Reduce::Add => *o += x,
                    Reduce::Max if x > *o => {
                        *o = x;
                        winner[i] = vi as u32;
                    }
                    Reduce::Min if x < *o => {
                        *o = x;
                        winner[i] = vi as u32;
                    }
                    _ => {}
                }
            }
        }
        if kind != Reduce::Add && self.branches.is_some() {
            winner = self.branch(winner);
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = self.nodes[views[winner[i] as usize].0].value.data()[i];
            }
        }
        Ok(self.push(
            out,
            Op::Reduce {
                kind,
                views: views.to_vec(),
                winner,
            },
            views,
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Propagates from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::InvalidState(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got shape {ls}")));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(Tensor::full(ls, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (v, dv) in self.local_grads(i, &g)? {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v);
        let vec_t = |c: usize, d: Vec<T>| Tensor::from_vec(Shape::vector(1, c), d);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = tensor::conv2d_backward(val(*x), geom, val(*w), g, self.needs(*x))?;
                let mut out = vec![(*w, dw)];
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dg, db) = tensor::batch_norm_train_backward(saved, val(*gamma).data(), g);
                let c = dg.len();
                vec![(*x, dx), (*gamma, vec_t(c, dg)?), (*beta, vec_t(c, db)?)]
            }
            Op::BnInfer {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (dx, dg, db) =
                    tensor::batch_norm_infer_backward(val(*x), val(*gamma).data(), mean, var, *eps, g)?;
                let c = dg.len();
                vec![(*x, dx), (*gamma, vec_t(c, dg)?), (*beta, vec_t(c, db)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dg, db) = tensor::layer_norm_channels_backward(saved, val(*gamma).data(), g);
                let c = dg.len();
                vec![(*x, dx), (*gamma, vec_t(c, dg)?), (*beta, vec_t(c, db)?)]
            }
            Op::Shuffle { x, groups } => vec![(*x, tensor::channel_shuffle_backward(g, *groups))],
            Op::Gap { x } => vec![(*x, tensor::global_avg_pool_backward(self.shape(*x), g))],
            Op::Binary { op, a, b } => {
                let (da, db) = tensor::binary_backward(*op, val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Act { kind, x } => {
                vec![(*x, tensor::activation_backward(*kind, val(*x), &node.value, g))]
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).c).collect();
                parts
                    .iter()
                    .copied()
                    .zip(tensor::split_channels(g, &widths)?)
                    .collect()
            }
            Op::Narrow { x, start } => {
                let xs = self.shape(*x);
                let len = g.shape().c;
                let p = xs.plane();
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    let dst = (n * xs.c + start) * p;
                    dx.data_mut()[dst..dst + len * p]
                        .copy_from_slice(&g.data()[n * len * p..(n + 1) * len * p]);
                }
                vec![(*x, dx)]
            }
            Op::NarrowBatch { x, start } => {
                let xs = self.shape(*x);
                let per = xs.c * xs.plane();
                let mut dx = Tensor::zeros(xs);
                dx.data_mut()[start * per..start * per + g.len()].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::StackBatch { parts } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.shape(p).n;
                    out.push((p, g.batch_slice(start, n)?));
                    start += n;
                }
                out
            }
            Op::Gate { x, y, w } => {
                let (dx, dy, dw) = tensor::gate_backward(val(*x), val(*y), val(*w), g);
                vec![(*x, dx), (*y, dy), (*w, dw)]
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let inner = xs.c * xs.plane();
                let mut out = Vec::new();
                let mut dw = vec![T::zero(); ws.n * inner];
                tensor::matmul(ws.n, xs.n, inner, g.data(), true, val(*x).data(), false, &mut dw, false);
                out.push((*w, Tensor::from_vec(ws, dw)?));
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xs.n * inner];
                    tensor::matmul(xs.n, ws.n, inner, g.data(), false, val(*w).data(), false, &mut dx, false);
                    out.push((*x, Tensor::from_vec(xs, dx)?));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); ws.n];
                    for row in g.data().chunks(ws.n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, vec_t(ws.n, db)?));
                }
                out
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = self.shape(*logits);
                let k = s.c * s.plane();
                let scale = g.data()[0] / T::c(s.n as f64);
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![(*logits, Tensor::from_vec(s, d)?)]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(self.shape(*x), g.data()[0]))],
            Op::Scale { x, k } => vec![(*x, g.map(|v| v * *k))],
            Op::Reduce {
                kind,
                views,
                winner,
            } => match kind {
                Reduce::Add => views.iter().map(|&v| (v, g.clone())).collect(),
                Reduce::Max | Reduce::Min => views
                    .iter()
                    .enumerate()
                    .map(|(vi, &v)| {
                        let mut d = g.clone();
                        for (dv, &win) in d.data_mut().iter_mut().zip(winner) {
                            if win as usize != vi {
                                *dv = T::zero();
                            }
                        }
                        (v, d)
                    })
                    .collect(),
            },
        })
    }
}

/// Result of one backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Gradients<T> {
    /// No gradients at all.
    fn default() -> Self {
        Self {
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf. `None` when the loss does not depend
    /// on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// `(name, gradient)` for every parameter registered on the tape, sorted
    /// by name.
    pub fn params(&self) -> Vec<(&str, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(n, &v)| self.wrt(v).map(|g| (n.as_str(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.input(t(Shape::new(1, 2, 2, 1), &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn relu_indicator() {
        let mut tape = Tape::new();
        let x = tape.input(t(Shape::new(1, 4, 1, 1), &[-1.0, 2.0, -0.5, 3.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::scalar(1.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::InvalidState(_))));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1)));
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shared_param_accumulates_once() {
        let mut tape = Tape::new();
        let w = Tensor::<f64>::scalar(3.0);
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::<f64>::zeros(Shape::vector(3, 4)));
        let loss = tape.cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(l, &[0, 1, 4]).is_err());
    }

    #[test]
    fn cross_entropy_large_margin() {
        let mut tape = Tape::new();
        let l = tape.input(t(Shape::vector(1, 4), &[1000.0, 0.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-12);
    }

    #[test]
    fn inference_tape_has_no_gradients() {
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::<f64>::scalar(2.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).is_none());
    }
}
