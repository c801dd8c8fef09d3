//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in execution order (Wengert list). Each
//! node stores its forward value; [`Tape::backward`] walks the list in reverse
//! and accumulates vector-Jacobian products. The op set is deliberately small:
//! window partitioning, tiling and channel concatenation are all expressed as
//! [`Tape::gather`] / [`Tape::concat`], so their gradients come for free.

use std::rc::Rc;

use crate::counter::OpCounter;
use crate::error::{HgfeError, Result};
use crate::tensor::{self, Activation, DType, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a vector along the last axis of every row.
    AddRowBias(Var, Var),
    Act(Var, Activation),
    SoftmaxRows(Var),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var, Vec<usize>),
    /// `out[k] = in[index[k]]`
    Gather(Var, Rc<[usize]>, Vec<usize>),
    /// Flat concatenation of all inputs.
    Concat(Vec<Var>),
    /// `out[i, j] = u[i] + v[j]`
    OuterSum(Var, Var),
    /// `out[c, i, j] = alpha[c] * low[i, j] + (1 - alpha[c]) * high[i, j]`
    ChannelMix {
        low: Var,
        high: Var,
        alpha: Var,
    },
    /// `out[i, c] = sum_j attn[c, i, j] * values[j, c]`
    ChannelAggregate {
        attn: Var,
        values: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::OuterSum(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::SoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Reshape(a, _)
            | Op::Gather(a, _, _) => vec![*a],
            Op::Concat(xs) => xs.clone(),
            Op::ChannelMix { low, high, alpha } => vec![*low, *high, *alpha],
            Op::ChannelAggregate { attn, values } => vec![*attn, *values],
        }
    }
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; all-zero if `var` does not influence the output.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// `true` if some path from `var` to the output was recorded.
    pub fn reaches(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    counter: OpCounter,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub fn count_pairwise(&mut self, n: u64) {
        self.counter.add_pairwise(n);
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, &self.values)?;
        self.counter.add_macs(mac_count(&op, &self.values));
        self.ops.push(op);
        self.values.push(value);
        Ok(Var(self.values.len() - 1))
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRowBias(a, bias))
    }

    pub fn activation(&mut self, a: Var, mode: Activation) -> Result<Var> {
        self.push(Op::Act(a, mode))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.push(Op::Gather(a, index, shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(HgfeError::EmptyInput("concat of zero tensors".into()));
        }
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn outer_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        self.push(Op::OuterSum(u, v))
    }

    pub fn channel_mix(&mut self, low: Var, high: Var, alpha: Var) -> Result<Var> {
        self.push(Op::ChannelMix { low, high, alpha })
    }

    pub fn channel_aggregate(&mut self, attn: Var, values: Var) -> Result<Var> {
        self.push(Op::ChannelAggregate { attn, values })
    }

    /// `sum(a * weights)` with `weights` recorded as a constant leaf.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let w = self.leaf(weights);
        let p = self.mul(a, w)?;
        self.sum(p)
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.values.len());
        for (op, recorded) in self.ops.iter().zip(&self.values) {
            let v = match op {
                Op::Leaf => recorded.clone(),
                _ => eval(op, &values)?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// `true` iff replaying reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(replayed.iter().zip(&self.values).all(|(a, b)| a.bit_eq(b)))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.values[output.0].is_scalar() {
            return Err(HgfeError::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.values[output.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(Tensor::full(self.values[output.0].shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.vjp(i, &g)? {
                accumulate(&mut grads[input.0], contrib);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }

    fn vjp(&self, node: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.values[v.0];
        let out = &self.values[node];
        let gd = g.data();
        Ok(match &self.ops[node] {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = tensor::matmul(g, &tensor::transpose(val(*b))?)?;
                let db = tensor::matmul(&tensor::transpose(val(*a))?, g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, tensor::transpose(g)?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, tensor::mul(g, val(*b))?), (*b, tensor::mul(g, val(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::AddRowBias(a, b) => {
                let n = val(*b).numel();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*a, g.clone()), (*b, grad(val(*b), db))]
            }
            Op::Act(a, mode) => {
                let x = val(*a).data();
                let y = out.data();
                let d = (0..gd.len()).map(|k| gd[k] * mode.derivative(x[k], y[k])).collect();
                vec![(*a, grad(val(*a), d))]
            }
            Op::SoftmaxRows(a) => {
                let cols = *out.shape().last().expect("softmax has rank >= 1");
                let mut d = vec![0.0; gd.len()];
                for ((drow, grow), yrow) in d.chunks_mut(cols).zip(gd.chunks(cols)).zip(out.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for k in 0..cols {
                        drow[k] = yrow[k] * (grow[k] - dot);
                    }
                }
                vec![(*a, grad(val(*a), d))]
            }
            Op::MeanRows(a) => {
                let (n, c) = val(*a).dims2()?;
                let inv = 1.0 / n as f64;
                let d = (0..n * c).map(|k| gd[k % c] * inv).collect();
                vec![(*a, grad(val(*a), d))]
            }
            Op::Sum(a) => vec![(*a, grad(val(*a), vec![gd[0]; val(*a).numel()]))],
            Op::Reshape(a, _) => vec![(*a, grad(val(*a), gd.to_vec()))],
            Op::Gather(a, index, _) => {
                let mut d = vec![0.0; val(*a).numel()];
                for (k, &src) in index.iter().enumerate() {
                    d[src] += gd[k];
                }
                vec![(*a, grad(val(*a), d))]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = val(*p).numel();
                        let piece = grad(val(*p), gd[offset..offset + n].to_vec());
                        offset += n;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::OuterSum(u, v) => {
                let n = val(*u).numel();
                let m = val(*v).numel();
                let mut du = vec![0.0; n];
                let mut dv = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        du[i] += gd[i * m + j];
                        dv[j] += gd[i * m + j];
                    }
                }
                vec![(*u, grad(val(*u), du)), (*v, grad(val(*v), dv))]
            }
            Op::ChannelMix { low, high, alpha } => {
                let lo = val(*low).data();
                let hi = val(*high).data();
                let al = val(*alpha).data();
                let plane = lo.len();
                let mut dlow = vec![0.0; plane];
                let mut dhigh = vec![0.0; plane];
                let mut dalpha = vec![0.0; al.len()];
                for (c, &a) in al.iter().enumerate() {
                    let gc = &gd[c * plane..(c + 1) * plane];
                    for k in 0..plane {
                        dlow[k] += a * gc[k];
                        dhigh[k] += (1.0 - a) * gc[k];
                        dalpha[c] += gc[k] * (lo[k] - hi[k]);
                    }
                }
                vec![
                    (*low, grad(val(*low), dlow)),
                    (*high, grad(val(*high), dhigh)),
                    (*alpha, grad(val(*alpha), dalpha)),
                ]
            }
            Op::ChannelAggregate { attn, values } => {
                let a = val(*attn).data();
                let v = val(*values).data();
                let (n, c) = val(*values).dims2()?;
                let mut da = vec![0.0; a.len()];
                let mut dv = vec![0.0; v.len()];
                for ch in 0..c {
                    for i in 0..n {
                        let gic = gd[i * c + ch];
                        let base = (ch * n + i) * n;
                        for j in 0..n {
                            da[base + j] = gic * v[j * c + ch];
                            dv[j * c + ch] += a[base + j] * gic;
                        }
                    }
                }
                vec![(*attn, grad(val(*attn), da)), (*values, grad(val(*values), dv))]
            }
        })
    }

    /// Inputs of node `v`, in recording order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.ops[v.0].inputs()
    }
}

fn grad(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_op(like.shape().to_vec(), data, DType::F64)
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => acc.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, b)| *a += b),
    }
}

fn mac_count(op: &Op, values: &[Tensor]) -> u64 {
    let numel = |v: &Var| values[v.0].numel() as u64;
    match op {
        Op::MatMul(a, b) => {
            let s = values[a.0].shape();
            let n = values[b.0].shape()[1];
            (s[0] * s[1] * n) as u64
        }
        Op::OuterSum(u, v) => numel(u) * numel(v),
        Op::ChannelMix { low, alpha, .. } => numel(low) * numel(alpha),
        Op::ChannelAggregate { attn, .. } => numel(attn),
        _ => 0,
    }
}

fn eval(op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let val = |v: &Var| &values[v.0];
    match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::MatMul(a, b) => tensor::matmul(val(a), val(b)),
        Op::Transpose(a) => tensor::transpose(val(a)),
        Op::Add(a, b) => tensor::add(val(a), val(b)),
        Op::Sub(a, b) => tensor::sub(val(a), val(b)),
        Op::Mul(a, b) => tensor::mul(val(a), val(b)),
        Op::Scale(a, s) => Ok(val(a).map(|v| v * s)),
        Op::AddRowBias(a, b) => {
            let (x, bias) = (val(a), val(b));
            let n = bias.numel();
            if x.rank() == 0 || *x.shape().last().unwrap() != n || bias.rank() != 1 {
                return Err(HgfeError::shape(format!(
                    "row bias of shape {:?} does not fit {:?}",
                    bias.shape(),
                    x.shape()
                )));
            }
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(k, v)| v + bias.data()[k % n])
                .collect();
            Ok(Tensor::from_op(x.shape().to_vec(), data, x.dtype()))
        }
        Op::Act(a, mode) => Ok(tensor::activation(val(a), *mode)),
        Op::SoftmaxRows(a) => tensor::softmax_rows(val(a)),
        Op::MeanRows(a) => tensor::mean_rows(val(a)),
        Op::Sum(a) => Ok(Tensor::from_op(vec![], vec![val(a).sum()], val(a).dtype())),
        Op::Reshape(a, shape) => val(a).reshape(shape),
        Op::Gather(a, index, shape) => {
            let src = val(a);
            if index.len() != shape.iter().product::<usize>() {
                return Err(HgfeError::shape("gather index length does not match output shape"));
            }
            if let Some(&bad) = index.iter().find(|&&k| k >= src.numel()) {
                return Err(HgfeError::shape(format!(
                    "gather index {bad} out of range for {} elements",
                    src.numel()
                )));
            }
            let data = index.iter().map(|&k| src.data()[k]).collect();
            Ok(Tensor::from_op(shape.clone(), data, src.dtype()))
        }
        Op::Concat(parts) => {
            let data: Vec<f64> = parts.iter().flat_map(|p| val(p).data().iter().copied()).collect();
            Ok(Tensor::from_op(vec![data.len()], data, val(&parts[0]).dtype()))
        }
        Op::OuterSum(u, v) => {
            let (u, v) = (val(u), val(v));
            let (n, m) = (u.numel(), v.numel());
            let mut data = Vec::with_capacity(n * m);
            for &ui in u.data() {
                data.extend(v.data().iter().map(|&vj| ui + vj));
            }
            Ok(Tensor::from_op(vec![n, m], data, u.dtype()))
        }
        Op::ChannelMix { low, high, alpha } => {
            let (lo, hi, al) = (val(low), val(high), val(alpha));
            if lo.shape() != hi.shape() || lo.rank() != 2 || al.rank() != 1 {
                return Err(HgfeError::shape(format!(
                    "channel mix needs equal N×M logits and a gate vector, got {:?}, {:?}, {:?}",
                    lo.shape(),
                    hi.shape(),
                    al.shape()
                )));
            }
            let mut data = Vec::with_capacity(al.numel() * lo.numel());
            for &a in al.data() {
                data.extend(lo.data().iter().zip(hi.data()).map(|(l, h)| a * l + (1.0 - a) * h));
            }
            let mut shape = vec![al.numel()];
            shape.extend_from_slice(lo.shape());
            Ok(Tensor::from_op(shape, data, lo.dtype()))
        }
        Op::ChannelAggregate { attn, values } => {
            let (a, v) = (val(attn), val(values));
            let (n, c) = v.dims2()?;
            if a.shape() != [c, n, n] {
                return Err(HgfeError::shape(format!(
                    "attention {:?} does not match values {:?}",
                    a.shape(),
                    v.shape()
                )));
            }
            let mut data = vec![0.0; n * c];
            for ch in 0..c {
                for i in 0..n {
                    let row = &a.data()[(ch * n + i) * n..(ch * n + i + 1) * n];
                    data[i * c + ch] = row.iter().enumerate().map(|(j, w)| w * v.data()[j * c + ch]).sum();
                }
            }
            Ok(Tensor::from_op(vec![n, c], data, v.dtype()))
        }
    }
}
