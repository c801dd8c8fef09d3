//! Adaptive frequency modulation (AFM) attention over a fully connected node set.
//!
//! Per node matrix `H` (N×C):
//!
//! ```text
//! s      = mean_i H_i                          channel summary
//! alpha  = sigmoid(W_f s + b_f)                per-channel gate in (0,1)
//! a_ij   = LeakyReLU([H_i W_Q || H_j W_K] . a)  for each of the low/high branches
//! A_c    = softmax_j(alpha_c a_low + (1 - alpha_c) a_high)
//! H'_:,c = act(A_c (H W_V)_:,c)
//! ```
//!
//! Every step is recorded on a [`Tape`], so the unit is differentiable end to end.

use std::rc::Rc;

use serde::Serialize;

use crate::error::{HgfeError, Result};
use crate::init::{derive_seed, init_uniform};
use crate::tape::{Tape, Var};
use crate::tensor::{Activation, Tensor, DEFAULT_LEAKY_SLOPE};

/// How fused logits are turned into attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Row softmax of the fused logits.
    #[default]
    Plain,
    /// Row softmax of `sigmoid(fused logits)`.
    SigmoidSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
    Identity,
}

impl OutputActivation {
    fn as_activation(self) -> Activation {
        match self {
            OutputActivation::Sigmoid => Activation::Sigmoid,
            OutputActivation::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AfmConfig {
    pub norm: NormMode,
    pub activation: OutputActivation,
}

/// Names of the nine learnable groups, in [`AfmParams::groups`] order.
pub const GROUP_NAMES: [&str; 9] = [
    "w_q_low", "w_k_low", "w_q_high", "w_k_high", "a_low", "a_high", "w_v", "w_f", "b_f",
];

/// Learnable parameters of one AFM unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AfmParams {
    /// C×d
    pub w_q_low: Tensor,
    pub w_k_low: Tensor,
    pub w_q_high: Tensor,
    pub w_k_high: Tensor,
    /// Length 2d; the first half scores the query, the second the key.
    pub a_low: Tensor,
    pub a_high: Tensor,
    /// C×C
    pub w_v: Tensor,
    /// C×C
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub leaky_slope: f64,
}

impl AfmParams {
    /// Seeded uniform initialization, `±1/sqrt(fan_in)` per group.
    pub fn init(seed: u64, channels: usize, embed: usize) -> Result<Self> {
        if channels == 0 || embed == 0 {
            return Err(HgfeError::contract(format!(
                "AFM needs C >= 1 and d >= 1, got C={channels}, d={embed}"
            )));
        }
        let (c, d) = (channels, embed);
        let s = |k: u64| derive_seed(seed, k);
        Ok(AfmParams {
            w_q_low: init_uniform(s(1), &[c, d], c),
            w_k_low: init_uniform(s(2), &[c, d], c),
            w_q_high: init_uniform(s(3), &[c, d], c),
            w_k_high: init_uniform(s(4), &[c, d], c),
            a_low: init_uniform(s(5), &[2 * d], 2 * d),
            a_high: init_uniform(s(6), &[2 * d], 2 * d),
            w_v: init_uniform(s(7), &[c, c], c),
            w_f: init_uniform(s(8), &[c, c], c),
            b_f: init_uniform(s(9), &[c], c),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_v.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.w_q_low.shape()[1]
    }

    /// Copies the low-branch parameters over the high branch.
    pub fn with_tied_branches(mut self) -> Self {
        self.w_q_high = self.w_q_low.clone();
        self.w_k_high = self.w_k_low.clone();
        self.a_high = self.a_low.clone();
        self
    }

    pub fn groups(&self) -> [(&'static str, &Tensor); 9] {
        [
            (GROUP_NAMES[0], &self.w_q_low),
            (GROUP_NAMES[1], &self.w_k_low),
            (GROUP_NAMES[2], &self.w_q_high),
            (GROUP_NAMES[3], &self.w_k_high),
            (GROUP_NAMES[4], &self.a_low),
            (GROUP_NAMES[5], &self.a_high),
            (GROUP_NAMES[6], &self.w_v),
            (GROUP_NAMES[7], &self.w_f),
            (GROUP_NAMES[8], &self.b_f),
        ]
    }

    pub fn from_groups(groups: &[Tensor], leaky_slope: f64) -> Result<Self> {
        let [w_q_low, w_k_low, w_q_high, w_k_high, a_low, a_high, w_v, w_f, b_f] = groups else {
            return Err(HgfeError::contract(format!(
                "expected 9 AFM groups, got {}",
                groups.len()
            )));
        };
        let p = AfmParams {
            w_q_low: w_q_low.clone(),
            w_k_low: w_k_low.clone(),
            w_q_high: w_q_high.clone(),
            w_k_high: w_k_high.clone(),
            a_low: a_low.clone(),
            a_high: a_high.clone(),
            w_v: w_v.clone(),
            w_f: w_f.clone(),
            b_f: b_f.clone(),
            leaky_slope,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.w_v.shape().first().copied().unwrap_or(0);
        let d = self.w_q_low.shape().get(1).copied().unwrap_or(0);
        let expect: [(&str, &Tensor, Vec<usize>); 9] = [
            ("w_q_low", &self.w_q_low, vec![c, d]),
            ("w_k_low", &self.w_k_low, vec![c, d]),
            ("w_q_high", &self.w_q_high, vec![c, d]),
            ("w_k_high", &self.w_k_high, vec![c, d]),
            ("a_low", &self.a_low, vec![2 * d]),
            ("a_high", &self.a_high, vec![2 * d]),
            ("w_v", &self.w_v, vec![c, c]),
            ("w_f", &self.w_f, vec![c, c]),
            ("b_f", &self.b_f, vec![c]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(HgfeError::shape(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(HgfeError::contract(format!("{name} has non-finite entries")));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope > 0.0) {
            return Err(HgfeError::contract(format!(
                "leaky slope {} must be positive",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Registers every group as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> AfmVars {
        AfmVars {
            w_q_low: tape.leaf(self.w_q_low.clone()),
            w_k_low: tape.leaf(self.w_k_low.clone()),
            w_q_high: tape.leaf(self.w_q_high.clone()),
            w_k_high: tape.leaf(self.w_k_high.clone()),
            a_low: tape.leaf(self.a_low.clone()),
            a_high: tape.leaf(self.a_high.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            w_f: tape.leaf(self.w_f.clone()),
            b_f: tape.leaf(self.b_f.clone()),
            leaky_slope: self.leaky_slope,
        }
    }
}

/// Tape handles of one [`AfmParams`].
#[derive(Debug, Clone, Copy)]
pub struct AfmVars {
    pub w_q_low: Var,
    pub w_k_low: Var,
    pub w_q_high: Var,
    pub w_k_high: Var,
    pub a_low: Var,
    pub a_high: Var,
    pub w_v: Var,
    pub w_f: Var,
    pub b_f: Var,
    pub leaky_slope: f64,
}

impl AfmVars {
    /// Binds already-registered leaves, in [`GROUP_NAMES`] order.
    pub fn from_vars(vars: &[Var], leaky_slope: f64) -> Result<Self> {
        let [w_q_low, w_k_low, w_q_high, w_k_high, a_low, a_high, w_v, w_f, b_f] = vars else {
            return Err(HgfeError::contract(format!("expected 9 AFM vars, got {}", vars.len())));
        };
        Ok(AfmVars {
            w_q_low: *w_q_low,
            w_k_low: *w_k_low,
            w_q_high: *w_q_high,
            w_k_high: *w_k_high,
            a_low: *a_low,
            a_high: *a_high,
            w_v: *w_v,
            w_f: *w_f,
            b_f: *b_f,
            leaky_slope,
        })
    }

    pub fn all(&self) -> [Var; 9] {
        [
            self.w_q_low,
            self.w_k_low,
            self.w_q_high,
            self.w_k_high,
            self.a_low,
            self.a_high,
            self.w_v,
            self.w_f,
            self.b_f,
        ]
    }
}

/// Per-channel gate, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GatingVector(Tensor);

impl GatingVector {
    pub fn new(alpha: Tensor) -> Result<Self> {
        if alpha.rank() != 1 {
            return Err(HgfeError::shape("gating vector must be rank 1"));
        }
        if let Some(bad) = alpha.data().iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return Err(HgfeError::contract(format!("gate value {bad} outside (0,1)")));
        }
        Ok(GatingVector(alpha))
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchLogits {
    /// N×N
    pub logits: Tensor,
    pub branch: Branch,
}

/// Row-stochastic C×N×N attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention(Tensor);

impl ChannelAttention {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.0.shape()[1]
    }

    /// N×N weights of channel `c`, row-major.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.nodes();
        &self.0.data()[c * n * n..(c + 1) * n * n]
    }

    /// Largest `|sum_j A_c[i, j] - 1|` per channel.
    pub fn row_sum_deviation(&self) -> Vec<f64> {
        row_sum_deviation(&self.0)
    }
}

pub(crate) fn row_sum_deviation(attn: &Tensor) -> Vec<f64> {
    let (c, n) = (attn.shape()[0], attn.shape()[1]);
    (0..c)
        .map(|ch| {
            attn.data()[ch * n * n..(ch + 1) * n * n]
                .chunks(n)
                .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Intermediate handles of one AFM evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AfmTrace {
    pub summary: Var,
    pub alpha: Var,
    pub low: Var,
    pub high: Var,
    /// C×N×N
    pub attention: Var,
    /// `H W_V`, N×C
    pub values: Var,
    /// Aggregated values before the output activation.
    pub pre_activation: Var,
    pub output: Var,
}

fn tape_summary(tape: &mut Tape, h: Var) -> Result<Var> {
    tape.mean_rows(h)
}

fn tape_gate(tape: &mut Tape, summary: Var, w_f: Var, b_f: Var) -> Result<Var> {
    let c = tape.value(summary).numel();
    let col = tape.reshape(summary, &[c, 1])?;
    let z = tape.matmul(w_f, col)?;
    let z = tape.reshape(z, &[c])?;
    let z = tape.add(z, b_f)?;
    tape.activation(z, Activation::Sigmoid)
}

fn tape_logits(tape: &mut Tape, h: Var, w_q: Var, w_k: Var, a: Var, slope: f64) -> Result<Var> {
    let d = tape.value(w_q).shape()[1];
    if tape.value(a).shape() != [2 * d] {
        return Err(HgfeError::shape(format!(
            "attention vector has shape {:?}, expected [{}]",
            tape.value(a).shape(),
            2 * d
        )));
    }
    let q = tape.matmul(h, w_q)?;
    let k = tape.matmul(h, w_k)?;
    let a_q: Rc<[usize]> = (0..d).collect();
    let a_k: Rc<[usize]> = (d..2 * d).collect();
    let a_q = tape.gather(a, a_q, &[d, 1])?;
    let a_k = tape.gather(a, a_k, &[d, 1])?;
    let eq = tape.matmul(q, a_q)?;
    let ek = tape.matmul(k, a_k)?;
    let pre = tape.outer_sum(eq, ek)?;
    tape.activation(pre, Activation::LeakyRelu(slope))
}

fn tape_fuse(tape: &mut Tape, low: Var, high: Var, alpha: Var, mode: NormMode) -> Result<Var> {
    let mixed = tape.channel_mix(low, high, alpha)?;
    let mixed = match mode {
        NormMode::Plain => mixed,
        NormMode::SigmoidSoftmax => tape.activation(mixed, Activation::Sigmoid)?,
    };
    tape.softmax_rows(mixed)
}

/// Records one AFM evaluation of the node matrix `h` (N×C).
pub fn afm_on_tape(tape: &mut Tape, h: Var, p: &AfmVars, config: &AfmConfig) -> Result<AfmTrace> {
    let (n, c) = tape.value(h).dims2()?;
    if c != tape.value(p.w_v).shape()[0] {
        return Err(HgfeError::shape(format!(
            "node features have {c} channels, parameters expect {}",
            tape.value(p.w_v).shape()[0]
        )));
    }
    tape.count_pairwise((n * n) as u64);
    let summary = tape_summary(tape, h)?;
    let alpha = tape_gate(tape, summary, p.w_f, p.b_f)?;
    let low = tape_logits(tape, h, p.w_q_low, p.w_k_low, p.a_low, p.leaky_slope)?;
    let high = tape_logits(tape, h, p.w_q_high, p.w_k_high, p.a_high, p.leaky_slope)?;
    let attention = tape_fuse(tape, low, high, alpha, config.norm)?;
    let values = tape.matmul(h, p.w_v)?;
    let pre_activation = tape.channel_aggregate(attention, values)?;
    let output = tape.activation(pre_activation, config.activation.as_activation())?;
    Ok(AfmTrace {
        summary,
        alpha,
        low,
        high,
        attention,
        values,
        pre_activation,
        output,
    })
}

fn node_matrix(h: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = h.dims2()?;
    if n == 0 {
        return Err(HgfeError::EmptyInput("node matrix has no rows".into()));
    }
    Ok((n, c))
}

/// `s = (1/N) sum_i H_i`.
pub fn channel_summary(h: &Tensor) -> Result<Tensor> {
    crate::tensor::mean_rows(h)
}

/// `alpha = sigmoid(W_f s + b_f)`.
pub fn gating_vector(summary: &Tensor, params: &AfmParams) -> Result<GatingVector> {
    if summary.shape() != [params.channels()] {
        return Err(HgfeError::shape(format!(
            "summary has shape {:?}, expected [{}]",
            summary.shape(),
            params.channels()
        )));
    }
    let mut tape = Tape::new();
    let s = tape.leaf(summary.clone());
    let w_f = tape.leaf(params.w_f.clone());
    let b_f = tape.leaf(params.b_f.clone());
    let alpha = tape_gate(&mut tape, s, w_f, b_f)?;
    GatingVector::new(tape.value(alpha).clone())
}

/// Dense N×N logits `LeakyReLU([H_i W_Q || H_j W_K] . a)`.
pub fn branch_logits(
    h: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    a: &Tensor,
    slope: f64,
    branch: Branch,
) -> Result<BranchLogits> {
    node_matrix(h)?;
    if w_q.shape() != w_k.shape() {
        return Err(HgfeError::shape("query and key projections differ in shape"));
    }
    let mut tape = Tape::new();
    let (hv, qv, kv, av) = (
        tape.leaf(h.clone()),
        tape.leaf(w_q.clone()),
        tape.leaf(w_k.clone()),
        tape.leaf(a.clone()),
    );
    let out = tape_logits(&mut tape, hv, qv, kv, av, slope)?;
    Ok(BranchLogits {
        logits: tape.value(out).clone(),
        branch,
    })
}

/// Channel-wise convex fusion of the two branches, then row normalization.
///
/// `alpha` may include the endpoints 0 and 1.
pub fn fuse_and_normalize(
    low: &BranchLogits,
    high: &BranchLogits,
    alpha: &Tensor,
    mode: NormMode,
) -> Result<ChannelAttention> {
    if let Some(bad) = alpha.data().iter().find(|&&a| !(0.0..=1.0).contains(&a)) {
        return Err(HgfeError::contract(format!("gate value {bad} outside [0,1]")));
    }
    let mut tape = Tape::new();
    let (l, h, a) = (
        tape.leaf(low.logits.clone()),
        tape.leaf(high.logits.clone()),
        tape.leaf(alpha.clone()),
    );
    let out = tape_fuse(&mut tape, l, h, a, mode)?;
    Ok(ChannelAttention(tape.value(out).clone()))
}

/// `H'_:,c = act(A_c (H W_V)_:,c)`.
pub fn aggregate(
    h: &Tensor,
    attention: &ChannelAttention,
    params: &AfmParams,
    activation: OutputActivation,
) -> Result<Tensor> {
    let (n, c) = node_matrix(h)?;
    if attention.tensor().shape() != [c, n, n] {
        return Err(HgfeError::shape(format!(
            "attention {:?} does not fit {n} nodes x {c} channels",
            attention.tensor().shape()
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let wv = tape.leaf(params.w_v.clone());
    let av = tape.leaf(attention.tensor().clone());
    let values = tape.matmul(hv, wv)?;
    let pre = tape.channel_aggregate(av, values)?;
    let out = tape.activation(pre, activation.as_activation())?;
    Ok(tape.value(out).clone())
}

/// Full AFM forward pass on an N×C node matrix.
pub fn afm_forward(h: &Tensor, params: &AfmParams, config: &AfmConfig) -> Result<Tensor> {
    Ok(afm_forward_detailed(h, params, config)?.output)
}

/// Forward pass with the gate and attention exposed.
#[derive(Debug, Clone)]
pub struct AfmOutput {
    pub alpha: GatingVector,
    pub attention: ChannelAttention,
    pub pre_activation: Tensor,
    pub output: Tensor,
}

pub fn afm_forward_detailed(h: &Tensor, params: &AfmParams, config: &AfmConfig) -> Result<AfmOutput> {
    node_matrix(h)?;
    params.validate()?;
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let vars = params.bind(&mut tape);
    let trace = afm_on_tape(&mut tape, hv, &vars, config)?;
    Ok(AfmOutput {
        alpha: GatingVector::new(tape.value(trace.alpha).clone())?,
        attention: ChannelAttention(tape.value(trace.attention).clone()),
        pre_activation: tape.value(trace.pre_activation).clone(),
        output: tape.value(trace.output).clone(),
    })
}
