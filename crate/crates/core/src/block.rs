//! The assembled HGFE block: intra-window AFM, supernode AFM with projection,
//! and a residual connection. Also parameter/FLOP accounting and
//! over-smoothing diagnostics.

use serde::Serialize;

use crate::afm::{afm_forward_detailed, AfmConfig, AfmParams, AfmVars, OutputActivation};
use crate::baselines::{pairwise_op_count, PairwiseCounts};
use crate::counter::OpCounter;
use crate::error::{HgfeError, Result};
use crate::init::{derive_seed, uniform_tensor};
use crate::spectral::{dirichlet_energy_columns, normalized_laplacian, GraphAdjacency};
use crate::supernode::{inter_window_on_tape, InterTrace, ProjectionParams, ProjectionVars};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul, Tensor};
use crate::window::{intra_window_on_tape, partition_windows, window_to_nodes, IntraTrace, PartitionMode, WindowGrid};

/// Where the block-level skip connection starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Residual {
    /// `out = F + global(intra(F))`
    #[default]
    Input,
    /// `out = F_local + global(F_local)`
    Local,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct HgfeConfig {
    pub afm: AfmConfig,
    pub residual: Residual,
    #[serde(skip)]
    pub partition: PartitionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HgfeParams {
    pub intra: AfmParams,
    pub inter: AfmParams,
    pub proj: ProjectionParams,
    pub window: usize,
    pub config: HgfeConfig,
}

impl HgfeParams {
    pub fn init(seed: u64, channels: usize, embed: usize, window: usize, config: HgfeConfig) -> Result<Self> {
        let p = HgfeParams {
            intra: AfmParams::init(derive_seed(seed, 101), channels, embed)?,
            inter: AfmParams::init(derive_seed(seed, 102), channels, embed)?,
            proj: ProjectionParams::init(derive_seed(seed, 103), channels)?,
            window,
            config,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.intra.channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(HgfeError::contract("window size must be at least 1"));
        }
        self.intra.validate()?;
        self.inter.validate()?;
        self.proj.validate()?;
        let c = self.channels();
        if self.inter.channels() != c || self.proj.channels() != c {
            return Err(HgfeError::shape("intra, inter and projection disagree on C"));
        }
        Ok(())
    }

    /// Named learnable tensors: `intra.*`, `inter.*`, `proj.w_proj`, `proj.b_proj`.
    pub fn groups(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(20);
        for (prefix, p) in [("intra", &self.intra), ("inter", &self.inter)] {
            out.extend(p.groups().iter().map(|(n, t)| (format!("{prefix}.{n}"), (*t).clone())));
        }
        out.push(("proj.w_proj".into(), self.proj.w_proj.clone()));
        out.push(("proj.b_proj".into(), self.proj.b_proj.clone()));
        out
    }

    /// Inverse of [`HgfeParams::groups`], keeping window size, slopes and config.
    pub fn with_groups(&self, groups: &[Tensor]) -> Result<Self> {
        if groups.len() != 20 {
            return Err(HgfeError::contract(format!("expected 20 groups, got {}", groups.len())));
        }
        let p = HgfeParams {
            intra: AfmParams::from_groups(&groups[..9], self.intra.leaky_slope)?,
            inter: AfmParams::from_groups(&groups[9..18], self.inter.leaky_slope)?,
            proj: ProjectionParams {
                w_proj: groups[18].clone(),
                b_proj: groups[19].clone(),
            },
            window: self.window,
            config: self.config,
        };
        p.validate()?;
        Ok(p)
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> HgfeVars {
        HgfeVars {
            intra: self.intra.bind(tape),
            inter: self.inter.bind(tape),
            proj: self.proj.bind(tape),
        }
    }

    pub fn vars_from(&self, vars: &[Var]) -> Result<HgfeVars> {
        if vars.len() != 20 {
            return Err(HgfeError::contract(format!("expected 20 vars, got {}", vars.len())));
        }
        Ok(HgfeVars {
            intra: AfmVars::from_vars(&vars[..9], self.intra.leaky_slope)?,
            inter: AfmVars::from_vars(&vars[9..18], self.inter.leaky_slope)?,
            proj: ProjectionVars {
                w_proj: vars[18],
                b_proj: vars[19],
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HgfeVars {
    pub intra: AfmVars,
    pub inter: AfmVars,
    pub proj: ProjectionVars,
}

#[derive(Debug, Clone)]
pub struct HgfeTrace {
    pub grid: WindowGrid,
    pub intra: IntraTrace,
    pub inter: InterTrace,
    /// Inter-window output before the skip connection.
    pub global: Var,
    pub output: Var,
    /// Counts spent in each stage.
    pub intra_cost: OpCounter,
    pub inter_cost: OpCounter,
}

pub fn hgfe_on_tape(tape: &mut Tape, f: Var, vars: &HgfeVars, window: usize, config: &HgfeConfig) -> Result<HgfeTrace> {
    let grid = WindowGrid::new(tape.value(f).shape(), window, config.partition)?;
    let start = tape.counter();
    let intra = intra_window_on_tape(tape, f, &grid, &vars.intra, &config.afm)?;
    let mid = tape.counter();
    let inter = inter_window_on_tape(tape, intra.output, &grid, &vars.inter, &vars.proj, &config.afm)?;
    let end = tape.counter();
    let global = inter.output;
    let output = match config.residual {
        Residual::Input => tape.add(f, global)?,
        Residual::Local => tape.add(intra.output, global)?,
        Residual::Off => global,
    };
    Ok(HgfeTrace {
        grid,
        intra,
        inter,
        global,
        output,
        intra_cost: mid.since(&start),
        inter_cost: end.since(&mid),
    })
}

/// Values pulled off the tape after one forward pass.
#[derive(Debug, Clone)]
pub struct HgfeOutput {
    pub output: Tensor,
    pub local: Tensor,
    pub global: Tensor,
    /// One gate per window.
    pub alpha_intra: Vec<Tensor>,
    /// One gate per sample.
    pub alpha_inter: Vec<Tensor>,
    /// Per-channel max |row sum - 1| over every intra-window attention.
    pub intra_row_deviation: Vec<f64>,
    pub inter_row_deviation: Vec<f64>,
    pub intra_cost: OpCounter,
    pub inter_cost: OpCounter,
}

pub fn hgfe_forward(f: &Tensor, params: &HgfeParams) -> Result<Tensor> {
    Ok(hgfe_forward_detailed(f, params)?.output)
}

pub fn hgfe_forward_detailed(f: &Tensor, params: &HgfeParams) -> Result<HgfeOutput> {
    params.validate()?;
    if !f.all_finite() {
        return Err(HgfeError::contract("input has non-finite entries"));
    }
    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let vars = params.bind(&mut tape);
    let t = hgfe_on_tape(&mut tape, fv, &vars, params.window, &params.config)?;
    let out = tape.value(t.output).clone();
    if !out.all_finite() {
        return Err(HgfeError::Numeric("forward pass produced non-finite values".into()));
    }
    let c = params.channels();
    let deviation = |traces: &mut dyn Iterator<Item = Var>| {
        let mut dev = vec![0.0f64; c];
        for a in traces {
            for (d, v) in dev.iter_mut().zip(crate::afm::row_sum_deviation(tape.value(a))) {
                *d = d.max(v);
            }
        }
        dev
    };
    let intra_row_deviation = deviation(&mut t.intra.windows.iter().map(|w| w.attention));
    let inter_row_deviation = deviation(&mut t.inter.samples.iter().map(|s| s.attention));
    Ok(HgfeOutput {
        output: out,
        local: tape.value(t.intra.output).clone(),
        global: tape.value(t.global).clone(),
        alpha_intra: t.intra.windows.iter().map(|w| tape.value(w.alpha).clone()).collect(),
        alpha_inter: t.inter.samples.iter().map(|s| tape.value(s.alpha).clone()).collect(),
        intra_row_deviation,
        inter_row_deviation,
        intra_cost: t.intra_cost,
        inter_cost: t.inter_cost,
    })
}

/// Counting conventions for [`param_count`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamConventions {
    /// One AFM instance serving both stages instead of two.
    pub shared_afm: bool,
    pub projection_bias: bool,
}

impl Default for ParamConventions {
    fn default() -> Self {
        ParamConventions {
            shared_afm: false,
            projection_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamEntry {
    pub name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub channels: usize,
    pub embed_dim: usize,
    pub conventions: ParamConventions,
    pub exact: u64,
    pub breakdown: Vec<ParamEntry>,
    /// `4Cd + 3C^2 + C`
    pub closed_form: u64,
    pub delta: i64,
    pub ratio: f64,
}

/// Closed-form cost terms of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopTerms {
    /// `B n_h n_w w^2 (d + C + C^2)`
    pub local_term: u64,
    /// `B (n_h n_w)^2 d`
    pub global_term: u64,
}

/// Counts taken from an actual forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstrumentedCost {
    pub intra: OpCounter,
    pub inter: OpCounter,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CostReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flops: Option<FlopTerms>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairwise: Option<PairwiseCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instrumented: Option<InstrumentedCost>,
}

pub fn closed_form_param_count(c: u64, d: u64) -> u64 {
    4 * c * d + 3 * c * c + c
}

pub fn param_count(channels: usize, embed: usize, conventions: ParamConventions) -> Result<CostReport> {
    if channels == 0 || embed == 0 {
        return Err(HgfeError::contract("param_count needs C >= 1 and d >= 1"));
    }
    let (c, d) = (channels as u64, embed as u64);
    let prefixes: &[&str] = if conventions.shared_afm {
        &["afm"]
    } else {
        &["intra", "inter"]
    };
    let mut breakdown = Vec::new();
    for p in prefixes {
        for (name, count) in [
            ("w_qk", 4 * c * d),
            ("attention_vectors", 4 * d),
            ("w_v", c * c),
            ("w_f", c * c),
            ("b_f", c),
        ] {
            breakdown.push(ParamEntry {
                name: format!("{p}.{name}"),
                count,
            });
        }
    }
    breakdown.push(ParamEntry {
        name: "proj.w_proj".into(),
        count: 2 * c * c,
    });
    if conventions.projection_bias {
        breakdown.push(ParamEntry {
            name: "proj.b_proj".into(),
            count: c,
        });
    }
    let exact: u64 = breakdown.iter().map(|e| e.count).sum();
    let closed = closed_form_param_count(c, d);
    Ok(CostReport {
        params: Some(ParamReport {
            channels,
            embed_dim: embed,
            conventions,
            exact,
            breakdown,
            closed_form: closed,
            delta: exact as i64 - closed as i64,
            ratio: exact as f64 / closed as f64,
        }),
        ..CostReport::default()
    })
}

/// Dimensions of a cost estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostDims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub embed: usize,
}

pub fn flop_estimate(dims: CostDims) -> Result<CostReport> {
    let grid = WindowGrid::new(
        &[dims.batch, dims.channels, dims.height, dims.width],
        dims.window,
        PartitionMode::Strict,
    )?;
    let (b, c, d) = (dims.batch as u64, dims.channels as u64, dims.embed as u64);
    let m = grid.windows_per_sample() as u64;
    let n = grid.nodes_per_window() as u64;
    Ok(CostReport {
        flops: Some(FlopTerms {
            local_term: b * m * n * (d + c + c * c),
            global_term: b * m * m * d,
        }),
        pairwise: Some(pairwise_op_count(dims.height, dims.width, dims.window)?),
        ..CostReport::default()
    })
}

/// [`flop_estimate`] plus counts from a seeded forward pass.
pub fn flop_estimate_instrumented(dims: CostDims, seed: u64, config: HgfeConfig) -> Result<CostReport> {
    let mut report = flop_estimate(dims)?;
    let params = HgfeParams::init(seed, dims.channels, dims.embed, dims.window, config)?;
    let f = uniform_tensor(
        derive_seed(seed, 7),
        &[dims.batch, dims.channels, dims.height, dims.width],
        -1.0,
        1.0,
    );
    let out = hgfe_forward_detailed(&f, &params)?;
    report.instrumented = Some(InstrumentedCost {
        intra: out.intra_cost,
        inter: out.inter_cost,
    });
    Ok(report)
}

/// Repeated intra-window aggregation with attention fixed from the input:
/// `X_0 = H W_V`, `X_{t+1}[:,c] = A_c X_t[:,c]`, per window.
fn repeated_aggregation(f: &Tensor, params: &HgfeParams, depth: usize) -> Result<Vec<Vec<Tensor>>> {
    params.validate()?;
    if params.config.afm.activation != OutputActivation::Identity {
        return Err(HgfeError::contract(
            "over-smoothing diagnostics need the identity output activation",
        ));
    }
    let (_, set) = partition_windows(f, params.window, params.config.partition)?;
    let mut per_window = Vec::with_capacity(set.windows.len());
    for win in &set.windows {
        let h = window_to_nodes(win)?;
        let attn = afm_forward_detailed(&h, &params.intra, &params.config.afm)?.attention;
        let (n, c) = h.dims2()?;
        let mut x = matmul(&h, &params.intra.w_v)?;
        let mut steps = Vec::with_capacity(depth + 1);
        steps.push(x.clone());
        for _ in 0..depth {
            let mut next = vec![0.0; n * c];
            for ch in 0..c {
                let a = attn.channel(ch);
                for i in 0..n {
                    next[i * c + ch] = (0..n).map(|j| a[i * n + j] * x.data()[j * c + ch]).sum();
                }
            }
            x = Tensor::new(&[n, c], next)?;
            steps.push(x.clone());
        }
        per_window.push(steps);
    }
    Ok(per_window)
}

/// Per-channel `max - min` of the pre-activation window values after each of
/// `depth` aggregations (entry 0 is `H W_V`). Extremes are taken over all windows.
pub fn spread_profile(f: &Tensor, params: &HgfeParams, depth: usize) -> Result<Vec<Vec<f64>>> {
    let runs = repeated_aggregation(f, params, depth)?;
    let c = params.channels();
    Ok((0..=depth)
        .map(|t| {
            (0..c)
                .map(|ch| {
                    let vals = runs
                        .iter()
                        .flat_map(|r| r[t].data().iter().skip(ch).step_by(c).copied());
                    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                    hi - lo
                })
                .collect()
        })
        .collect())
}

/// Complete-graph Dirichlet energy of the same sequence, summed over windows.
pub fn dirichlet_profile(f: &Tensor, params: &HgfeParams, depth: usize) -> Result<Vec<f64>> {
    let runs = repeated_aggregation(f, params, depth)?;
    let l = normalized_laplacian(&GraphAdjacency::complete(params.window * params.window));
    (0..=depth)
        .map(|t| runs.iter().map(|r| dirichlet_energy_columns(&l, &r[t])).sum())
        .collect()
}
