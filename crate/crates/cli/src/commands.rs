use std::path::Path;

use hgfe_core::baselines::{bench_scaling, pairwise_op_count, BenchOptions};
use hgfe_core::block::{
    closed_form_param_count, dirichlet_profile, flop_estimate, hgfe_forward_detailed, param_count, spread_profile,
    CostDims, ParamConventions,
};
use hgfe_core::checks::{afm_grad_check, hgfe_grad_check};
use hgfe_core::gradcheck::{Corruption, GradCheckOptions, GradCheckReport};
use hgfe_core::init::{derive_seed, uniform_tensor};
use hgfe_core::spectral::{
    chebyshev_apply, eigendecompose_with_budget, fit_chebyshev, interpolate_filter_coeffs, normalized_laplacian,
    spectral_filter_exact, GraphAdjacency, DEFAULT_LAMBDA_MAX,
};
use hgfe_core::{io, DType, HgfeParams, OutputActivation, Tensor};

use crate::args::{Cli, Command, Dims, Format, GlobalArgs};
use crate::report::*;
use crate::{CliError, CliResult, Outcome, EXIT_CHECK_FAILED, EXIT_OK};

pub const MAX_SPECTRAL_NODES: usize = 256;
pub const INTERP_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

const DEMO_DIMS: Dims = Dims {
    batch: 1,
    channels: 8,
    height: 16,
    width: 16,
    window: 8,
    embed: 4,
};

/// Block fixture of the gradient check; the AFM check uses 9 nodes and
/// C=4, d=3 unless overridden.
const GRADCHECK_DIMS: Dims = Dims {
    batch: 1,
    channels: 3,
    height: 6,
    width: 6,
    window: 3,
    embed: 2,
};
const AFM_CHECK_NODES: usize = 9;

const PARAMCOUNT_DIMS: Dims = Dims {
    channels: 4,
    embed: 2,
    ..DEMO_DIMS
};

const OVERSMOOTH_DIMS: Dims = Dims {
    channels: 4,
    ..DEMO_DIMS
};

/// Runs one command. `precision` is the raw `HGFE_PRECISION` value, if set.
pub fn run(cli: &Cli, precision: Option<&str>) -> CliResult<Outcome> {
    let g = &cli.global;
    match &cli.command {
        Command::Demo { dump } => demo(g, dump.as_deref()),
        Command::Gradcheck { inject_corruption } => gradcheck(g, *inject_corruption),
        Command::Spectral {
            nodes,
            density,
            k,
            filters,
            max_sweeps,
        } => spectral(g, *nodes, *density, k, filters, *max_sweeps),
        Command::Bench { sizes, repeats } => bench(g, sizes, *repeats, precision),
        Command::Paramcount => paramcount(g),
        Command::Oversmooth { depth } => oversmooth(g, *depth),
    }
}

fn json_only(g: &GlobalArgs, name: &str) -> CliResult<()> {
    if g.format == Some(Format::Csv) {
        return Err(CliError::Usage(format!("{name} reports are JSON only")));
    }
    Ok(())
}

fn check_dims(d: &Dims) -> CliResult<()> {
    for (name, v) in [
        ("b", d.batch),
        ("c", d.channels),
        ("h", d.height),
        ("wdt", d.width),
        ("w", d.window),
        ("d", d.embed),
    ] {
        if v == 0 {
            return Err(CliError::Usage(format!("--{name} must be positive")));
        }
    }
    Ok(())
}

fn ok(body: String) -> Outcome {
    Outcome { body, code: EXIT_OK }
}

fn fnv1a(t: &Tensor) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn mean_gate(gates: &[Tensor], c: usize) -> Vec<f64> {
    let mut acc = vec![0.0; c];
    for g in gates {
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / gates.len().max(1) as f64).collect()
}

pub fn demo(g: &GlobalArgs, dump: Option<&Path>) -> CliResult<Outcome> {
    json_only(g, "demo")?;
    let d = g.dims(DEMO_DIMS);
    check_dims(&d)?;
    let cfg = g.hgfe_config(OutputActivation::Sigmoid);
    let params = HgfeParams::init(derive_seed(g.seed, 2), d.channels, d.embed, d.window, cfg)?;
    let shape = [d.batch, d.channels, d.height, d.width];
    let f = uniform_tensor(derive_seed(g.seed, 1), &shape, -1.0, 1.0);
    let out = hgfe_forward_detailed(&f, &params)?;
    if let Some(path) = dump {
        io::write_tensor(path, &out.output)?;
    }
    let report = DemoReport {
        command: "demo",
        seed: g.seed,
        config: ConfigEcho::new(d, &cfg),
        input_shape: shape.to_vec(),
        output_shape: out.output.shape().to_vec(),
        alpha_intra: mean_gate(&out.alpha_intra, d.channels),
        alpha_inter: mean_gate(&out.alpha_inter, d.channels),
        attention_row_sum_max_deviation: RowDeviation {
            intra: out.intra_row_deviation.clone(),
            inter: out.inter_row_deviation.clone(),
        },
        output_checksum: Checksum {
            sum: out.output.sum(),
            abs_sum: out.output.data().iter().map(|v| v.abs()).sum(),
            fnv1a: fnv1a(&out.output),
        },
    };
    Ok(ok(to_json(&report)?))
}

fn check_entry(
    target: &'static str,
    input_shape: Vec<usize>,
    embed: usize,
    window: Option<usize>,
    r: GradCheckReport,
) -> CheckEntry {
    CheckEntry {
        target,
        input_shape,
        embed,
        window,
        passed: r.passed,
        max_rel_error: r.max_rel_error(),
        params: r.params,
    }
}

pub fn gradcheck(g: &GlobalArgs, inject_corruption: bool) -> CliResult<Outcome> {
    json_only(g, "gradcheck")?;
    let d = g.dims(GRADCHECK_DIMS);
    check_dims(&d)?;
    let cfg = g.hgfe_config(OutputActivation::Sigmoid);
    let afm_channels = g.channels.unwrap_or(4);
    let afm_embed = g.embed.unwrap_or(3);
    let opts = GradCheckOptions::default();
    let afm_opts = GradCheckOptions {
        corruption: inject_corruption.then_some(Corruption {
            param: 0,
            index: 0,
            delta: 1e-2,
        }),
        ..opts
    };
    let afm = afm_grad_check(g.seed, AFM_CHECK_NODES, afm_channels, afm_embed, cfg.afm, afm_opts)?;
    let shape = [d.batch, d.channels, d.height, d.width];
    let block = hgfe_grad_check(g.seed, shape, d.embed, d.window, cfg, opts)?;
    let checks = vec![
        check_entry("afm", vec![AFM_CHECK_NODES, afm_channels], afm_embed, None, afm),
        check_entry("hgfe", shape.to_vec(), d.embed, Some(d.window), block),
    ];
    let passed = checks.iter().all(|c| c.passed);
    let report = GradcheckReport {
        command: "gradcheck",
        seed: g.seed,
        precision: "f64",
        eps: opts.eps,
        tolerance: opts.tol,
        norm: cfg.afm.norm,
        activation: cfg.afm.activation,
        residual: cfg.residual,
        checks,
        passed,
    };
    Ok(Outcome {
        body: to_json(&report)?,
        code: if passed { EXIT_OK } else { EXIT_CHECK_FAILED },
    })
}

/// Spectral response named on the command line.
#[derive(Debug, Clone)]
pub struct TargetFilter {
    pub label: String,
    kind: FilterKind,
}

#[derive(Debug, Clone, Copy)]
enum FilterKind {
    Exp(f64),
    Ramp,
    Const(f64),
    Step(f64),
}

impl TargetFilter {
    pub fn parse(s: &str) -> CliResult<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> CliResult<f64> {
            a.and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("filter {s:?} needs a numeric argument")))
        };
        let kind = match name {
            "exp" => FilterKind::Exp(num(arg)?),
            "ramp" if arg.is_none() => FilterKind::Ramp,
            "const" => FilterKind::Const(num(arg)?),
            "step" => FilterKind::Step(num(arg)?),
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown filter {s:?} (exp:T, ramp, const:V, step:CUT)"
                )))
            }
        };
        Ok(TargetFilter {
            label: s.to_string(),
            kind,
        })
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        match self.kind {
            FilterKind::Exp(t) => (-t * lambda).exp(),
            FilterKind::Ramp => lambda / DEFAULT_LAMBDA_MAX,
            FilterKind::Const(v) => v,
            FilterKind::Step(cut) => {
                if lambda < cut {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn spectral(
    g: &GlobalArgs,
    nodes: usize,
    density: f64,
    orders: &[usize],
    filters: &[String],
    max_sweeps: usize,
) -> CliResult<Outcome> {
    if nodes == 0 || nodes > MAX_SPECTRAL_NODES {
        return Err(CliError::Usage(format!(
            "--nodes must be in 1..={MAX_SPECTRAL_NODES}, got {nodes}"
        )));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(CliError::Usage(format!("--density must be in [0, 1], got {density}")));
    }
    if orders.is_empty() || filters.is_empty() {
        return Err(CliError::Usage("need at least one order and one filter".into()));
    }
    let targets = filters
        .iter()
        .map(|s| TargetFilter::parse(s))
        .collect::<CliResult<Vec<_>>>()?;

    let adj = GraphAdjacency::random(derive_seed(g.seed, 401), nodes, density, true);
    let l = normalized_laplacian(&adj);
    let basis = eigendecompose_with_budget(&l, max_sweeps)?;
    let lmax = DEFAULT_LAMBDA_MAX;
    let signal = uniform_tensor(derive_seed(g.seed, 402), &[nodes], -1.0, 1.0);
    let eigvecs: Vec<Vec<f64>> = (0..nodes)
        .map(|i| (0..nodes).map(|r| basis.u.at(r, i)).collect())
        .collect();

    let mut errors = Vec::new();
    for t in &targets {
        let exact = spectral_filter_exact(&basis, |x| t.eval(x), signal.data())?;
        for &k in orders {
            let coeffs = fit_chebyshev(|x| t.eval(x), k, lmax)?;
            let mut error: f64 = 0.0;
            for (u, &lam) in eigvecs.iter().zip(&basis.lambda) {
                let pu = chebyshev_apply(&l, &coeffs, u)?;
                let response: f64 = pu.iter().zip(u).map(|(a, b)| a * b).sum();
                error = error.max((response - t.eval(lam)).abs());
            }
            let approx = chebyshev_apply(&l, &coeffs, signal.data())?;
            errors.push(ErrorRow {
                filter: t.label.clone(),
                k,
                error,
                signal_error: max_gap(&approx, &exact),
            });
        }
    }

    let sample = |f: &dyn Fn(f64) -> f64| basis.lambda.iter().map(|&x| f(x)).collect::<Vec<f64>>();
    let mut responses: Vec<ResponseRow> = targets
        .iter()
        .map(|t| ResponseRow {
            kind: "target",
            filter: t.label.clone(),
            alpha: None,
            k: None,
            values: sample(&|x| t.eval(x)),
        })
        .collect();
    if let [low, high, ..] = targets.as_slice() {
        let k = *orders.iter().max().unwrap_or(&0);
        let lc = fit_chebyshev(|x| low.eval(x), k, lmax)?;
        let hc = fit_chebyshev(|x| high.eval(x), k, lmax)?;
        for (kind, t, c) in [("low", low, &lc), ("high", high, &hc)] {
            responses.push(ResponseRow {
                kind,
                filter: t.label.clone(),
                alpha: None,
                k: Some(k),
                values: sample(&|x| c.evaluate(x)),
            });
        }
        for alpha in INTERP_ALPHAS {
            let mix = interpolate_filter_coeffs(&lc, &hc, alpha)?;
            responses.push(ResponseRow {
                kind: "interp",
                filter: format!("{}|{}", low.label, high.label),
                alpha: Some(alpha),
                k: Some(k),
                values: sample(&|x| mix.evaluate(x)),
            });
        }
    }

    let report = SpectralReport {
        command: "spectral",
        seed: g.seed,
        nodes,
        density,
        lambda_max: lmax,
        eigenvalues: basis.lambda.clone(),
        errors,
        responses,
    };
    let body = match g.format.unwrap_or(Format::Csv) {
        Format::Csv => spectral_csv(&report)?,
        Format::Json => to_json(&report)?,
    };
    Ok(ok(body))
}

pub fn parse_precision(raw: Option<&str>) -> CliResult<DType> {
    match raw {
        None | Some("f64") => Ok(DType::F64),
        Some("f32") => Ok(DType::F32),
        Some(other) => Err(CliError::Usage(format!(
            "HGFE_PRECISION must be f32 or f64, got {other:?}"
        ))),
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Least-squares slope of `ys` on `xs`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn bench(g: &GlobalArgs, sizes: &[usize], repeats: usize, precision: Option<&str>) -> CliResult<Outcome> {
    let dtype = parse_precision(precision)?;
    let d = g.dims(DEMO_DIMS);
    check_dims(&d)?;
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    if sizes.is_empty() {
        return Err(CliError::Usage("--sizes is empty".into()));
    }
    let mut grid_sizes = Vec::with_capacity(sizes.len());
    for &s in sizes {
        if s == 0 || s % d.window != 0 {
            return Err(CliError::Usage(format!(
                "size {s} is not a positive multiple of the window size w={}",
                d.window
            )));
        }
        grid_sizes.push((s, s));
    }
    let rows = bench_scaling(
        &grid_sizes,
        BenchOptions {
            window: d.window,
            channels: d.channels,
            embed: d.embed,
            repeats,
            dtype,
            seed: g.seed,
        },
    )?;
    let mut entries = Vec::with_capacity(rows.len());
    for r in rows {
        let counts = pairwise_op_count(r.height, r.width, d.window)?;
        let flops = flop_estimate(CostDims {
            batch: d.batch,
            channels: d.channels,
            height: r.height,
            width: r.width,
            window: d.window,
            embed: d.embed,
        })?
        .flops
        .expect("flop_estimate fills flops");
        entries.push(BenchEntry {
            height: r.height,
            width: r.width,
            n_h: r.height / d.window,
            n_w: r.width / d.window,
            full_count: r.full_count,
            supernode_count: r.supernode_count,
            ratio: counts.ratio,
            full_measured: r.full_measured,
            supernode_measured: r.supernode_measured,
            full_time_s: r.full_time,
            supernode_time_s: r.supernode_time,
            local_term: flops.local_term,
            global_term: flops.global_term,
            precision: dtype_name(dtype),
        });
    }
    let points: Vec<(f64, f64)> = entries
        .iter()
        .map(|e| ((e.n_h * e.n_w) as f64, e.supernode_count as f64))
        .collect();
    let report = BenchReport {
        command: "bench",
        seed: g.seed,
        window: d.window,
        channels: d.channels,
        embed: d.embed,
        batch: d.batch,
        repeats,
        precision: dtype_name(dtype),
        supernode_slope: loglog_slope(&points),
        rows: entries,
    };
    let body = match g.format.unwrap_or(Format::Csv) {
        Format::Csv => bench_csv(&report)?,
        Format::Json => to_json(&report)?,
    };
    Ok(ok(body))
}

pub fn paramcount(g: &GlobalArgs) -> CliResult<Outcome> {
    json_only(g, "paramcount")?;
    let d = g.dims(PARAMCOUNT_DIMS);
    check_dims(&d)?;
    let cfg = g.hgfe_config(OutputActivation::Sigmoid);
    let mut conventions = Vec::new();
    for shared_afm in [false, true] {
        for projection_bias in [true, false] {
            let r = param_count(
                d.channels,
                d.embed,
                ParamConventions {
                    shared_afm,
                    projection_bias,
                },
            )?;
            conventions.push(r.params.expect("param_count fills params"));
        }
    }
    let model = HgfeParams::init(g.seed, d.channels, d.embed, d.window, cfg)?;
    let flops = flop_estimate(CostDims {
        batch: d.batch,
        channels: d.channels,
        height: d.height,
        width: d.width,
        window: d.window,
        embed: d.embed,
    })?
    .flops
    .expect("flop_estimate fills flops");
    let report = ParamcountReport {
        command: "paramcount",
        seed: g.seed,
        channels: d.channels,
        embed: d.embed,
        closed_form: closed_form_param_count(d.channels as u64, d.embed as u64),
        model_count: model.param_count() as u64,
        conventions,
        flops,
    };
    Ok(ok(to_json(&report)?))
}

pub fn oversmooth(g: &GlobalArgs, depth: usize) -> CliResult<Outcome> {
    let d = g.dims(OVERSMOOTH_DIMS);
    check_dims(&d)?;
    if depth == 0 {
        return Err(CliError::Usage("--depth must be at least 1".into()));
    }
    let cfg = g.hgfe_config(OutputActivation::Identity);
    if cfg.afm.activation != OutputActivation::Identity {
        return Err(CliError::Usage(
            "oversmooth tracks pre-activation features and needs --act identity".into(),
        ));
    }
    let params = HgfeParams::init(derive_seed(g.seed, 302), d.channels, d.embed, d.window, cfg)?;
    let f = uniform_tensor(
        derive_seed(g.seed, 301),
        &[d.batch, d.channels, d.height, d.width],
        -1.0,
        1.0,
    );
    let spread = spread_profile(&f, &params, depth)?;
    let dirichlet = dirichlet_profile(&f, &params, depth)?;
    let spread_non_increasing = spread
        .windows(2)
        .all(|w| w[1].iter().zip(&w[0]).all(|(b, a)| *b <= a + 1e-12));
    let dirichlet_decreased = dirichlet[depth] < dirichlet[0];
    let report = OversmoothReport {
        command: "oversmooth",
        seed: g.seed,
        config: ConfigEcho::new(d, &cfg),
        depth,
        spread,
        dirichlet,
        spread_non_increasing,
        dirichlet_decreased,
    };
    let body = match g.format.unwrap_or(Format::Json) {
        Format::Csv => oversmooth_csv(&report)?,
        Format::Json => to_json(&report)?,
    };
    Ok(Outcome {
        body,
        code: if spread_non_increasing {
            EXIT_OK
        } else {
            EXIT_CHECK_FAILED
        },
    })
}
