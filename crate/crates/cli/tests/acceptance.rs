//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use hgfe_core::afm::{afm_forward, afm_forward_detailed, AfmConfig, AfmParams, NormMode};
use hgfe_core::baselines::{bench_scaling, pairwise_op_count, BenchOptions};
use hgfe_core::block::{
    closed_form_param_count, dirichlet_profile, flop_estimate_instrumented, hgfe_forward, param_count, spread_profile,
    CostDims, HgfeConfig, HgfeParams, ParamConventions,
};
use hgfe_core::checks::{afm_grad_check, hgfe_grad_check};
use hgfe_core::gradcheck::GradCheckOptions;
use hgfe_core::init::{uniform_tensor, SplitMix64};
use hgfe_core::io::{read_tensor, write_tensor};
use hgfe_core::spectral::{
    chebyshev_apply, eigendecompose, fit_chebyshev, gft, normalized_laplacian, spectral_filter_exact, Direction,
    GraphAdjacency,
};
use hgfe_core::supernode::{
    inter_window_forward, inter_window_on_tape, pool_supernodes, tile_context, ProjectionParams,
};
use hgfe_core::tape::Tape;
use hgfe_core::window::{
    intra_window_on_tape, nodes_to_window, partition_windows, reassemble, window_to_nodes, PartitionMode, WindowGrid,
    WindowSet,
};
use hgfe_core::{DType, OutputActivation, Tensor};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, u64);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn gradient_correctness() -> Outcome {
    let opts = GradCheckOptions::default();
    let afm = afm_grad_check(0, 9, 4, 3, AfmConfig::default(), opts).map_err(e)?;
    let block = hgfe_grad_check(0, [1, 3, 6, 6], 2, 3, HgfeConfig::default(), opts).map_err(e)?;
    let detail = format!(
        "afm max rel {:.2e}, hgfe max rel {:.2e}",
        afm.max_rel_error(),
        block.max_rel_error()
    );
    let failing: Vec<String> = afm
        .params
        .iter()
        .map(|p| ("afm", p))
        .chain(block.params.iter().map(|p| ("hgfe", p)))
        .filter(|(_, p)| p.max_rel_error > opts.tol)
        .map(|(t, p)| format!("{t}:{}", p.name))
        .collect();
    ensure(afm.passed && block.passed, || {
        format!("{detail}; over tolerance: {}", failing.join(" "))
    })?;
    Ok(detail)
}

fn attention_normalization() -> Outcome {
    let mut rng = SplitMix64::new(2);
    let mut worst: f64 = 0.0;
    for trial in 0..1000u64 {
        let n = 1 + rng.below(16);
        let c = 1 + rng.below(6);
        let d = 1 + rng.below(4);
        let scale = rng.uniform(0.1, 5.0);
        let norm = if trial % 2 == 0 {
            NormMode::Plain
        } else {
            NormMode::SigmoidSoftmax
        };
        let p = AfmParams::init(rng.next_u64(), c, d).map_err(e)?;
        let h = uniform_tensor(rng.next_u64(), &[n, c], -scale, scale);
        let out = afm_forward_detailed(
            &h,
            &p,
            &AfmConfig {
                norm,
                ..AfmConfig::default()
            },
        )
        .map_err(e)?;
        for dev in out.attention.row_sum_deviation() {
            worst = worst.max(dev);
        }
        ensure(out.alpha.values().iter().all(|&a| a > 0.0 && a < 1.0), || {
            format!("alpha left (0,1) at trial {trial}")
        })?;
    }
    ensure(worst <= 1e-12, || format!("row sum deviation {worst:e}"))?;
    Ok(format!("max row deviation {worst:.1e}"))
}

fn permutation_equivariance() -> Outcome {
    let mut rng = SplitMix64::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + rng.below(16);
        let c = 1 + rng.below(5);
        let p = AfmParams::init(rng.next_u64(), c, 3).map_err(e)?;
        let h = uniform_tensor(rng.next_u64(), &[n, c], -2.0, 2.0);
        let perm = rng.permutation(n);
        let cfg = AfmConfig::default();
        let lhs = afm_forward(&permute_rows(&h, &perm), &p, &cfg).map_err(e)?;
        let rhs = permute_rows(&afm_forward(&h, &p, &cfg).map_err(e)?, &perm);
        worst = worst.max(lhs.max_abs_diff(&rhs));
    }
    ensure(worst <= 1e-10, || format!("deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn degenerate_branches() -> Outcome {
    let p = AfmParams::init(4, 4, 3).map_err(e)?.with_tied_branches();
    let h = uniform_tensor(5, &[10, 4], -1.0, 1.0);
    let cfg = AfmConfig::default();
    let base = afm_forward(&h, &p, &cfg).map_err(e)?;
    let mut worst: f64 = 0.0;
    for draw in 0..50u64 {
        let mut q = p.clone();
        q.w_f = uniform_tensor(100 + draw, &[4, 4], -3.0, 3.0);
        q.b_f = uniform_tensor(200 + draw, &[4], -3.0, 3.0);
        worst = worst.max(afm_forward(&h, &q, &cfg).map_err(e)?.max_abs_diff(&base));
    }
    ensure(worst <= 1e-12, || format!("output moved by {worst:e}"))?;
    Ok(format!("max change {worst:.1e}"))
}

fn spectral_toolkit() -> Outcome {
    let mut rng = SplitMix64::new(6);
    let (mut recon, mut round_trip): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = 1 + rng.below(32);
        let adj = GraphAdjacency::random(rng.next_u64(), n, rng.uniform(0.0, 1.0), rng.below(2) == 0);
        let l = normalized_laplacian(&adj);
        let basis = eigendecompose(&l).map_err(e)?;
        recon = recon.max(basis.reconstruction_error(&l));
        ensure(basis.lambda.iter().all(|&x| (-1e-9..=2.0 + 1e-9).contains(&x)), || {
            "eigenvalue out of range".into()
        })?;
        let x = uniform_tensor(rng.next_u64(), &[n], -1.0, 1.0);
        let back = gft(
            &basis,
            &gft(&basis, x.data(), Direction::Forward).map_err(e)?,
            Direction::Inverse,
        )
        .map_err(e)?;
        round_trip = round_trip.max(
            back.iter()
                .zip(x.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    ensure(recon <= 1e-9, || format!("reconstruction {recon:e}"))?;
    ensure(round_trip <= 1e-10, || format!("GFT round trip {round_trip:e}"))?;

    let k2 = eigendecompose(&normalized_laplacian(&GraphAdjacency::complete(2))).map_err(e)?;
    let mut lam = k2.lambda.clone();
    lam.sort_by(f64::total_cmp);
    ensure((lam[0]).abs() <= 1e-10 && (lam[1] - 2.0).abs() <= 1e-10, || {
        format!("K2 spectrum {lam:?}")
    })?;

    // Largest entry of p_K(L) - g(L), one basis vector at a time.
    let adj = GraphAdjacency::random(7, 12, 0.3, true);
    let l = normalized_laplacian(&adj);
    let basis = eigendecompose(&l).map_err(e)?;
    let g = |x: f64| (-2.0 * x).exp();
    let mut errs = Vec::new();
    for k in [2, 4, 8, 16, 24] {
        let coeffs = fit_chebyshev(g, k, 2.0).map_err(e)?;
        let mut err: f64 = 0.0;
        for j in 0..12 {
            let mut x = vec![0.0; 12];
            x[j] = 1.0;
            let a = chebyshev_apply(&l, &coeffs, &x).map_err(e)?;
            let b = spectral_filter_exact(&basis, g, &x).map_err(e)?;
            err = err.max(a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
        }
        errs.push(err);
    }
    // Both K=16 and K=24 sit at round-off, so equality is allowed up to 1e-14.
    ensure(errs.windows(2).all(|w| w[1] <= w[0] + 1e-14), || {
        format!("errors not non-increasing: {errs:?}")
    })?;
    ensure(errs[4] <= 1e-3, || format!("K=24 error {:e}", errs[4]))?;
    Ok(format!(
        "recon {recon:.1e}, gft {round_trip:.1e}, K=24 error {:.1e}",
        errs[4]
    ))
}

fn locality_and_reach() -> Outcome {
    let p = AfmParams::init(16, 2, 2).map_err(e)?;
    let proj = ProjectionParams::init(17, 2).map_err(e)?;
    let f = uniform_tensor(18, &[1, 2, 4, 4], -1.0, 1.0);
    let grid = WindowGrid::new(f.shape(), 2, PartitionMode::Strict).map_err(e)?;
    let mut mask = vec![0.0; 32];
    for ch in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                mask[ch * 16 + y * 4 + x] = 1.0;
            }
        }
    }
    let mask = Tensor::new(&[1, 2, 4, 4], mask).map_err(e)?;
    let window_of = |k: usize| ((k % 16) / 4 / 2) * 2 + (k % 4) / 2;
    let cfg = AfmConfig::default();

    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let av = p.bind(&mut tape);
    let local = intra_window_on_tape(&mut tape, fv, &grid, &av, &cfg).map_err(e)?;
    let loss = tape.weighted_sum(local.output, mask.clone()).map_err(e)?;
    let grad = tape.backward(loss).map_err(e)?.wrt(fv);
    let leaked = (0..32).filter(|&k| window_of(k) != 0 && grad.data()[k] != 0.0).count();
    ensure(leaked == 0, || format!("{leaked} intra gradients crossed windows"))?;

    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let av = p.bind(&mut tape);
    let pv = proj.bind(&mut tape);
    let global = inter_window_on_tape(&mut tape, fv, &grid, &av, &pv, &cfg).map_err(e)?;
    let loss = tape.weighted_sum(global.output, mask).map_err(e)?;
    let grad = tape.backward(loss).map_err(e)?.wrt(fv);
    for win in 1..4 {
        ensure((0..32).any(|k| window_of(k) == win && grad.data()[k] != 0.0), || {
            format!("window {win} does not reach window 0")
        })?;
    }

    let two = uniform_tensor(19, &[2, 2, 4, 4], -1.0, 1.0);
    let mut moved = two.clone();
    for v in &mut moved.data_mut()[32..] {
        *v += 0.75;
    }
    let a = inter_window_forward(&two, &p, &proj, 2, &cfg, PartitionMode::Strict).map_err(e)?;
    let b = inter_window_forward(&moved, &p, &proj, 2, &cfg, PartitionMode::Strict).map_err(e)?;
    ensure(
        a.data()[..32]
            .iter()
            .zip(&b.data()[..32])
            .all(|(x, y)| x.to_bits() == y.to_bits()),
        || "sample 0 changed when sample 1 moved".into(),
    )?;
    Ok("intra leak 0, inter reach 3/3, samples isolated".into())
}

fn structural_round_trips() -> Outcome {
    for (seed, shape, w, mode) in [
        (20, [2, 3, 8, 12], 4, PartitionMode::Strict),
        (21, [1, 2, 7, 5], 3, PartitionMode::Pad),
        (22, [1, 1, 1, 1], 1, PartitionMode::Strict),
    ] {
        let f = uniform_tensor(seed, &shape, -1.0, 1.0);
        let (grid, set) = partition_windows(&f, w, mode).map_err(e)?;
        ensure(reassemble(&grid, &set).map_err(e)?.bit_eq(&f), || {
            format!("partition round trip {shape:?}")
        })?;
        for win in &set.windows {
            let nodes = window_to_nodes(win).map_err(e)?;
            ensure(nodes_to_window(&nodes, w).map_err(e)?.bit_eq(win), || {
                "window/node round trip".into()
            })?;
        }
    }
    for (seed, w) in [(30u64, 8usize), (31, 5), (32, 3)] {
        let v = uniform_tensor(seed, &[6], -100.0, 100.0);
        let grid = WindowGrid::new(&[1, 6, w, w], w, PartitionMode::Strict).map_err(e)?;
        let set = WindowSet {
            windows: vec![tile_context(&v, w).map_err(e)?],
        };
        let pooled = pool_supernodes(&set, &grid).map_err(e)?;
        ensure(pooled.v.reshape(&[6]).map_err(e)?.bit_eq(&v), || {
            format!("tile then pool at w={w}")
        })?;
    }
    let dir = tempfile::tempdir().map_err(e)?;
    for dtype in [DType::F64, DType::F32] {
        let t = uniform_tensor(33, &[2, 3, 4], -1.0, 1.0).to_dtype(dtype);
        let path = dir.path().join("t.hgt");
        write_tensor(&path, &t).map_err(e)?;
        let back = read_tensor(&path).map_err(e)?;
        ensure(back.bit_eq(&t) && back.dtype() == dtype, || {
            format!("HGT1 round trip {dtype:?}")
        })?;
    }
    Ok("partition, node reshape, tile/pool, HGT1 bit-exact".into())
}

fn complexity_claim() -> Outcome {
    let at64 = pairwise_op_count(64, 64, 8).map_err(e)?;
    ensure(at64.ratio == 4096, || format!("ratio {} at 64x64", at64.ratio))?;
    let sizes = [(16, 16), (32, 32), (64, 64)];
    let rows = bench_scaling(
        &sizes,
        BenchOptions {
            window: 8,
            channels: 8,
            embed: 4,
            repeats: 1,
            dtype: DType::F64,
            seed: 0,
        },
    )
    .map_err(e)?;
    let mut points = Vec::new();
    for r in &rows {
        ensure(
            r.full_measured == r.full_count && r.supernode_measured == r.supernode_count,
            || format!("measured counts differ at {}x{}", r.height, r.width),
        )?;
        let m = (r.height / 8) * (r.width / 8);
        let report = flop_estimate_instrumented(
            CostDims {
                batch: 1,
                channels: 4,
                height: r.height,
                width: r.width,
                window: 8,
                embed: 2,
            },
            1,
            HgfeConfig::default(),
        )
        .map_err(e)?;
        let inst = report.instrumented.unwrap();
        ensure(inst.inter.pairwise == (m * m) as u64, || {
            format!("inter pairs {} vs {}", inst.inter.pairwise, m * m)
        })?;
        ensure(inst.intra.pairwise == (m * 64 * 64) as u64, || {
            format!("intra pairs {}", inst.intra.pairwise)
        })?;
        points.push((m as f64, r.supernode_measured as f64));
    }
    let slope = hgfe_cli::commands::loglog_slope(&points).ok_or("degenerate sizes")?;
    ensure((slope - 2.0).abs() <= 0.05, || format!("slope {slope}"))?;
    Ok(format!("ratio 4096, slope {slope:.3}"))
}

fn parameter_accounting() -> Outcome {
    ensure(closed_form_param_count(4, 2) == 84, || "formula is not 84".into())?;
    let report = param_count(4, 2, ParamConventions::default())
        .map_err(e)?
        .params
        .unwrap();
    let total: u64 = report.breakdown.iter().map(|b| b.count).sum();
    ensure(total == report.exact, || {
        format!("breakdown {total} vs exact {}", report.exact)
    })?;
    let mut deltas = Vec::new();
    for side in [4usize, 8, 16, 32] {
        let params = HgfeParams::init(side as u64, 4, 2, 4, HgfeConfig::default()).map_err(e)?;
        let f = uniform_tensor(side as u64, &[1, 4, side, side], -1.0, 1.0);
        hgfe_forward(&f, &params).map_err(e)?;
        ensure(params.param_count() as u64 == report.exact, || {
            "model count differs from enumeration".into()
        })?;
        deltas.push(params.param_count() as i64 - 84);
    }
    ensure(deltas.iter().all(|&d| d == report.delta), || {
        format!("deltas {deltas:?}")
    })?;

    // exact/formula tends to the ratio of the C^2 coefficients: 4/3 shared, 2 separate.
    for (shared_afm, limit) in [(true, 4.0 / 3.0), (false, 2.0)] {
        let conv = ParamConventions {
            shared_afm,
            projection_bias: true,
        };
        let mut gaps = Vec::new();
        for c in [16, 64, 256] {
            let r = param_count(c, 2, conv).map_err(e)?.params.unwrap();
            gaps.push((r.ratio - limit).abs());
        }
        ensure(gaps.windows(2).all(|w| w[1] < w[0]) && gaps[2] < 0.01, || {
            format!("ratio does not approach {limit} (gaps {gaps:?})")
        })?;
    }
    Ok(format!(
        "formula 84, exact {}, delta {:+} at every size",
        report.exact, report.delta
    ))
}

fn over_smoothing() -> Outcome {
    let config = HgfeConfig {
        afm: AfmConfig {
            activation: OutputActivation::Identity,
            ..AfmConfig::default()
        },
        ..HgfeConfig::default()
    };
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..20u64 {
        let params = HgfeParams::init(seed, 4, 3, 4, config).map_err(e)?;
        let f = uniform_tensor(1000 + seed, &[1, 4, 8, 8], -1.0, 1.0);
        let spread = spread_profile(&f, &params, 4).map_err(e)?;
        for (t, pair) in spread.windows(2).enumerate() {
            for ch in 0..4 {
                ensure(pair[1][ch] <= pair[0][ch] + 1e-12, || {
                    format!("spread grew at seed {seed}, step {}, channel {ch}", t + 1)
                })?;
            }
        }
        let energy = dirichlet_profile(&f, &params, 4).map_err(e)?;
        ensure(energy[4] < energy[0], || {
            format!("energy did not drop at seed {seed}: {energy:?}")
        })?;
        worst_ratio = worst_ratio.max(energy[4] / energy[0]);
    }
    Ok(format!("20/20 fixtures, worst energy ratio {worst_ratio:.1e}"))
}

fn cli_contract() -> Outcome {
    let mut validated = 0;
    for args in [
        &["demo", "--seed", "7"][..],
        &["gradcheck", "--seed", "7"],
        &["paramcount", "--seed", "7"],
        &["oversmooth", "--seed", "7"],
        &["spectral", "--seed", "7", "--format", "json"],
    ] {
        let a = hgfe(args);
        let b = hgfe(args);
        ensure(a.stdout == b.stdout, || format!("{} not byte-identical", args[0]))?;
        validate(&json(&a))?;
        validated += 1;
    }
    let bench = hgfe(&["bench", "--sizes", "16", "--repeats", "1", "--format", "json"]);
    validate(&json(&bench))?;
    validated += 1;

    let expect = |args: &[&str], want: i32| -> Result<(), String> {
        let got = code(&hgfe(args));
        ensure(got == want, || format!("{args:?} exited {got}, expected {want}"))
    };
    expect(&["demo"], 0)?;
    expect(&["gradcheck", "--inject-corruption"], 1)?;
    expect(&["demo", "--w", "5"], 2)?;
    expect(&["bench", "--sizes", "20"], 2)?;
    expect(&["spectral", "--max-sweeps", "0"], 3)?;
    Ok(format!("{validated} reports schema-valid, exit codes 0/1/2/3"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_correctness, 30),
        ("attention normalization", attention_normalization, 10),
        ("permutation equivariance", permutation_equivariance, 10),
        ("degenerate-branch independence", degenerate_branches, 5),
        ("spectral toolkit", spectral_toolkit, 20),
        ("locality and reach", locality_and_reach, 10),
        ("structural round trips", structural_round_trips, 5),
        ("complexity", complexity_claim, 60),
        ("parameter accounting", parameter_accounting, 1),
        ("over-smoothing diagnostic", over_smoothing, 10),
        ("cli contract", cli_contract, 10),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > Duration::from_secs(*limit) => Err(format!("{detail}; over the {limit} s budget")),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if result.is_err() {
            failed += 1;
        }
        println!(
            "criterion {:>2} {tag} {name} ({:.2} s): {detail}",
            i + 1,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
