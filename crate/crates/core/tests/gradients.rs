use hgfe_core::afm::{afm_on_tape, AfmConfig, AfmParams, AfmVars, GROUP_NAMES};
use hgfe_core::block::{hgfe_on_tape, HgfeConfig, HgfeParams, Residual};
use hgfe_core::gradcheck::{grad_check, Corruption, GradCheckOptions};
use hgfe_core::init::uniform_tensor;
use hgfe_core::supernode::{inter_window_on_tape, ProjectionParams};
use hgfe_core::tape::Tape;
use hgfe_core::window::{intra_window_on_tape, PartitionMode, WindowGrid};
use hgfe_core::Tensor;

fn afm_params(seed: u64) -> (AfmParams, Vec<(String, Tensor)>) {
    let p = AfmParams::init(seed, 4, 3).unwrap();
    let named = p.groups().iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect();
    (p, named)
}

#[test]
fn afm_gradients_match_finite_differences() {
    let (p, named) = afm_params(1);
    // Wide enough that logits land on both sides of the LeakyReLU kink.
    let h = uniform_tensor(2, &[9, 4], -3.0, 3.0);
    let weights = uniform_tensor(3, &[9, 4], -1.0, 1.0);
    for cfg in [
        AfmConfig::default(),
        AfmConfig {
            norm: hgfe_core::NormMode::SigmoidSoftmax,
            activation: hgfe_core::OutputActivation::Identity,
        },
    ] {
        let report = grad_check(
            |tape, vars| {
                let hv = tape.leaf(h.clone());
                let av = AfmVars::from_vars(vars, p.leaky_slope)?;
                let t = afm_on_tape(tape, hv, &av, &cfg)?;
                tape.weighted_sum(t.output, weights.clone())
            },
            &named,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        let names: Vec<&str> = report.params.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, GROUP_NAMES);
        assert!(report.max_rel_error() <= 1e-5);
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let p = AfmParams::init(4, 3, 2).unwrap();
    let weights = uniform_tensor(5, &[6, 3], -1.0, 1.0);
    let h = uniform_tensor(6, &[6, 3], -1.0, 1.0);
    let report = grad_check(
        |tape, vars| {
            let av = p.bind(tape);
            let t = afm_on_tape(tape, vars[0], &av, &AfmConfig::default())?;
            tape.weighted_sum(t.output, weights.clone())
        },
        &[("h".into(), h)],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn corrupted_gradient_is_caught() {
    let (p, named) = afm_params(7);
    let h = uniform_tensor(8, &[9, 4], -1.0, 1.0);
    let opts = GradCheckOptions {
        corruption: Some(Corruption {
            param: 6,
            index: 0,
            delta: 1e-2,
        }),
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        |tape, vars| {
            let hv = tape.leaf(h.clone());
            let av = AfmVars::from_vars(vars, p.leaky_slope)?;
            let t = afm_on_tape(tape, hv, &av, &AfmConfig::default())?;
            tape.sum(t.output)
        },
        &named,
        opts,
    )
    .unwrap();
    assert!(!report.passed);
    assert!(report.params[6].max_rel_error > 1e-5);
}

/// Every coordinate agrees with central differences to within 1e-8 absolute,
/// a few times the round-off of the differences themselves.
fn hgfe_check(residual: Residual) {
    let config = HgfeConfig {
        residual,
        ..HgfeConfig::default()
    };
    let params = HgfeParams::init(9, 3, 2, 3, config).unwrap();
    let f = uniform_tensor(10, &[1, 3, 6, 6], -1.0, 1.0);
    let weights = uniform_tensor(11, &[1, 3, 6, 6], -1.0, 1.0);
    let report = grad_check(
        |tape, vars| {
            let fv = tape.leaf(f.clone());
            let hv = params.vars_from(vars)?;
            let t = hgfe_on_tape(tape, fv, &hv, params.window, &params.config)?;
            tape.weighted_sum(t.output, weights.clone())
        },
        &params.groups(),
        GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(report.params.len(), 20);
    for p in &report.params {
        assert!(
            p.max_abs_error <= 1e-8,
            "{residual:?} {}: {:e}",
            p.name,
            p.max_abs_error
        );
    }
}

#[test]
fn hgfe_gradients_agree_to_round_off() {
    hgfe_check(Residual::Input);
}

#[test]
fn hgfe_local_residual_gradients() {
    hgfe_check(Residual::Local);
}

#[test]
fn padded_partition_gradients() {
    let p = AfmParams::init(12, 2, 2).unwrap();
    let proj = ProjectionParams::init(13, 2).unwrap();
    let f = uniform_tensor(14, &[1, 2, 5, 3], -1.0, 1.0);
    let weights = uniform_tensor(15, &[1, 2, 5, 3], -1.0, 1.0);
    let grid = WindowGrid::new(f.shape(), 2, PartitionMode::Pad).unwrap();
    let report = grad_check(
        |tape, vars| {
            let afm = p.bind(tape);
            let inter = p.bind(tape);
            let pv = proj.bind(tape);
            let local = intra_window_on_tape(tape, vars[0], &grid, &afm, &AfmConfig::default())?;
            let g = inter_window_on_tape(tape, local.output, &grid, &inter, &pv, &AfmConfig::default())?;
            tape.weighted_sum(g.output, weights.clone())
        },
        &[("f".into(), f.clone())],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn locality_and_reach_of_gradients() {
    let p = AfmParams::init(16, 2, 2).unwrap();
    let proj = ProjectionParams::init(17, 2).unwrap();
    let f = uniform_tensor(18, &[1, 2, 4, 4], -1.0, 1.0);
    let grid = WindowGrid::new(f.shape(), 2, PartitionMode::Strict).unwrap();
    // Loss restricted to window 0 (top-left 2×2 block of both channels).
    let mut mask = vec![0.0; 32];
    for ch in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                mask[ch * 16 + y * 4 + x] = 1.0;
            }
        }
    }
    let mask = Tensor::new(&[1, 2, 4, 4], mask).unwrap();
    let in_window0 = |k: usize| (k % 16) / 4 < 2 && k % 4 < 2;

    let mut tape = Tape::new();
    let fv = tape.leaf(f.clone());
    let av = p.bind(&mut tape);
    let local = intra_window_on_tape(&mut tape, fv, &grid, &av, &AfmConfig::default()).unwrap();
    let loss = tape.weighted_sum(local.output, mask.clone()).unwrap();
    let g = tape.backward(loss).unwrap().wrt(fv);
    for (k, v) in g.data().iter().enumerate() {
        if in_window0(k) {
            assert!(*v != 0.0);
        } else {
            assert_eq!(*v, 0.0, "intra gradient leaked to offset {k}");
        }
    }

    let mut tape = Tape::new();
    let fv = tape.leaf(f);
    let av = p.bind(&mut tape);
    let pv = proj.bind(&mut tape);
    let global = inter_window_on_tape(&mut tape, fv, &grid, &av, &pv, &AfmConfig::default()).unwrap();
    let loss = tape.weighted_sum(global.output, mask).unwrap();
    let g = tape.backward(loss).unwrap().wrt(fv);
    for win in 1..4 {
        let (wr, wc) = (win / 2, win % 2);
        let touched = (0..32)
            .filter(|&k| (k % 16) / 4 / 2 == wr && (k % 4) / 2 == wc)
            .any(|k| g.data()[k] != 0.0);
        assert!(touched, "window {win} does not reach window 0");
    }
}
