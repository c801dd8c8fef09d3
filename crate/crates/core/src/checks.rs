//! Seeded gradient-check fixtures for the AFM unit and the full block.

use crate::afm::{afm_on_tape, AfmConfig, AfmParams, AfmVars};
use crate::block::{hgfe_on_tape, HgfeConfig, HgfeParams};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::init::{derive_seed, uniform_tensor};

/// `sum(weights * afm(H))` over an N×C input drawn from U[-3, 3].
pub fn afm_grad_check(
    seed: u64,
    nodes: usize,
    channels: usize,
    embed: usize,
    config: AfmConfig,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let p = AfmParams::init(derive_seed(seed, 201), channels, embed)?;
    let h = uniform_tensor(derive_seed(seed, 202), &[nodes, channels], -3.0, 3.0);
    let weights = uniform_tensor(derive_seed(seed, 203), &[nodes, channels], -1.0, 1.0);
    let named: Vec<_> = p.groups().iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect();
    grad_check(
        |tape, vars| {
            let hv = tape.leaf(h.clone());
            let av = AfmVars::from_vars(vars, p.leaky_slope)?;
            let t = afm_on_tape(tape, hv, &av, &config)?;
            tape.weighted_sum(t.output, weights.clone())
        },
        &named,
        opts,
    )
}

/// `sum(weights * hgfe(F))` over a B×C×H×W input drawn from U[-1, 1], checked
/// against every parameter group of both AFM instances and the projection.
pub fn hgfe_grad_check(
    seed: u64,
    shape: [usize; 4],
    embed: usize,
    window: usize,
    config: HgfeConfig,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = HgfeParams::init(derive_seed(seed, 211), shape[1], embed, window, config)?;
    let f = uniform_tensor(derive_seed(seed, 212), &shape, -1.0, 1.0);
    let weights = uniform_tensor(derive_seed(seed, 213), &shape, -1.0, 1.0);
    grad_check(
        |tape, vars| {
            let fv = tape.leaf(f.clone());
            let hv = params.vars_from(vars)?;
            let t = hgfe_on_tape(tape, fv, &hv, params.window, &params.config)?;
            tape.weighted_sum(t.output, weights.clone())
        },
        &params.groups(),
        opts,
    )
}
