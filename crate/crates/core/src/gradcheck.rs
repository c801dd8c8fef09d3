//! Finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{HgfeError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;
/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2eps` per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(HgfeError::contract(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape(), out)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub eps: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Perturbation applied to one analytic gradient entry, for negative controls.
#[derive(Debug, Clone, Copy)]
pub struct Corruption {
    pub param: usize,
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    pub corruption: Option<Corruption>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: DEFAULT_EPS,
            tol: DEFAULT_TOL,
            corruption: None,
        }
    }
}

/// Evaluates a tape-built scalar function at `params` and returns its value.
fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(HgfeError::contract("grad_check function must return a scalar"));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of `f` against central differences, parameter by parameter.
///
/// `f` receives one leaf per entry of `params`, in order.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.tol > 0.0) {
        return Err(HgfeError::contract("tolerance must be positive"));
    }
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut checks = Vec::with_capacity(params.len());
    for (k, (name, _)) in params.iter().enumerate() {
        let mut analytic = grads.wrt(vars[k]);
        if let Some(c) = opts.corruption.filter(|c| c.param == k) {
            analytic.data_mut()[c.index] += c.delta;
        }
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = values.clone();
                probe[k] = x.clone();
                evaluate(&f, &probe)
            },
            &values[k],
            opts.eps,
        )?;
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for (a, b) in analytic.data().iter().zip(numeric.data()) {
            max_abs = max_abs.max((a - b).abs());
            max_rel = max_rel.max(relative_error(*a, *b));
        }
        checks.push(ParamCheck {
            name: name.clone(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    let passed = checks.iter().all(|c| c.max_rel_error <= opts.tol);
    Ok(GradCheckReport {
        params: checks,
        tolerance: opts.tol,
        eps: opts.eps,
        passed,
    })
}
