//! Python bindings. Tensors cross the boundary as `Tensor` objects holding a
//! shape and a flat row-major list; reports come back as plain dicts.

use std::cell::RefCell;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use hgfe_core::afm::{afm_forward_detailed, AfmConfig, AfmParams, NormMode, OutputActivation};
use hgfe_core::baselines;
use hgfe_core::block::{self, CostDims, HgfeConfig, HgfeParams, ParamConventions, Residual};
use hgfe_core::gradcheck::GradCheckOptions;
use hgfe_core::{checks, io, spectral, DType, HgfeError, PartitionMode};

fn to_py(e: HgfeError) -> PyErr {
    match e {
        HgfeError::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        HgfeError::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Serializes through JSON so nested reports arrive as dicts and lists.
fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Tensor", module = "hgfe", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: hgfe_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, dtype = "f64"))]
    fn new(shape: Vec<usize>, data: Vec<f64>, dtype: &str) -> PyResult<Self> {
        let dtype = parse_dtype(dtype)?;
        let inner = hgfe_core::Tensor::with_dtype(&shape, data, dtype).map_err(to_py)?;
        Ok(PyTensor { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (seed, shape, lo = -1.0, hi = 1.0))]
    fn uniform(seed: u64, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        PyTensor {
            inner: hgfe_core::init::uniform_tensor(seed, &shape, lo, hi),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        dtype_name(self.inner.dtype())
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn bit_eq(&self, other: &PyTensor) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, dtype={})", self.inner.shape(), self.dtype())
    }
}

fn parse_dtype(s: &str) -> PyResult<DType> {
    match s {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        _ => Err(PyValueError::new_err(format!("dtype must be f32 or f64, got {s:?}"))),
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn afm_config(norm: &str, activation: &str) -> PyResult<AfmConfig> {
    let norm = match norm {
        "plain" => NormMode::Plain,
        "sigmoid-softmax" => NormMode::SigmoidSoftmax,
        _ => return Err(PyValueError::new_err(format!("unknown norm {norm:?}"))),
    };
    let activation = match activation {
        "sigmoid" => OutputActivation::Sigmoid,
        "identity" => OutputActivation::Identity,
        _ => return Err(PyValueError::new_err(format!("unknown activation {activation:?}"))),
    };
    Ok(AfmConfig { norm, activation })
}

fn hgfe_config(norm: &str, activation: &str, residual: &str, pad: bool) -> PyResult<HgfeConfig> {
    let residual = match residual {
        "input" => Residual::Input,
        "local" => Residual::Local,
        "off" => Residual::Off,
        _ => return Err(PyValueError::new_err(format!("unknown residual {residual:?}"))),
    };
    Ok(HgfeConfig {
        afm: afm_config(norm, activation)?,
        residual,
        partition: if pad { PartitionMode::Pad } else { PartitionMode::Strict },
    })
}

#[pyclass(name = "AfmParams", module = "hgfe", from_py_object)]
#[derive(Clone)]
pub struct PyAfmParams {
    inner: AfmParams,
}

#[pymethods]
impl PyAfmParams {
    #[new]
    fn new(seed: u64, channels: usize, embed: usize) -> PyResult<Self> {
        Ok(PyAfmParams {
            inner: AfmParams::init(seed, channels, embed).map_err(to_py)?,
        })
    }

    /// Copy whose high-frequency branch equals the low one.
    fn with_tied_branches(&self) -> Self {
        PyAfmParams {
            inner: self.inner.clone().with_tied_branches(),
        }
    }

    fn groups(&self) -> Vec<(String, PyTensor)> {
        self.inner
            .groups()
            .iter()
            .map(|(n, t)| (n.to_string(), PyTensor { inner: (*t).clone() }))
            .collect()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    /// Returns `(output, alpha, attention)` for an N×C input; attention is C×N×N.
    #[pyo3(signature = (h, norm = "plain", activation = "sigmoid"))]
    fn forward(&self, h: &PyTensor, norm: &str, activation: &str) -> PyResult<(PyTensor, Vec<f64>, PyTensor)> {
        let out = afm_forward_detailed(&h.inner, &self.inner, &afm_config(norm, activation)?).map_err(to_py)?;
        Ok((
            PyTensor { inner: out.output },
            out.alpha.values().to_vec(),
            PyTensor {
                inner: out.attention.tensor().clone(),
            },
        ))
    }
}

#[pyclass(name = "HgfeBlock", module = "hgfe")]
pub struct PyHgfeBlock {
    inner: HgfeParams,
}

#[pymethods]
impl PyHgfeBlock {
    #[new]
    #[pyo3(signature = (seed, channels, embed, window = 8, norm = "plain", activation = "sigmoid", residual = "input", pad = false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        channels: usize,
        embed: usize,
        window: usize,
        norm: &str,
        activation: &str,
        residual: &str,
        pad: bool,
    ) -> PyResult<Self> {
        let config = hgfe_config(norm, activation, residual, pad)?;
        Ok(PyHgfeBlock {
            inner: HgfeParams::init(seed, channels, embed, window, config).map_err(to_py)?,
        })
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn forward(&self, f: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: block::hgfe_forward(&f.inner, &self.inner).map_err(to_py)?,
        })
    }

    /// Output plus per-window and per-sample gates and op counts.
    fn forward_detailed<'py>(&self, py: Python<'py>, f: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
        let out = block::hgfe_forward_detailed(&f.inner, &self.inner).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("output", PyTensor { inner: out.output })?;
        d.set_item("local", PyTensor { inner: out.local })?;
        d.set_item("global", PyTensor { inner: out.global })?;
        let gates = |v: &[hgfe_core::Tensor]| v.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
        d.set_item("alpha_intra", gates(&out.alpha_intra))?;
        d.set_item("alpha_inter", gates(&out.alpha_inter))?;
        d.set_item("intra_row_deviation", out.intra_row_deviation)?;
        d.set_item("inter_row_deviation", out.inter_row_deviation)?;
        d.set_item("intra_cost", to_dict(py, &out.intra_cost)?)?;
        d.set_item("inter_cost", to_dict(py, &out.inter_cost)?)?;
        Ok(d)
    }

    fn spread_profile(&self, f: &PyTensor, depth: usize) -> PyResult<Vec<Vec<f64>>> {
        block::spread_profile(&f.inner, &self.inner, depth).map_err(to_py)
    }

    fn dirichlet_profile(&self, f: &PyTensor, depth: usize) -> PyResult<Vec<f64>> {
        block::dirichlet_profile(&f.inner, &self.inner, depth).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (channels, embed, shared_afm = false, projection_bias = true))]
fn param_count<'py>(
    py: Python<'py>,
    channels: usize,
    embed: usize,
    shared_afm: bool,
    projection_bias: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let report = block::param_count(
        channels,
        embed,
        ParamConventions {
            shared_afm,
            projection_bias,
        },
    )
    .map_err(to_py)?;
    to_dict(py, &report)
}

#[pyfunction]
fn closed_form_param_count(channels: u64, embed: u64) -> u64 {
    block::closed_form_param_count(channels, embed)
}

#[pyfunction]
fn flop_estimate<'py>(
    py: Python<'py>,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    window: usize,
    embed: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let report = block::flop_estimate(CostDims {
        batch,
        channels,
        height,
        width,
        window,
        embed,
    })
    .map_err(to_py)?;
    to_dict(py, &report)
}

#[pyfunction]
fn pairwise_op_count<'py>(py: Python<'py>, height: usize, width: usize, window: usize) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &baselines::pairwise_op_count(height, width, window).map_err(to_py)?)
}

#[pyfunction]
#[pyo3(signature = (seed = 0, nodes = 9, channels = 4, embed = 3, norm = "plain", activation = "sigmoid"))]
fn afm_grad_check<'py>(
    py: Python<'py>,
    seed: u64,
    nodes: usize,
    channels: usize,
    embed: usize,
    norm: &str,
    activation: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = afm_config(norm, activation)?;
    let r = checks::afm_grad_check(seed, nodes, channels, embed, cfg, GradCheckOptions::default()).map_err(to_py)?;
    to_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (seed = 0, shape = [1, 3, 6, 6], embed = 2, window = 3, residual = "input"))]
fn hgfe_grad_check<'py>(
    py: Python<'py>,
    seed: u64,
    shape: [usize; 4],
    embed: usize,
    window: usize,
    residual: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = hgfe_config("plain", "sigmoid", residual, false)?;
    let r = checks::hgfe_grad_check(seed, shape, embed, window, cfg, GradCheckOptions::default()).map_err(to_py)?;
    to_dict(py, &r)
}

/// Eigenvalues and eigenvectors (columns of an N×N tensor) of the normalized
/// Laplacian of a symmetric adjacency matrix.
#[pyfunction]
fn laplacian_eigen(adjacency: &PyTensor) -> PyResult<(Vec<f64>, PyTensor)> {
    let adj = spectral::GraphAdjacency::new(adjacency.inner.clone()).map_err(to_py)?;
    let basis = spectral::eigendecompose(&spectral::normalized_laplacian(&adj)).map_err(to_py)?;
    Ok((basis.lambda, PyTensor { inner: basis.u }))
}

/// Evaluates a Python callable on the Chebyshev nodes; the first exception
/// it raises is re-raised here.
fn fit_py(g: &Bound<'_, PyAny>, k: usize, lambda_max: f64) -> PyResult<spectral::ChebyshevCoeffs> {
    let failure: RefCell<Option<PyErr>> = RefCell::new(None);
    let eval = |x: f64| -> f64 {
        match g.call1((x,)).and_then(|v| v.extract::<f64>()) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let coeffs = spectral::fit_chebyshev(eval, k, lambda_max).map_err(to_py)?;
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(coeffs),
    }
}

#[pyfunction]
#[pyo3(signature = (g, k, lambda_max = 2.0))]
fn fit_chebyshev(g: &Bound<'_, PyAny>, k: usize, lambda_max: f64) -> PyResult<Vec<f64>> {
    Ok(fit_py(g, k, lambda_max)?.theta)
}

/// `p_K(L) x` with a Chebyshev fit of `g`, next to the exact `U g(Λ) Uᵀ x`.
#[pyfunction]
#[pyo3(signature = (adjacency, signal, g, k, lambda_max = 2.0))]
fn chebyshev_filter(
    adjacency: &PyTensor,
    signal: Vec<f64>,
    g: &Bound<'_, PyAny>,
    k: usize,
    lambda_max: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let adj = spectral::GraphAdjacency::new(adjacency.inner.clone()).map_err(to_py)?;
    let l = spectral::normalized_laplacian(&adj);
    let coeffs = fit_py(g, k, lambda_max)?;
    let approx = spectral::chebyshev_apply(&l, &coeffs, &signal).map_err(to_py)?;
    let basis = spectral::eigendecompose(&l).map_err(to_py)?;
    let mut xhat = spectral::gft(&basis, &signal, spectral::Direction::Forward).map_err(to_py)?;
    for (v, &lam) in xhat.iter_mut().zip(&basis.lambda) {
        *v *= g.call1((lam,))?.extract::<f64>()?;
    }
    let exact = spectral::gft(&basis, &xhat, spectral::Direction::Inverse).map_err(to_py)?;
    Ok((approx, exact))
}

#[pyfunction]
fn write_tensor(path: std::path::PathBuf, tensor: &PyTensor) -> PyResult<()> {
    io::write_tensor(path, &tensor.inner).map_err(to_py)
}

#[pyfunction]
fn read_tensor(path: std::path::PathBuf) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: io::read_tensor(path).map_err(to_py)?,
    })
}

#[pymodule]
fn hgfe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyAfmParams>()?;
    m.add_class::<PyHgfeBlock>()?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(flop_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_op_count, m)?)?;
    m.add_function(wrap_pyfunction!(afm_grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(hgfe_grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(laplacian_eigen, m)?)?;
    m.add_function(wrap_pyfunction!(fit_chebyshev, m)?)?;
    m.add_function(wrap_pyfunction!(chebyshev_filter, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    Ok(())
}
