//! Python bindings for `slt-forge`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use forge::attention::{mha_forward_x, AttentionMaskSet, HeadWeights, MhaWeights, SequenceBatch};
use forge::construct::{
    construct_slt_mha, measure_mha_error, required_dims_mha, softmax_perturbation_bound, MaskedMha, SourceMhaConfig,
};
use forge::harness::{
    calibrate_c, sweep_blocks, sweep_hidden_dim, sweep_seq_len, BlockSweepConfig, CalibrationConfig, DimSweepConfig,
    SeqSweepConfig,
};
use forge::linalg::Matrix;
use forge::popup::{scale_sweep, topk_mask, PopupConfig};
use forge::rng::RngStream;
use forge::subset_sum::{
    approx_matrix_product, required_block_size, solve_subset_sum_with, FactorizeOptions, SearchMode,
    SubsetSumInstance, DEFAULT_C_HAT,
};
use forge::SltError;

fn err(e: SltError) -> PyErr {
    match e {
        SltError::InvalidArgument(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn search(optimal: bool) -> FactorizeOptions {
    if optimal {
        FactorizeOptions::optimal()
    } else {
        FactorizeOptions::default()
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config<C: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<C> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("malformed config: {e}"))),
        None => Ok(C::default()),
    }
}

/// Multi-head attention weights; each head is `(W_Q, W_K, W_V, W_O)` with
/// row-vector convention (`q = x W_Q`).
#[pyclass(name = "MhaWeights", frozen, skip_from_py_object)]
struct PyMhaWeights {
    inner: MhaWeights,
}

#[pymethods]
impl PyMhaWeights {
    #[new]
    fn new(heads: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)>) -> PyResult<Self> {
        let heads = heads
            .into_iter()
            .map(|(q, k, v, o)| Ok(HeadWeights { w_q: matrix(q)?, w_k: matrix(k)?, w_v: matrix(v)?, w_o: matrix(o)? }))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self { inner: MhaWeights::new(heads).map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize, usize) {
        let w = &self.inner;
        (w.h(), w.d1(), w.d2(), w.d_k(), w.d_v())
    }

    fn heads(&self) -> Vec<[Vec<Vec<f64>>; 4]> {
        self.inner.heads().iter().map(|h| h.matrices().map(|m| m.to_rows())).collect()
    }

    fn is_theory_compliant(&self) -> PyResult<bool> {
        self.inner.is_theory_compliant().map_err(err)
    }

    #[pyo3(signature = (x, causal = false))]
    fn forward(&self, x: Vec<Vec<f64>>, causal: bool) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        let mask = if causal { AttentionMaskSet::causal(x.rows()) } else { AttentionMaskSet::full(x.rows()) };
        Ok(mha_forward_x(&x, &mask, &self.inner).map_err(err)?.to_rows())
    }
}

/// Binary masks over a random source network plus per-stage diagnostics.
#[pyclass(name = "MaskedMha", frozen, skip_from_py_object)]
struct PyMaskedMha {
    inner: MaskedMha,
}

#[pymethods]
impl PyMaskedMha {
    fn all_hit(&self) -> bool {
        self.inner.all_hit()
    }

    fn max_qk_err(&self) -> f64 {
        self.inner.max_qk_err()
    }

    fn max_vo_err(&self) -> f64 {
        self.inner.max_vo_err()
    }

    fn pruned(&self) -> PyResult<PyMhaWeights> {
        Ok(PyMhaWeights { inner: self.inner.pruned().map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (items, target, tolerance = 0.0, optimal = false))]
fn solve_subset_sum(items: Vec<f64>, target: f64, tolerance: f64, optimal: bool) -> PyResult<(Vec<usize>, f64, bool)> {
    let mode = if optimal { SearchMode::Optimal } else { SearchMode::FirstWithinTolerance };
    let inst = SubsetSumInstance::new(items, target, tolerance).map_err(err)?;
    let r = solve_subset_sum_with(&inst, mode).map_err(err)?;
    Ok((r.indices(), r.achieved_error, r.is_hit()))
}

/// Returns `(M1, M2, max_entry_error, all_hit)`.
#[pyfunction(name = "approx_matrix_product")]
#[pyo3(signature = (w, w1, w2, eps_entry, optimal = false))]
fn py_approx_matrix_product(
    w: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
    eps_entry: f64,
    optimal: bool,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64, bool)> {
    let p = approx_matrix_product(&matrix(w)?, &matrix(w1)?, &matrix(w2)?, eps_entry, &search(optimal)).map_err(err)?;
    Ok((p.m1.to_rows(), p.m2.to_rows(), p.achieved_max_err, p.all_hit()))
}

#[pyfunction(name = "required_block_size")]
#[pyo3(signature = (d1, d2, eps, c_hat = DEFAULT_C_HAT))]
fn py_required_block_size(d1: usize, d2: usize, eps: f64, c_hat: f64) -> PyResult<usize> {
    required_block_size(d1, d2, eps, c_hat).map_err(err)
}

#[pyfunction(name = "required_dims_mha")]
#[pyo3(signature = (eps, h, d1, d2, alpha, c_hat = DEFAULT_C_HAT))]
fn py_required_dims_mha(eps: f64, h: usize, d1: usize, d2: usize, alpha: f64, c_hat: f64) -> PyResult<(usize, usize)> {
    required_dims_mha(eps, h, d1, d2, alpha, c_hat).map_err(err)
}

#[pyfunction(name = "softmax_perturbation_bound")]
fn py_softmax_perturbation_bound(eps_max: f64, d1: usize, alpha: f64) -> f64 {
    softmax_perturbation_bound(eps_max, d1, alpha)
}

#[pyfunction(name = "construct_slt_mha")]
#[pyo3(signature = (target, n_k, n_v, eps, alpha, seed, optimal = false))]
fn py_construct_slt_mha(
    target: &PyMhaWeights,
    n_k: usize,
    n_v: usize,
    eps: f64,
    alpha: f64,
    seed: u64,
    optimal: bool,
) -> PyResult<PyMaskedMha> {
    let w = &target.inner;
    let cfg = SourceMhaConfig::new(n_k, n_v, w.h(), w.d1(), w.d2()).map_err(err)?;
    let inner = construct_slt_mha(w, &cfg, eps, alpha, &RngStream::new(seed).derive("source"), &search(optimal))
        .map_err(err)?;
    Ok(PyMaskedMha { inner })
}

/// Max row-wise output distance over the given inputs (full attention).
#[pyfunction(name = "measure_mha_error")]
fn py_measure_mha_error(target: &PyMhaWeights, masked: &PyMaskedMha, inputs: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let batches = inputs
        .into_iter()
        .map(|x| {
            let x = matrix(x)?;
            let t = x.rows();
            SequenceBatch::new(x, AttentionMaskSet::full(t)).map_err(err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    measure_mha_error(&target.inner, &masked.inner, &batches).map_err(err)
}

#[pyfunction(name = "topk_mask")]
fn py_topk_mask(scores: Vec<Vec<f64>>, k_percent: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(topk_mask(&matrix(scores)?, k_percent).map_err(err)?.to_rows())
}

/// Sweep results as plain Python objects; configs are JSON strings.
#[pyfunction(name = "sweep_hidden_dim")]
#[pyo3(signature = (seed, trials, config = None))]
fn py_sweep_hidden_dim<'py>(py: Python<'py>, seed: u64, trials: usize, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: DimSweepConfig = self::config(config)?;
    let r = py.detach(|| sweep_hidden_dim(&cfg, seed, trials)).map_err(err)?;
    json_to_py(py, &r)
}

#[pyfunction(name = "sweep_seq_len")]
#[pyo3(signature = (seed, trials, config = None))]
fn py_sweep_seq_len<'py>(py: Python<'py>, seed: u64, trials: usize, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: SeqSweepConfig = self::config(config)?;
    let r = py.detach(|| sweep_seq_len(&cfg, seed, trials)).map_err(err)?;
    json_to_py(py, &r)
}

#[pyfunction(name = "sweep_blocks")]
#[pyo3(signature = (seed, trials, config = None))]
fn py_sweep_blocks<'py>(py: Python<'py>, seed: u64, trials: usize, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: BlockSweepConfig = self::config(config)?;
    let r = py.detach(|| sweep_blocks(&cfg, seed, trials)).map_err(err)?;
    json_to_py(py, &r)
}

#[pyfunction(name = "edge_popup_sweep")]
#[pyo3(signature = (scales, seeds, seed = 0, config = None))]
fn py_edge_popup_sweep<'py>(
    py: Python<'py>,
    scales: Vec<f64>,
    seeds: Vec<u64>,
    seed: u64,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: PopupConfig = self::config(config)?;
    let r = py.detach(|| scale_sweep(&scales, &seeds, &cfg, &RngStream::new(seed).derive("data"))).map_err(err)?;
    json_to_py(py, &r)
}

#[pyfunction(name = "calibrate_c")]
#[pyo3(signature = (seed = 0, config = None))]
fn py_calibrate_c<'py>(py: Python<'py>, seed: u64, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: CalibrationConfig = self::config(config)?;
    let r = py.detach(|| calibrate_c(&cfg, seed)).map_err(err)?;
    json_to_py(py, &r)
}

#[pymodule]
#[pyo3(name = "slt_forge")]
fn slt_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", forge::harness::VERSION)?;
    m.add("DEFAULT_C_HAT", DEFAULT_C_HAT)?;
    m.add_class::<PyMhaWeights>()?;
    m.add_class::<PyMaskedMha>()?;
    m.add_function(wrap_pyfunction!(solve_subset_sum, m)?)?;
    m.add_function(wrap_pyfunction!(py_approx_matrix_product, m)?)?;
    m.add_function(wrap_pyfunction!(py_required_block_size, m)?)?;
    m.add_function(wrap_pyfunction!(py_required_dims_mha, m)?)?;
    m.add_function(wrap_pyfunction!(py_softmax_perturbation_bound, m)?)?;
    m.add_function(wrap_pyfunction!(py_construct_slt_mha, m)?)?;
    m.add_function(wrap_pyfunction!(py_measure_mha_error, m)?)?;
    m.add_function(wrap_pyfunction!(py_topk_mask, m)?)?;
    m.add_function(wrap_pyfunction!(py_sweep_hidden_dim, m)?)?;
    m.add_function(wrap_pyfunction!(py_sweep_seq_len, m)?)?;
    m.add_function(wrap_pyfunction!(py_sweep_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(py_edge_popup_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(py_calibrate_c, m)?)?;
    Ok(())
}
