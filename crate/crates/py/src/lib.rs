//! Python bindings. Matrices cross the boundary as lists of row lists.

use peso_core::harness::config::RunConfigFile;
use peso_core::{Beta2Warmup, Error, Matrix, RunTrace};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) | Error::Convergence { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Rows) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Top-r SVD: returns `(u, sigma, vt)`.
#[pyfunction]
fn svd_top_r(a: Rows, r: usize) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let f = peso_core::svd_top_r(&matrix(a)?, r).map_err(py_err)?;
    Ok((f.u.to_rows(), f.sigma, f.vt.to_rows()))
}

/// Thin SVD: returns `(u, sigma, vt)`.
#[pyfunction]
fn svd_full(a: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let f = peso_core::svd_full(&matrix(a)?).map_err(py_err)?;
    Ok((f.u.to_rows(), f.sigma, f.vt.to_rows()))
}

/// Thin QR of a tall matrix: returns `(q, r)`.
#[pyfunction]
fn qr_thin(a: Rows) -> PyResult<(Rows, Rows)> {
    let f = peso_core::qr_thin(&matrix(a)?).map_err(py_err)?;
    Ok((f.q.to_rows(), f.r.to_rows()))
}

/// Rotation `R` such that `source · Rᵀ` best matches `target`.
#[pyfunction]
fn orthogonal_procrustes(source: Rows, target: Rows) -> PyResult<Rows> {
    let al = peso_core::orthogonal_procrustes(&matrix(source)?, &matrix(target)?).map_err(py_err)?;
    Ok(al.rotation.to_rows())
}

/// `s = r_l · diag(sigma) · r_rᵀ`: returns `(r_l, sigma, r_r)`.
#[pyfunction]
fn polar_refactor(s: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let f = peso_core::polar_refactor(&matrix(s)?).map_err(py_err)?;
    Ok((f.r_l.to_rows(), f.sigma, f.r_r.to_rows()))
}

#[pyfunction]
fn rms_norm(a: Rows) -> PyResult<f64> {
    peso_core::rms_norm(&matrix(a)?).map_err(py_err)
}

/// Adapters `(a, b)` with `a·b = −svd_top_r(g, r)/gamma`.
#[pyfunction]
fn restart_adapters_from_gradient(g: Rows, r: usize, gamma: f64) -> PyResult<(Rows, Rows)> {
    let res = peso_core::restart_adapters_from_gradient(&matrix(g)?, r, gamma).map_err(py_err)?;
    Ok((res.adapter.a.to_rows(), res.adapter.b.to_rows()))
}

#[pyfunction]
#[pyo3(signature = (t, window, restart_step, beta2_min = 0.95, beta2_final = 0.999))]
fn beta2_at(t: u64, window: u64, restart_step: u64, beta2_min: f64, beta2_final: f64) -> PyResult<f64> {
    let schedule = Beta2Warmup {
        beta2_min,
        beta2_final,
        window,
        restart_step,
    };
    peso_core::beta2_at(&schedule, t).map_err(py_err)
}

/// Runs a JSON config. Returns a dict with `trace_csv`, `summary`,
/// `restart_steps`, `final_w` and `aborted_at` (None on completion).
#[pyfunction]
fn run<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfigFile::from_json(config_json).map_err(py_err)?;
    let res = py.detach(|| cfg.execute()).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("trace_csv", res.trace.to_csv())?;
    match &res.summary {
        Some(s) => {
            let text = serde_json::to_string(s).expect("summary serializes");
            out.set_item("summary", json_to_py(py, &text)?)?;
        }
        None => out.set_item("summary", py.None())?,
    }
    out.set_item("restart_steps", res.restart_steps.clone())?;
    out.set_item("final_w", res.final_w.to_rows())?;
    out.set_item("aborted_at", res.abort.as_ref().map(|a| a.step))?;
    Ok(out)
}

/// Summary dict of a trace CSV.
#[pyfunction]
fn trace_summary<'py>(py: Python<'py>, csv: &str) -> PyResult<Bound<'py, PyAny>> {
    let trace = RunTrace::from_csv(csv).map_err(py_err)?;
    let s = peso_core::trace_summary(&trace).map_err(py_err)?;
    json_to_py(py, &serde_json::to_string(&s).expect("summary serializes"))
}

#[pymodule]
fn peso(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(svd_top_r, m)?)?;
    m.add_function(wrap_pyfunction!(svd_full, m)?)?;
    m.add_function(wrap_pyfunction!(qr_thin, m)?)?;
    m.add_function(wrap_pyfunction!(orthogonal_procrustes, m)?)?;
    m.add_function(wrap_pyfunction!(polar_refactor, m)?)?;
    m.add_function(wrap_pyfunction!(rms_norm, m)?)?;
    m.add_function(wrap_pyfunction!(restart_adapters_from_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(beta2_at, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(trace_summary, m)?)?;
    m.add("TRACE_HEADER", peso_core::TRACE_HEADER)?;
    Ok(())
}
