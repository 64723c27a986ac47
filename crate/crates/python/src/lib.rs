//! Python bindings: configuration handling, the analysis, optimization,
//! gradient-check and sweep drivers, and a few geometric kernels.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cutflow::cutter::decompose::{decompose_element, Phase};
use cutflow::driver::{self, RunOptions};
use cutflow::gcmma::{self, Derivatives, GcmmaConfig, Values};
use cutflow::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Parsed run configuration.
#[pyclass(name = "RunConfig")]
#[derive(Clone)]
struct RunConfig {
    inner: driver::RunConfig,
}

#[pymethods]
impl RunConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        driver::RunConfig::from_toml(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        driver::RunConfig::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    #[getter]
    fn divisions(&self) -> (usize, usize) {
        (self.inner.mesh.divisions[0], self.inner.mesh.divisions[1])
    }

    #[setter]
    fn set_divisions(&mut self, d: (usize, usize)) {
        self.inner.mesh.divisions = [d.0, d.1];
    }

    #[getter]
    fn criteria(&self) -> Vec<String> {
        self.inner.criteria.iter().map(|c| c.name.clone()).collect()
    }

    #[getter]
    fn max_outer(&self) -> Option<usize> {
        self.inner.optimization.as_ref().map(|o| o.gcmma.max_outer)
    }

    #[setter]
    fn set_max_outer(&mut self, n: usize) -> PyResult<()> {
        match self.inner.optimization.as_mut() {
            Some(o) => {
                o.gcmma.max_outer = n;
                Ok(())
            }
            None => Err(PyValueError::new_err("configuration has no [optimization] block")),
        }
    }

    fn __repr__(&self) -> String {
        let [nx, ny] = self.inner.mesh.divisions;
        format!("RunConfig({nx}x{ny}, {} criteria)", self.inner.criteria.len())
    }
}

fn options(output: Option<PathBuf>, restart: Option<PathBuf>) -> RunOptions {
    RunOptions { output, restart }
}

/// Solves the configured geometry; returns criterion values and the
/// interface mass flow.
#[pyfunction]
fn analyze<'py>(py: Python<'py>, config: &RunConfig) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let (values, flux) = py
        .detach(|| driver::analyze(&cfg).map(|a| (a.values.clone(), a.interface_mass_flow)))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    for (spec, v) in config.inner.criteria.iter().zip(values) {
        d.set_item(&spec.name, v)?;
    }
    d.set_item("interface_mass_flow", flux)?;
    Ok(d)
}

/// Runs the design loop, writing the usual output files.
#[pyfunction]
#[pyo3(signature = (config, output=None, restart=None))]
fn optimize<'py>(
    py: Python<'py>,
    config: &RunConfig,
    output: Option<PathBuf>,
    restart: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let r = py.detach(|| driver::run_optimization(&cfg, &options(output, restart))).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("design", r.design)?;
    d.set_item("objective", r.values.objective)?;
    d.set_item("constraints", r.values.constraints)?;
    d.set_item("iterations", r.iterations)?;
    d.set_item("converged", r.converged)?;
    d.set_item("feasible", r.feasible)?;
    d.set_item("first_feasible", r.first_feasible)?;
    d.set_item("criteria", r.summary.criteria)?;
    Ok(d)
}

/// Adjoint against finite-difference design derivatives:
/// `(function, variable, adjoint, finite_difference)` rows.
#[pyfunction]
fn gradcheck(py: Python<'_>, config: &RunConfig) -> PyResult<Vec<(String, usize, f64, f64)>> {
    let cfg = config.inner.clone();
    let rows = py.detach(|| driver::gradcheck(&cfg)).map_err(to_py)?;
    Ok(rows.into_iter().map(|r| (r.function, r.variable, r.analytic, r.finite_difference)).collect())
}

/// Analysis over the `[sweep]` values: `(value, criteria)` pairs.
#[pyfunction]
#[pyo3(signature = (config, output=None))]
fn sweep(py: Python<'_>, config: &RunConfig, output: Option<PathBuf>) -> PyResult<Vec<(f64, Vec<f64>)>> {
    let cfg = config.inner.clone();
    py.detach(|| {
        driver::run_sweep(&cfg, &options(output, None)).map(|r| r.into_iter().map(|(v, a)| (v, a.values)).collect())
    })
    .map_err(to_py)
}

/// Splits a rectangular element by the bilinear level set; returns
/// `(phase, area)` per piece with phase "fluid" or "solid".
#[pyfunction]
fn decompose(origin: (f64, f64), h: (f64, f64), phi: [f64; 4]) -> Vec<(&'static str, f64)> {
    decompose_element([origin.0, origin.1], [h.0, h.1], phi)
        .pieces
        .iter()
        .map(|p| (if p.phase == Phase::Fluid { "fluid" } else { "solid" }, p.area))
        .collect()
}

/// Smooth KS minimum and its weights.
#[pyfunction]
fn ks_min(values: Vec<f64>, beta: f64) -> PyResult<(f64, Vec<f64>)> {
    cutflow::design_field::ks_min_with_weights(&values, beta).map_err(to_py)
}

#[pyfunction]
fn set_strict_order(on: bool) {
    cutflow::linalg::set_sequential_factorization(on);
}

struct Callback<'py> {
    f: Bound<'py, PyAny>,
    last: Option<Derivatives>,
    error: Option<PyErr>,
}

impl gcmma::Problem for Callback<'_> {
    fn values(&mut self, x: &[f64]) -> cutflow::Result<Values> {
        let r = self
            .f
            .call1((x.to_vec(),))
            .and_then(|r| r.extract::<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)>());
        match r {
            Ok((objective, constraints, g0, g)) => {
                self.last = Some(Derivatives { objective: g0, constraints: g });
                Ok(Values { objective, constraints })
            }
            Err(e) => {
                let msg = e.to_string();
                self.error = Some(e);
                Err(Error::Argument(format!("callback failed: {msg}")))
            }
        }
    }

    fn gradients(&mut self) -> cutflow::Result<Derivatives> {
        self.last.clone().ok_or_else(|| Error::Internal("gradients requested before values".into()))
    }
}

/// GCMMA on a Python problem. `f(x)` returns
/// `(objective, constraints, objective_gradient, constraint_gradients)`.
#[pyfunction]
#[pyo3(signature = (f, x0, lower, upper, max_outer=200, tolerance=1e-6))]
fn minimize<'py>(
    py: Python<'py>,
    f: Bound<'py, PyAny>,
    x0: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    max_outer: usize,
    tolerance: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut problem = Callback { f, last: None, error: None };
    let config = GcmmaConfig { max_outer, tolerance, ..GcmmaConfig::default() };
    let out = match gcmma::minimize(&mut problem, config, lower, upper, x0) {
        Ok(out) => out,
        Err(e) => return Err(problem.error.take().unwrap_or_else(|| to_py(e))),
    };
    let d = PyDict::new(py);
    d.set_item("x", out.x)?;
    d.set_item("objective", out.values.objective)?;
    d.set_item("constraints", out.values.constraints)?;
    d.set_item("iterations", out.iterations)?;
    d.set_item("converged", out.converged)?;
    Ok(d)
}

#[pymodule]
fn cutflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RunConfig>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(ks_min, m)?)?;
    m.add_function(wrap_pyfunction!(set_strict_order, m)?)?;
    m.add_function(wrap_pyfunction!(minimize, m)?)?;
    Ok(())
}
