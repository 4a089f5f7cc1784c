//! Python bindings: systems, certificates, coordinate changes, simulation and
//! the four verification pipelines.

use std::path::PathBuf;

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stabxform::cli::{self, CliError, PipelineKind, RunFlags, RunOutput, SystemSpec};
use stabxform::kfun::MonotoneScalarFn;
use stabxform::lyap::LyapunovCertificate;
use stabxform::sys::{self as core_sys, DisturbanceSignal, DisturbanceSpec, DisturbedSystem, Trajectory};
use stabxform::verify::PipelineOptions;
use stabxform::xform;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Config(_) => PyValueError::new_err(e.to_string()),
        CliError::Construction(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn vec_in(x: Vec<f64>, n: usize, what: &str) -> PyResult<DVector<f64>> {
    if x.len() != n {
        return Err(PyValueError::new_err(format!("{what} has length {}, expected {n}", x.len())));
    }
    Ok(DVector::from_vec(x))
}

fn vec_out(x: &DVector<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

fn scalar(name: &str, src: Option<String>) -> PyResult<Option<MonotoneScalarFn>> {
    src.map(|s| cli::scalar_fn(name, &s).map_err(cli_err)).transpose()
}

/// A disturbed system `ẋ = f(x, d)`.
#[pyclass(name = "System", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySystem {
    inner: DisturbedSystem,
}

#[pymethods]
impl PySystem {
    /// A built-in system by name.
    #[staticmethod]
    fn catalog(name: &str) -> PyResult<Self> {
        let e = core_sys::catalog(name).map_err(value_err)?;
        Ok(Self { inner: e.system })
    }

    /// A system from expressions in `x1..xn` and `d1..dm`.
    #[staticmethod]
    #[pyo3(signature = (rhs, inputs = 0, disturbance_radius = None, name = None))]
    fn inline(rhs: Vec<String>, inputs: usize, disturbance_radius: Option<f64>, name: Option<String>) -> PyResult<Self> {
        let spec = SystemSpec {
            catalog: None,
            name,
            rhs: Some(rhs),
            inputs,
            disturbance_radius,
        };
        Ok(Self {
            inner: cli::inline_system(&spec).map_err(cli_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_owned()
    }

    #[getter]
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }

    #[getter]
    fn dim_d(&self) -> usize {
        self.inner.dim_d()
    }

    #[pyo3(signature = (x, d = None))]
    fn rhs(&self, x: Vec<f64>, d: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = vec_in(x, self.inner.dim_x(), "x")?;
        let d = match d {
            Some(d) => vec_in(d, self.inner.dim_d(), "d")?,
            None => DVector::zeros(self.inner.dim_d()),
        };
        Ok(vec_out(&self.inner.rhs(&x, &d)))
    }

    /// Simulates from `x0` under a seeded piecewise-constant disturbance of
    /// the given amplitude (zero by default). Returns `(times, states)`.
    #[pyo3(signature = (x0, t_end, tol = 1e-8, seed = 0, amplitude = 0.0, mean_dwell = 1.0))]
    fn simulate(
        &self,
        x0: Vec<f64>,
        t_end: f64,
        tol: f64,
        seed: u64,
        amplitude: f64,
        mean_dwell: f64,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let x0 = vec_in(x0, self.inner.dim_x(), "x0")?;
        let sig = if amplitude > 0.0 && self.inner.dim_d() > 0 {
            core_sys::make_disturbance(
                &DisturbanceSpec {
                    dim: self.inner.dim_d(),
                    amplitude,
                    mean_dwell,
                    horizon: t_end,
                },
                seed,
            )
        } else {
            DisturbanceSignal::zero(self.inner.dim_d())
        };
        let tr = core_sys::simulate(&self.inner, &x0, &sig, t_end, tol).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(unpack(&tr))
    }

    fn __repr__(&self) -> String {
        format!("System('{}', dim_x={}, dim_d={})", self.inner.name(), self.inner.dim_x(), self.inner.dim_d())
    }
}

fn unpack(tr: &Trajectory) -> (Vec<f64>, Vec<Vec<f64>>) {
    (tr.times.clone(), tr.states.iter().map(vec_out).collect())
}

/// A Lyapunov certificate `V` with optional decay rate, ISS gain and bounds.
#[pyclass(name = "Certificate", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCertificate {
    inner: LyapunovCertificate,
}

#[pymethods]
impl PyCertificate {
    #[staticmethod]
    fn catalog(name: &str) -> PyResult<Self> {
        let e = core_sys::catalog(name).map_err(value_err)?;
        Ok(Self { inner: e.certificate })
    }

    /// `V` as an expression in `x1..xn`; comparison functions as expressions in `s`.
    #[staticmethod]
    #[pyo3(signature = (v, dim, decay = None, iss_gain = None, lower = None, upper = None))]
    fn inline(
        v: &str,
        dim: usize,
        decay: Option<String>,
        iss_gain: Option<String>,
        lower: Option<String>,
        upper: Option<String>,
    ) -> PyResult<Self> {
        let mut cert = cli::inline_certificate(v, dim).map_err(cli_err)?;
        cert.decay = scalar("decay", decay)?;
        cert.iss_gain = scalar("iss_gain", iss_gain)?;
        match (scalar("lower", lower)?, scalar("upper", upper)?) {
            (Some(lo), Some(hi)) => cert.bounds = Some((lo, hi)),
            (None, None) => {}
            _ => return Err(PyValueError::new_err("'lower' and 'upper' go together")),
        }
        Ok(Self { inner: cert })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.value(&vec_in(x, self.inner.dim(), "x")?))
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(vec_out(&self.inner.gradient(&vec_in(x, self.inner.dim(), "x")?)))
    }

    fn __repr__(&self) -> String {
        format!("Certificate('{}', dim={})", self.inner.name(), self.inner.dim())
    }
}

/// A change of variables `y = T(x)`.
#[pyclass(name = "CoordinateChange", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyChange {
    inner: xform::CoordinateChange,
}

#[pymethods]
impl PyChange {
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn level(&self) -> f64 {
        self.inner.level()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = vec_in(x, self.inner.dim(), "x")?;
        self.inner.forward(&x).map(|y| vec_out(&y)).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn inverse(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let y = vec_in(y, self.inner.dim(), "y")?;
        self.inner.inverse(&y).map(|x| vec_out(&x)).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// `DT(x)` as a list of rows.
    fn jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let x = vec_in(x, self.inner.dim(), "x")?;
        let j = self.inner.jacobian(&x).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok((0..j.nrows()).map(|i| j.row(i).iter().copied().collect()).collect())
    }
}

/// `T(x) = γ⁻¹(V(x))·Q(x)` for a certificate, γ (expression in `s` or
/// "identity") and reference level.
#[pyfunction]
#[pyo3(signature = (certificate, gamma = "identity", level = 1.0))]
fn build_change(certificate: &PyCertificate, gamma: &str, level: f64) -> PyResult<PyChange> {
    let g = cli::scalar_fn("gamma", gamma).map_err(cli_err)?;
    let inner = xform::build_change(&certificate.inner, &g, level).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyChange { inner })
}

/// Outcome of a pipeline run.
#[pyclass(name = "PipelineResult", frozen)]
struct PyResult_ {
    #[pyo3(get)]
    passed: bool,
    #[pyo3(get)]
    report: String,
    /// One `KIND: PASS|FAIL (...)` line per check.
    #[pyo3(get)]
    summaries: Vec<String>,
    #[pyo3(get)]
    change: Option<PyChange>,
    trajectories: Vec<Trajectory>,
}

#[pymethods]
impl PyResult_ {
    /// `(times, states)` per simulated trajectory.
    fn trajectories(&self) -> Vec<(Vec<f64>, Vec<Vec<f64>>)> {
        self.trajectories.iter().map(unpack).collect()
    }

    fn __repr__(&self) -> String {
        format!("PipelineResult(passed={}, checks={:?})", self.passed, self.summaries)
    }
}

#[allow(clippy::too_many_arguments)]
fn options(
    gamma: Option<String>,
    signals: Option<usize>,
    seed: Option<u64>,
    tol: Option<f64>,
    t_end: Option<f64>,
    c: Option<f64>,
    lam: Option<f64>,
) -> PyResult<PipelineOptions> {
    let mut o = PipelineOptions::default();
    o.gamma = scalar("gamma", gamma)?;
    o.signals = signals.unwrap_or(o.signals);
    o.seed = seed.unwrap_or(o.seed);
    o.tol = tol.unwrap_or(o.tol);
    o.t_end = t_end.unwrap_or(o.t_end);
    o.c_bound = c.unwrap_or(o.c_bound);
    o.lambda = lam.unwrap_or(o.lambda);
    Ok(o)
}

fn to_result(out: RunOutput) -> PyResult_ {
    PyResult_ {
        passed: out.report.pass,
        report: out.report.to_text().unwrap_or_default(),
        summaries: out.report.checks.iter().map(|c| c.summary()).collect(),
        change: out.change.map(|inner| PyChange { inner }),
        trajectories: out.trajectories,
    }
}

/// Runs one pipeline: "ugas2uges", "iss2ises", "ises2hinf" or "flownorm".
/// `ises_gain` marks the system as already ISES for "ises2hinf".
#[pyfunction]
#[pyo3(signature = (pipeline, system, certificate, *, gamma = None, signals = None, seed = None, tol = None, t_end = None, c = None, lam = None, ises_gain = None))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    py: Python<'_>,
    pipeline: &str,
    system: &PySystem,
    certificate: &PyCertificate,
    gamma: Option<String>,
    signals: Option<usize>,
    seed: Option<u64>,
    tol: Option<f64>,
    t_end: Option<f64>,
    c: Option<f64>,
    lam: Option<f64>,
    ises_gain: Option<String>,
) -> PyResult<PyResult_> {
    let kind = match pipeline {
        "ugas2uges" => PipelineKind::Ugas2uges,
        "iss2ises" => PipelineKind::Iss2ises,
        "ises2hinf" => PipelineKind::Ises2hinf,
        "flownorm" => PipelineKind::Flownorm,
        other => return Err(PyValueError::new_err(format!("unknown pipeline '{other}'"))),
    };
    let opts = options(gamma, signals, seed, tol, t_end, c, lam)?;
    let gain = scalar("ises_gain", ises_gain)?;
    let (sys, cert) = (system.inner.clone(), certificate.inner.clone());
    let out = py
        .detach(move || cli::run_pipeline(kind, sys, &cert, &opts, gain))
        .map_err(cli_err)?;
    Ok(to_result(out))
}

/// Runs a TOML config like the command-line tool; returns the exit code.
#[pyfunction]
#[pyo3(signature = (path, out = None, seed = None, tol = None, signals = None))]
fn run_config(
    py: Python<'_>,
    path: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    tol: Option<f64>,
    signals: Option<usize>,
) -> i32 {
    let flags = RunFlags { out, seed, tol, signals };
    py.detach(move || cli::run(&path, &flags, &mut std::io::sink()))
}

/// `(name, dim_x, dim_d, has_decay, has_iss_gain)` per built-in system.
#[pyfunction]
fn list_catalog() -> Vec<(String, usize, usize, bool, bool)> {
    core_sys::list_catalog()
        .into_iter()
        .map(|r| (r.name.to_owned(), r.dim_x, r.dim_d, r.has_decay, r.has_iss_gain))
        .collect()
}

#[pymodule]
#[pyo3(name = "stabxform")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyCertificate>()?;
    m.add_class::<PyChange>()?;
    m.add_class::<PyResult_>()?;
    m.add_function(wrap_pyfunction!(build_change, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(list_catalog, m)?)?;
    m.add("EXIT_PASS", cli::EXIT_PASS)?;
    m.add("EXIT_CHECK_FAILED", cli::EXIT_CHECK_FAILED)?;
    m.add("EXIT_CONSTRUCTION", cli::EXIT_CONSTRUCTION)?;
    m.add("EXIT_CONFIG", cli::EXIT_CONFIG)?;
    Ok(())
}
