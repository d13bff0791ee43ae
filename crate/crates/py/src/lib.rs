//! Python bindings: scenario loading, kernels, inequality checks, control and suites.

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyComplex;
use pythonize::pythonize;
use serde::Serialize;

use mehler_core::control::Weight;
use mehler_core::functions::TestFunction;
use mehler_core::harnack::{self, GammaOperator};
use mehler_core::kernel::probe_frequencies as probes_for;
use mehler_core::measures::limit_triplet;
use mehler_core::scenario::{Lab as CoreLab, Scenario};
use mehler_core::stats::SeedSplitter;
use mehler_core::suite::{run_suite, Suite, SuiteOptions};
use mehler_core::MehlerError;

fn py_err(e: MehlerError) -> PyErr {
    if e.is_config() || matches!(e, MehlerError::Domain(_) | MehlerError::Misaligned { .. } | MehlerError::DimensionMismatch { .. }) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    pythonize(py, v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A validated scenario with its assembled systems.
#[pyclass(name = "Lab", frozen)]
struct PyLab {
    inner: CoreLab,
}

impl PyLab {
    fn control(&self) -> PyResult<&mehler_core::control::ControlSystem> {
        self.inner.control.as_ref().ok_or_else(|| PyValueError::new_err("scenario has no control operator"))
    }

    fn semilinear(&self) -> PyResult<&mehler_core::semilinear::SemilinearSystem> {
        self.inner.semilinear.as_ref().ok_or_else(|| PyValueError::new_err("scenario has no semilinear section"))
    }
}

#[pymethods]
impl PyLab {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = Scenario::from_json(text).and_then(|s| s.build()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = mehler_core::scenario::load_scenario(path).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.scenario.name
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.scenario.dim
    }

    #[getter]
    fn hash(&self) -> &str {
        &self.inner.hash
    }

    fn to_json(&self) -> String {
        self.inner.scenario.to_json()
    }

    fn propagate(&self, s: f64, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.prop.propagate(s, t).map_err(py_err)?))
    }

    /// Triplet of `μ_{t,s}` as a dict with keys `a`, `R`, `m`.
    fn build_triplet<'py>(&self, py: Python<'py>, s: f64, t: f64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.mehler.build_triplet(s, t).map_err(py_err)?)
    }

    fn char_exponent<'py>(&self, py: Python<'py>, s: f64, t: f64, xi: Vec<f64>) -> PyResult<Bound<'py, PyComplex>> {
        let z = self.inner.mehler.char_exponent(s, t, &vector(xi)).map_err(py_err)?;
        Ok(PyComplex::from_doubles(py, z.re, z.im))
    }

    /// Largest normalized flow defect over the given probes.
    #[pyo3(signature = (s, r, t, probes=10))]
    fn flow_defect(&self, s: f64, r: f64, t: f64, probes: usize) -> PyResult<f64> {
        let xis = probes_for(self.dim(), probes);
        let defects = self.inner.mehler.flow_defects(s, r, t, &xis).map_err(py_err)?;
        Ok(defects.into_iter().map(|(d, psi)| d / (1.0 + psi)).fold(0.0, f64::max))
    }

    /// Monte Carlo `p_{s,t} f(x)` for a catalog function; returns `(mean, std_err)`.
    #[pyo3(signature = (s, t, f, x, n=100_000, seed=0))]
    fn mehler_apply(&self, s: f64, t: f64, f: &str, x: Vec<f64>, n: usize, seed: u64) -> PyResult<(f64, f64)> {
        let f = TestFunction::from_name(f).map_err(py_err)?;
        let mut rng = SeedSplitter::new(seed).stream("py/mehler_apply");
        let est = self.inner.mehler.mehler_apply(s, t, &|y: &DVector<f64>| f.eval(y), &vector(x), n, &mut rng).map_err(py_err)?;
        Ok((est.mean, est.std_err))
    }

    /// `|Γ_{t,s} v|`, infinite off the domain.
    fn gamma_norm(&self, s: f64, t: f64, v: Vec<f64>) -> PyResult<f64> {
        harnack::gamma_apply(&self.inner.mehler, s, t, &vector(v)).map_err(py_err)
    }

    fn gamma_operator_norm(&self, s: f64, t: f64) -> PyResult<f64> {
        Ok(GammaOperator::for_system(&self.inner.mehler, s, t).map_err(py_err)?.operator_norm())
    }

    #[pyo3(signature = (s, t, x, y, alpha=2.0, f="tanh_shift", n=100_000, seed=0, log_mode=false))]
    #[allow(clippy::too_many_arguments)]
    fn harnack_check<'py>(
        &self,
        py: Python<'py>,
        s: f64,
        t: f64,
        x: Vec<f64>,
        y: Vec<f64>,
        alpha: f64,
        f: &str,
        n: usize,
        seed: u64,
        log_mode: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let f = TestFunction::from_name(f).map_err(py_err)?;
        let mut rng = SeedSplitter::new(seed).stream("py/harnack");
        let rep = harnack::harnack_check(&self.inner.mehler, s, t, &f, alpha, &vector(x), &vector(y), n, &mut rng, log_mode)
            .map_err(py_err)?;
        to_py(py, &rep)
    }

    #[pyo3(signature = (t, tol=1e-6))]
    fn limit_triplet<'py>(&self, py: Python<'py>, t: f64, tol: f64) -> PyResult<Bound<'py, PyAny>> {
        let hint = self.inner.stability.ok_or_else(|| PyValueError::new_err("scenario has no stability hint"))?;
        to_py(py, &limit_triplet(&self.inner.mehler, t, &hint, tol).map_err(py_err)?)
    }

    fn gramian(&self, s: f64, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.control()?.gramian(s, t).map_err(py_err)?))
    }

    fn min_energy(&self, s: f64, t: f64, x: Vec<f64>) -> PyResult<f64> {
        self.control()?.min_energy(s, t, &vector(x)).map_err(py_err)
    }

    #[pyo3(signature = (s, t, x, nodes=256))]
    fn brute_force_min_energy(&self, s: f64, t: f64, x: Vec<f64>, nodes: usize) -> PyResult<f64> {
        self.control()?.brute_force_min_energy(s, t, &vector(x), nodes).map_err(py_err)
    }

    /// Explicit null control certificate for a weight such as `constant` or `exp:2`.
    #[pyo3(signature = (s, t, x, weight="constant"))]
    fn synthesize_control<'py>(&self, py: Python<'py>, s: f64, t: f64, x: Vec<f64>, weight: &str) -> PyResult<Bound<'py, PyAny>> {
        let w = Weight::from_name(weight).map_err(py_err)?;
        to_py(py, &self.control()?.synthesize_control(s, t, &vector(x), &w).map_err(py_err)?)
    }

    /// Girsanov-weighted `P^F_{s,t} f(x)`.
    #[pyo3(signature = (s, t, f, x, n=100_000, steps=64, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn semigroup_apply<'py>(
        &self,
        py: Python<'py>,
        s: f64,
        t: f64,
        f: &str,
        x: Vec<f64>,
        n: usize,
        steps: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let f = TestFunction::from_name(f).map_err(py_err)?;
        let mut rng = SeedSplitter::new(seed).stream("py/semigroup_apply");
        let est = self
            .semilinear()?
            .semigroup_apply(s, t, &|y: &DVector<f64>| f.eval(y), &vector(x), n, steps, &mut rng)
            .map_err(py_err)?;
        to_py(py, &est)
    }

    /// Runs a suite and returns the JSON report text.
    #[pyo3(signature = (suite="all", seed=0, n=100_000, tol=1e-6))]
    fn run_suite(&self, suite: &str, seed: u64, n: usize, tol: f64) -> PyResult<String> {
        let suite: Suite = suite.parse().map_err(py_err)?;
        let opts = SuiteOptions { n, tol, timing: false };
        Ok(run_suite(&self.inner, suite, seed, &opts).map_err(py_err)?.to_json())
    }

    fn __repr__(&self) -> String {
        format!("Lab(name={:?}, dim={}, hash={})", self.inner.scenario.name, self.dim(), &self.inner.hash[..12])
    }
}

/// `exp(α g² / (2(α−1)))`.
#[pyfunction]
fn harnack_constant(alpha: f64, gamma_norm: f64) -> f64 {
    harnack::harnack_constant(alpha, gamma_norm)
}

/// Deterministic probe frequencies used by the flow and invariance checks.
#[pyfunction]
fn probe_frequencies(dim: usize, count: usize) -> Vec<Vec<f64>> {
    probes_for(dim, count).into_iter().map(|v| v.iter().copied().collect()).collect()
}

#[pymodule]
fn mehlerlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLab>()?;
    m.add_function(wrap_pyfunction!(harnack_constant, m)?)?;
    m.add_function(wrap_pyfunction!(probe_frequencies, m)?)?;
    Ok(())
}
