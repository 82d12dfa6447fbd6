//! Python bindings: the experiment commands plus a few statistics helpers.
//! Reports come back as plain dicts and lists.

use std::path::PathBuf;

use phaselab::harness::{self, ExperimentPlan, Overrides};
use phaselab::metrics::{detect_breakthrough, MetricSeries};
use phaselab::stats::{self, Alternative};
use phaselab::tensor::Precision;
use phaselab::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Errors of the pure helpers always come from their arguments.
fn arg_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn load_plan(plan: PathBuf, seed: Option<u64>, scale: Option<f64>, precision: Option<&str>) -> PyResult<ExperimentPlan> {
    let precision = match precision {
        None => None,
        Some("f32") => Some(Precision::F32),
        Some("f64") => Some(Precision::F64),
        Some(p) => return Err(PyValueError::new_err(format!("precision must be f32 or f64, got {p}"))),
    };
    let mut plan = ExperimentPlan::load(&plan).map_err(py_err)?;
    plan.apply(&Overrides {
        seed,
        checkpoint_scale: scale,
        precision,
    });
    plan.validate().map_err(py_err)?;
    Ok(plan)
}

/// Writes the synthetic corpus and its two-cell plan into `out`.
#[pyfunction]
#[pyo3(signature = (out, seed=0, scale=1.0))]
fn gen_synthetic<'py>(py: Python<'py>, out: PathBuf, seed: u64, scale: f64) -> PyResult<Bound<'py, PyAny>> {
    let s = py.detach(|| harness::gen_synthetic(&out, seed, scale)).map_err(py_err)?;
    to_py(py, &s)
}

macro_rules! plan_command {
    ($name:ident, $run:path, $doc:literal) => {
        #[doc = $doc]
        #[pyfunction]
        #[pyo3(signature = (plan, out, seed=None, scale=None, precision=None, jobs=1))]
        fn $name<'py>(
            py: Python<'py>,
            plan: PathBuf,
            out: PathBuf,
            seed: Option<u64>,
            scale: Option<f64>,
            precision: Option<&str>,
            jobs: usize,
        ) -> PyResult<Bound<'py, PyAny>> {
            let plan = load_plan(plan, seed, scale, precision)?;
            let r = py.detach(|| $run(&plan, &out, jobs)).map_err(py_err)?;
            to_py(py, &r)
        }
    };
}

plan_command!(train, harness::cmd_train, "Trains every grid cell of the plan.");
plan_command!(metrics, harness::cmd_metrics, "Per-checkpoint metrics and breakthroughs.");
plan_command!(ablate, harness::cmd_ablate, "Per-head pattern-preserving ablation.");
plan_command!(ppp, harness::cmd_ppp, "ΔLL trajectories, correlations and permutation tests.");

/// Finite-difference checks of every primitive and the regularized loss (f64).
#[pyfunction]
#[pyo3(signature = (instances=10, seed=0))]
fn gradcheck<'py>(py: Python<'py>, instances: u64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let s = py
        .detach(|| harness::gradcheck_suite(instances, instances.min(10), seed))
        .map_err(py_err)?;
    to_py(py, &s)
}

#[pyfunction]
fn checkpoint_schedule(total_tokens: u64, scale: f64) -> PyResult<Vec<u64>> {
    phaselab::training::checkpoint_schedule(total_tokens, scale).map_err(arg_err)
}

/// Index of the first value above `threshold`, or None.
#[pyfunction]
#[pyo3(signature = (values, threshold=0.1))]
fn breakthrough(values: Vec<f64>, threshold: f64) -> PyResult<Option<usize>> {
    let points = values.into_iter().enumerate().map(|(i, v)| (i as u64, v)).collect();
    let series = MetricSeries::new("py", "value", points).map_err(arg_err)?;
    detect_breakthrough(&series, threshold).map_err(arg_err)
}

#[pyfunction]
fn fisher_z_mean(rs: Vec<f64>, weights: Vec<f64>) -> PyResult<f64> {
    stats::fisher_z_weighted_mean(&rs, &weights).map_err(arg_err)
}

/// Paired sign-flip permutation test on `a - b`.
#[pyfunction]
#[pyo3(signature = (a, b, n_perm=10_000, seed=0, two_sided=false))]
fn permutation_test(a: Vec<f64>, b: Vec<f64>, n_perm: usize, seed: u64, two_sided: bool) -> PyResult<f64> {
    let alt = if two_sided { Alternative::TwoSided } else { Alternative::Greater };
    stats::permutation_test(&a, &b, n_perm, seed, alt).map_err(arg_err)
}

#[pymodule]
fn phaselab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(ppp, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(breakthrough, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_z_mean, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_test, m)?)?;
    Ok(())
}
