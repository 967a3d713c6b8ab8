//! Python bindings for configuring, training and evaluating runs.
//!
//! Configurations are passed as the same flat `key = value` text the CLI
//! reads, plus optional `key=value` overrides.

use medgrpo_core::grpo::compute_advantages;
use medgrpo_core::metrics::{evaluate as evaluate_policy, Aggregates};
use medgrpo_core::{policy, Error, ErrorKind, PolicyParams, RunConfig};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err.kind() {
        ErrorKind::Io => PyOSError::new_err(msg),
        ErrorKind::Numerical => PyArithmeticError::new_err(msg),
        ErrorKind::Config | ErrorKind::Data => PyValueError::new_err(msg),
    }
}

fn build_config(config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::parse(config.unwrap_or("")).map_err(to_py)?;
    for o in overrides.unwrap_or_default() {
        cfg.apply_override(&o).map_err(to_py)?;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn aggregates<'py>(py: Python<'py>, a: &Aggregates) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("questions", a.questions)?;
    d.set_item("avg_at_5", a.avg_at_5)?;
    d.set_item("pass_at_1", a.pass_at_1)?;
    d.set_item("major_at_5", a.major_at_5)?;
    Ok(d)
}

/// Group-normalized advantages of one reward vector.
#[pyfunction]
#[pyo3(signature = (rewards, std_floor = 1e-8))]
fn advantages(rewards: Vec<f64>, std_floor: f64) -> PyResult<Vec<f64>> {
    compute_advantages(&rewards, std_floor).map_err(to_py)
}

/// KL(p || q) for two categorical distributions.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    policy::kl_divergence(&p, &q).map_err(to_py)
}

/// `(question_id, anatomy_label, score)` for every question, sorted by score.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = None))]
fn score(config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<Vec<(String, String, f64)>> {
    let cfg = build_config(config, overrides)?;
    let prepared = cfg.prepare().map_err(to_py)?;
    let mut rows: Vec<(String, String, f64)> = prepared
        .scores
        .iter()
        .map(|s| {
            let label = prepared.dataset.get(&s.question_id).map(|q| q.anatomy_label.clone()).unwrap_or_default();
            (s.question_id.clone(), label, s.score)
        })
        .collect();
    rows.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.cmp(&b.0)));
    Ok(rows)
}

/// Trains one run and returns its per-step log, final parameters and
/// evaluation.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = None))]
fn train<'py>(py: Python<'py>, config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = build_config(config, overrides)?;
    let prepared = cfg.prepare().map_err(to_py)?;
    let out = cfg.train(&prepared).map_err(to_py)?;
    let eval = evaluate_policy(&out.state.params, &prepared.dataset, cfg.seed, cfg.eval_samples).map_err(to_py)?;
    let rows = &out.log.rows;
    let d = PyDict::new(py);
    d.set_item("config_hash", cfg.config_hash())?;
    d.set_item("seed", cfg.seed)?;
    d.set_item("strategy", cfg.grpo.strategy.name())?;
    d.set_item("reward_mean", rows.iter().map(|r| r.reward_mean).collect::<Vec<_>>())?;
    d.set_item("invalid", rows.iter().map(|r| r.invalid).collect::<Vec<_>>())?;
    d.set_item("active_bin", rows.iter().map(|r| r.active_bin).collect::<Vec<_>>())?;
    d.set_item("anatomy_label", rows.iter().map(|r| r.anatomy_label.clone()).collect::<Vec<_>>())?;
    d.set_item("theta", out.state.params.theta.clone())?;
    d.set_item("eval", aggregates(py, &eval.overall)?)?;
    Ok(d)
}

/// Evaluates explicit parameters on the configured dataset.
#[pyfunction]
#[pyo3(signature = (theta, config = None, overrides = None))]
fn evaluate<'py>(
    py: Python<'py>,
    theta: Vec<f64>,
    config: Option<&str>,
    overrides: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = build_config(config, overrides)?;
    let prepared = cfg.prepare().map_err(to_py)?;
    let params = PolicyParams::new(theta, cfg.temperature).map_err(to_py)?;
    let eval = evaluate_policy(&params, &prepared.dataset, cfg.seed, cfg.eval_samples).map_err(to_py)?;
    aggregates(py, &eval.overall)
}

#[pymodule]
fn medgrpo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(advantages, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
