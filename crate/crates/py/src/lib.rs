//! Python bindings for the camoseg pipeline.
//!
//! Configs cross the boundary as TOML strings and reports as plain dicts.

use std::path::PathBuf;

use camoseg::cascade::StageTwoAlpha;
use camoseg::cli::{self, InferOptions, Phase, Query, RunConfig};
use camoseg::error::Error;
use camoseg::metrics::{self, Pair};
use camoseg::nncore::Tensor;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(s) => RunConfig::from_toml(s).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

fn to_dict<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (json,))
}

fn parse_phase(s: &str) -> PyResult<Phase> {
    [Phase::PretrainClip, Phase::TuneClip, Phase::TrainSeg]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown phase {s:?}")))
}

fn grid(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(format!(
            "{what} must be a non-empty rectangular 2-D list"
        )));
    }
    Tensor::new(&[h, w, 1], rows.into_iter().flatten().collect()).map_err(to_py)
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

/// Validates a TOML config and returns it with every default filled in.
#[pyfunction]
fn normalize_config(toml: &str) -> PyResult<String> {
    Ok(config(Some(toml))?.to_toml())
}

/// Generates the synthetic dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (config_toml=None))]
fn gen_data(py: Python<'_>, config_toml: Option<&str>) -> PyResult<PathBuf> {
    let cfg = config(config_toml)?;
    py.detach(|| cli::cmd_gen_data(&cfg)).map_err(to_py)?;
    Ok(cfg.data_dir().join(camoseg::dataforge::MANIFEST_FILE))
}

/// Runs one training phase; returns the checkpoint path.
#[pyfunction]
#[pyo3(signature = (phase, config_toml=None))]
fn train(py: Python<'_>, phase: &str, config_toml: Option<&str>) -> PyResult<PathBuf> {
    let cfg = config(config_toml)?;
    let phase = parse_phase(phase)?;
    let out = py.detach(|| cli::cmd_train(&cfg, phase)).map_err(to_py)?;
    Ok(out.checkpoint)
}

/// Segments and classifies images (the test split when `images` is empty).
#[pyfunction]
#[pyo3(signature = (config_toml=None, images=Vec::new(), alpha="predicted", query="unseen"))]
fn infer<'py>(
    py: Python<'py>,
    config_toml: Option<&str>,
    images: Vec<PathBuf>,
    alpha: &str,
    query: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_toml)?;
    let alpha = match alpha {
        "predicted" => StageTwoAlpha::Predicted,
        "all-one" => StageTwoAlpha::AllOne,
        other => return Err(PyValueError::new_err(format!("unknown alpha mode {other:?}"))),
    };
    let query = match query {
        "unseen" => Query::Unseen,
        "seen" => Query::Seen,
        "all" => Query::All,
        other => return Err(PyValueError::new_err(format!("unknown query {other:?}"))),
    };
    let opts = InferOptions { images, alpha, query };
    let records = py.detach(|| cli::cmd_infer(&cfg, &opts)).map_err(to_py)?;
    to_dict(py, &records)
}

/// Scores the run's predictions against the test split and writes the reports.
#[pyfunction]
#[pyo3(signature = (config_toml=None, predictions=None))]
fn evaluate<'py>(py: Python<'py>, config_toml: Option<&str>, predictions: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_toml)?;
    let report = py.detach(|| cli::cmd_eval(&cfg, predictions.as_deref())).map_err(to_py)?;
    to_dict(py, &report)
}

/// Scores a prediction file against a dataset manifest without touching any run directory.
#[pyfunction]
fn evaluate_files<'py>(py: Python<'py>, manifest: PathBuf, predictions: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let report = py.detach(|| cli::evaluate_files(&manifest, &predictions)).map_err(to_py)?;
    to_dict(py, &report)
}

/// Mask-only measures for one prediction in [0, 1] against a binary ground truth.
#[pyfunction]
fn mask_metrics<'py>(py: Python<'py>, pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let (p, g) = (grid(pred, "pred")?, grid(gt, "gt")?);
    let pair = Pair::new(&p, &g).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("s_measure", metrics::s_measure(&pair))?;
    out.set_item("wf_beta", metrics::wf_beta(&pair))?;
    out.set_item("mae", metrics::mae(&pair))?;
    out.set_item("e_measure", metrics::e_measure(&pair))?;
    out.set_item("f_beta", metrics::f_beta(&pair))?;
    out.set_item("iou", metrics::iou(&pair))?;
    Ok(out)
}

/// Runs the command-line interface with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("camoseg".to_string()).chain(args).collect();
    py.detach(|| cli::main_with(argv))
}

#[pymodule]
fn camoseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add_function(wrap_pyfunction!(mask_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
