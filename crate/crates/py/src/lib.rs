//! Python bindings: the `synth`, `train`, and `evaluate` commands, taking a
//! TOML config path and returning plain dicts.

use std::path::PathBuf;

use medmix::corruption::Protocol;
use medmix::fusion::FusionMode;
use medmix_cli::commands;
use medmix_cli::config::{ExperimentConfig, Overrides};
use medmix_cli::jobs;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn runtime(e: anyhow::Error) -> PyErr {
    PyRuntimeError::new_err(format!("{e:#}"))
}

fn load(config: &str, overrides: &Overrides) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&PathBuf::from(config)).map_err(runtime)?;
    cfg.apply(overrides);
    cfg.validate().map_err(runtime)?;
    Ok(cfg)
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T>(value: Option<&str>, what: &str, f: impl Fn(&str) -> Option<T>) -> PyResult<Option<T>> {
    value.map(|s| f(s).ok_or_else(|| PyValueError::new_err(format!("unknown {what} {s:?}")))).transpose()
}

/// Generate the configured synthetic dataset under `out/dataset`.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn synth<'py>(py: Python<'py>, config: &str, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load(config, &Overrides { out, ..Default::default() })?;
    let summary = py.detach(|| commands::cmd_synth(&cfg)).map_err(runtime)?;
    to_dict(py, &summary)
}

/// Train one model per seed; returns the aggregate validation summary.
#[pyfunction]
#[pyo3(signature = (config, out=None, seeds=None, variant=None, fusion=None))]
fn train<'py>(
    py: Python<'py>,
    config: &str,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    variant: Option<String>,
    fusion: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let o = Overrides {
        out,
        seeds,
        variant,
        fusion: parse(fusion, "fusion rule", FusionMode::parse)?,
        ..Default::default()
    };
    let cfg = load(config, &o)?;
    let threads = jobs::thread_limit().map_err(runtime)?;
    let report = py.detach(|| commands::cmd_train(&cfg, &o, threads)).map_err(runtime)?;
    to_dict(py, &report)
}

/// Evaluate checkpoints under test-time corruption; returns rows and cells.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, out=None, rates=None, protocol=None, modality=None, external=false))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    config: &str,
    checkpoint: PathBuf,
    out: Option<PathBuf>,
    rates: Option<Vec<f64>>,
    protocol: Option<&str>,
    modality: Option<String>,
    external: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let o = Overrides {
        out,
        rates,
        protocol: parse(protocol, "protocol", Protocol::parse)?,
        modality,
        ..Default::default()
    };
    let cfg = load(config, &o)?;
    let report = py.detach(|| commands::cmd_eval(&cfg, &o, &checkpoint, external)).map_err(runtime)?;
    to_dict(py, &report)
}

#[pymodule]
#[pyo3(name = "medmix")]
fn medmix_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
