//! Python bindings. Heavy results cross the boundary as JSON strings.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use evblur_cli::{cmd_eval, cmd_simulate, cmd_train, RunConfig};
use evblur_core::datagen::DatasetConfig;
use evblur_core::image::Image;
use evblur_core::lie::{self, PoseSE3, TangentSE3};
use evblur_core::train::{PoseMode, TrainConfig};
use evblur_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Row-major 3x4 camera-to-world matrix of `exp(xi)`, `xi = (w, v)`.
#[pyfunction]
fn se3_exp(xi: [f64; 6]) -> [f64; 12] {
    lie::exp(&TangentSE3::from_array(xi)).to_row_major()
}

#[pyfunction]
fn se3_log(pose: Vec<f64>) -> PyResult<[f64; 6]> {
    let p = PoseSE3::from_row_major(&pose).map_err(py_err)?;
    Ok(lie::log(&p).to_array())
}

/// PSNR of two interleaved RGB buffers of the given size.
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    let a = Image::new(width, height, a).map_err(py_err)?;
    let b = Image::new(width, height, b).map_err(py_err)?;
    evblur_core::metrics::psnr(&a, &b).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (out, views=8, novel_views=2, res=64, seed=42))]
fn simulate(out: PathBuf, views: usize, novel_views: usize, res: usize, seed: u64) -> PyResult<String> {
    let cfg = DatasetConfig { views, novel_views, width: res, height: res, seed, ..DatasetConfig::default() };
    json(&cmd_simulate(&out, &cfg).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (dataset, out, p=5, lam=0.005, mode="full", iters=5000, seed=42, samples=None, batch=None, hidden_width=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: PathBuf,
    out: PathBuf,
    p: usize,
    lam: f64,
    mode: &str,
    iters: usize,
    seed: u64,
    samples: Option<usize>,
    batch: Option<usize>,
    hidden_width: Option<usize>,
) -> PyResult<String> {
    let mut c = TrainConfig { p, lambda: lam, mode: PoseMode::parse(mode).map_err(py_err)?, iterations: iters, seed, ..TrainConfig::default() };
    c.field.seed = seed;
    c.samples = samples.unwrap_or(c.samples);
    c.batch_rays = batch.unwrap_or(c.batch_rays);
    c.field.hidden_width = hidden_width.unwrap_or(c.field.hidden_width);
    let run = RunConfig { dataset, out, train: c };
    let summary = py.detach(|| cmd_train(&run)).map_err(py_err)?;
    json(&summary)
}

/// Evaluation report as JSON (non-finite PSNR is written as the string "inf").
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, samples=None))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, dataset: PathBuf, samples: Option<usize>) -> PyResult<String> {
    let report = py.detach(|| cmd_eval(&checkpoint, &dataset, samples)).map_err(py_err)?;
    report.to_json().map_err(py_err)
}

#[pymodule]
fn evblur(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(se3_exp, m)?)?;
    m.add_function(wrap_pyfunction!(se3_log, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
