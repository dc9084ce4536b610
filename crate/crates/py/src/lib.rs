//! Python module `affectkit`: metrics, losses, smoothing, fold splitting,
//! patch masking and the stage runners.

use std::collections::BTreeMap;

use affectkit_core::datamodel::{self, SmoothingKind, Task, TaskSpec};
use affectkit_core::losses::{self, ClassWeights};
use affectkit_core::mae::{self, PatchGrid};
use affectkit_core::metrics::{self, MetricsReport};
use affectkit_core::pipeline::{self, Pipeline};
use affectkit_core::postprocess;
use affectkit_core::Error;
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("checked shape"))
}

fn rows(m: Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_task(task: &str) -> PyResult<Task> {
    task.parse().map_err(to_py)
}

fn parse_smooth(smooth: Option<&str>) -> PyResult<Option<SmoothingKind>> {
    smooth.map(|s| s.parse().map_err(to_py)).transpose()
}

/// Challenge metrics report.
#[pyclass(name = "MetricsReport", frozen)]
struct PyMetricsReport {
    inner: MetricsReport,
}

#[pymethods]
impl PyMetricsReport {
    #[getter]
    fn task(&self) -> String {
        serde_json::to_value(self.inner.task)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    #[getter]
    fn aggregate(&self) -> f64 {
        self.inner.aggregate
    }

    #[getter]
    fn per_class(&self) -> Vec<f64> {
        self.inner.per_class.clone()
    }

    #[getter]
    fn ccc_valence(&self) -> Option<f64> {
        self.inner.ccc_valence
    }

    #[getter]
    fn ccc_arousal(&self) -> Option<f64> {
        self.inner.ccc_arousal
    }

    #[getter]
    fn degenerate_flags(&self) -> Vec<String> {
        self.inner.degenerate_flags.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("MetricsReport(task={}, aggregate={})", self.task(), self.inner.aggregate)
    }
}

fn report(inner: MetricsReport) -> PyMetricsReport {
    PyMetricsReport { inner }
}

#[pyfunction]
fn score_au(f1s: Vec<f64>) -> PyResult<f64> {
    metrics::score_au(&f1s).map_err(to_py)
}

#[pyfunction]
fn score_expr(f1s: Vec<f64>) -> PyResult<f64> {
    metrics::score_expr(&f1s).map_err(to_py)
}

#[pyfunction]
fn score_va(pred_v: Vec<f64>, pred_a: Vec<f64>, true_v: Vec<f64>, true_a: Vec<f64>) -> PyResult<PyMetricsReport> {
    let [pv, pa, tv, ta] = [pred_v, pred_a, true_v, true_a].map(Array1::from);
    metrics::score_va(pv.view(), pa.view(), tv.view(), ta.view())
        .map(report)
        .map_err(to_py)
}

#[pyfunction]
fn score_eri(pccs: Vec<f64>) -> PyResult<f64> {
    metrics::score_eri(&pccs).map_err(to_py)
}

#[pyfunction]
fn ccc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    losses::ccc(Array1::from(x).view(), Array1::from(y).view()).map_err(to_py)
}

#[pyfunction]
fn pcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::pcc(Array1::from(x).view(), Array1::from(y).view()).map_err(to_py)
}

/// Per-class F1 of binary predictions against binary targets.
#[pyfunction]
fn f1_per_class(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    metrics::f1_per_class(matrix(pred)?.view(), matrix(target)?.view()).map_err(to_py)
}

/// Scores frame-wise outputs (probabilities for au/expr, values for va).
#[pyfunction]
fn evaluate(task: &str, outputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<PyMetricsReport> {
    metrics::evaluate(parse_task(task)?, matrix(outputs)?.view(), matrix(targets)?.view())
        .map(report)
        .map_err(to_py)
}

#[pyfunction]
fn evaluate_files(predictions: &str, labels: &str, task: &str) -> PyResult<PyMetricsReport> {
    pipeline::evaluate_files(predictions.as_ref(), labels.as_ref(), parse_task(task)?)
        .map(report)
        .map_err(to_py)
}

fn weights_or_uniform(w: Option<Vec<f64>>, n: usize) -> ClassWeights {
    w.map_or_else(|| ClassWeights::uniform(n), |weights| ClassWeights { weights })
}

#[pyfunction]
#[pyo3(signature = (pred, target, weights=None))]
fn au_loss(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<f64> {
    let (p, t) = (matrix(pred)?, matrix(target)?);
    let valid = vec![true; p.nrows()];
    losses::au_loss(p.view(), t.view(), &weights_or_uniform(weights, p.ncols()), &valid).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (pred, target, weights=None))]
fn expr_loss(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<f64> {
    let (p, t) = (matrix(pred)?, matrix(target)?);
    let valid = vec![true; p.nrows()];
    losses::expr_loss(p.view(), t.view(), &weights_or_uniform(weights, p.ncols()), &valid).map_err(to_py)
}

#[pyfunction]
fn va_loss(pred_v: Vec<f64>, pred_a: Vec<f64>, true_v: Vec<f64>, true_a: Vec<f64>) -> PyResult<f64> {
    let valid = vec![true; pred_v.len()];
    let [pv, pa, tv, ta] = [pred_v, pred_a, true_v, true_a].map(Array1::from);
    losses::va_loss(pv.view(), pa.view(), tv.view(), ta.view(), &valid).map_err(to_py)
}

#[pyfunction]
fn class_weights(counts: Vec<u64>) -> PyResult<Vec<f64>> {
    losses::compute_class_weights(&counts).map(|w| w.weights).map_err(to_py)
}

/// Smooths a `[n_frames][n_outputs]` series with the named filter.
#[pyfunction]
#[pyo3(signature = (series, kind, window=None, sigma=None, task="au"))]
fn smooth(
    series: Vec<Vec<f64>>,
    kind: &str,
    window: Option<usize>,
    sigma: Option<f64>,
    task: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let s = matrix(series)?;
    let kind: SmoothingKind = kind.parse().map_err(to_py)?;
    let mut spec = datamodel::SmoothingSpec::for_task(parse_task(task)?, kind);
    spec.window = window.unwrap_or(spec.window);
    spec.sigma = sigma.unwrap_or(spec.sigma);
    spec.validate().map_err(to_py)?;
    let out = match kind {
        SmoothingKind::None => Ok(s),
        SmoothingKind::Gaussian => postprocess::gaussian_smooth(s.view(), spec.sigma),
        SmoothingKind::Median => postprocess::median_smooth(s.view(), spec.window),
        SmoothingKind::Average => postprocess::average_smooth(s.view(), spec.window),
    };
    out.map(rows).map_err(to_py)
}

/// Dense `[n_frames][d]` predictions from a sparse `{frame: row}` map.
#[pyfunction]
fn fill_missing(predictions: BTreeMap<usize, Vec<f64>>, n_frames: usize) -> PyResult<Vec<Vec<f64>>> {
    postprocess::fill_missing(&predictions, n_frames).map(rows).map_err(to_py)
}

/// Video-level fold assignment as `{video_id: fold}`.
#[pyfunction]
fn make_folds(video_ids: Vec<String>, n_folds: usize, seed: u64) -> PyResult<BTreeMap<String, usize>> {
    datamodel::make_folds(&video_ids, n_folds, seed)
        .map(|f| f.assignment)
        .map_err(to_py)
}

/// `(start, n_valid)` of each clip of length `k` over `n` frames.
#[pyfunction]
fn clip_windows(n: usize, k: usize) -> PyResult<Vec<(usize, usize)>> {
    datamodel::clip_windows(n, k).map_err(to_py)
}

#[pyfunction]
fn mask_count(n_patches: usize, mask_ratio: f64) -> usize {
    mae::mask_count(n_patches, mask_ratio)
}

/// Per-patch mask flags (raster order) for a square image.
#[pyfunction]
#[pyo3(signature = (image_size, patch_size, mask_ratio, seed, channels=1))]
fn sample_mask(image_size: usize, patch_size: usize, mask_ratio: f64, seed: u64, channels: usize) -> PyResult<Vec<bool>> {
    let grid = PatchGrid::new(image_size, patch_size, channels).map_err(to_py)?;
    mae::sample_mask(&grid, mask_ratio, seed).map(|p| p.masked).map_err(to_py)
}

#[pyfunction]
fn task_outputs(task: &str) -> PyResult<Vec<String>> {
    let t = parse_task(task)?;
    TaskSpec::new(t).validate().map_err(to_py)?;
    Ok(t.output_columns())
}

/// Stage runners over one experiment config.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    inner: Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config_path, seed=None))]
    fn new(config_path: &str, seed: Option<u64>) -> PyResult<Self> {
        Ok(PyPipeline {
            inner: Pipeline::from_file(config_path, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn work_dir(&self) -> String {
        self.inner.work_dir().display().to_string()
    }

    /// Returns the per-step reconstruction losses.
    fn pretrain(&self) -> PyResult<Vec<f64>> {
        self.inner.run_pretrain().map(|s| s.step_losses).map_err(to_py)
    }

    /// Returns the validation aggregate of each epoch.
    fn finetune(&self, task: &str) -> PyResult<Vec<f64>> {
        let s = self.inner.run_finetune(parse_task(task)?).map_err(to_py)?;
        Ok(s.epochs.iter().map(|e| e.aggregate).collect())
    }

    fn fuse_train(&self, task: &str) -> PyResult<Vec<f64>> {
        let s = self.inner.run_fuse_train(parse_task(task)?).map_err(to_py)?;
        Ok(s.epochs.iter().map(|e| e.aggregate).collect())
    }

    /// Writes the predictions CSV and returns its path.
    #[pyo3(signature = (task, smooth=None))]
    fn predict(&self, task: &str, smooth: Option<&str>) -> PyResult<String> {
        self.inner
            .run_predict(parse_task(task)?, parse_smooth(smooth)?)
            .map(|p| p.display().to_string())
            .map_err(to_py)
    }

    #[pyo3(signature = (task, smooth=None))]
    fn evaluate(&self, task: &str, smooth: Option<&str>) -> PyResult<PyMetricsReport> {
        self.inner
            .run_evaluate(parse_task(task)?, parse_smooth(smooth)?)
            .map(report)
            .map_err(to_py)
    }

    /// Returns the per-fold aggregates and their mean.
    #[pyo3(signature = (task, smooth=None))]
    fn crossval(&self, task: &str, smooth: Option<&str>) -> PyResult<(Vec<f64>, f64)> {
        let s = self
            .inner
            .run_crossval(parse_task(task)?, parse_smooth(smooth)?)
            .map_err(to_py)?;
        Ok((s.fold_aggregates, s.mean_aggregate))
    }
}

#[pymodule]
fn affectkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMetricsReport>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(score_au, m)?)?;
    m.add_function(wrap_pyfunction!(score_expr, m)?)?;
    m.add_function(wrap_pyfunction!(score_va, m)?)?;
    m.add_function(wrap_pyfunction!(score_eri, m)?)?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(pcc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_per_class, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add_function(wrap_pyfunction!(au_loss, m)?)?;
    m.add_function(wrap_pyfunction!(expr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(va_loss, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(fill_missing, m)?)?;
    m.add_function(wrap_pyfunction!(make_folds, m)?)?;
    m.add_function(wrap_pyfunction!(clip_windows, m)?)?;
    m.add_function(wrap_pyfunction!(mask_count, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(task_outputs, m)?)?;
    Ok(())
}
