//! Challenge metrics: per-class F1 with macro averages for action units and
//! expressions, mean CCC for valence/arousal and mean Pearson correlation
//! for reaction intensities.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datamodel::{write_file, Task, N_AU, N_EXPR};
use crate::error::{Error, Result};
use crate::losses::ccc_flagged;

/// Number of emotional-reaction-intensity dimensions.
pub const N_ERI: usize = 7;

/// AU probabilities at or above this value count as active.
pub const AU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricTask {
    Au,
    Expr,
    Va,
    Eri,
}

impl From<Task> for MetricTask {
    fn from(t: Task) -> Self {
        match t {
            Task::Au => MetricTask::Au,
            Task::Expr => MetricTask::Expr,
            Task::Va => MetricTask::Va,
        }
    }
}

/// Result of one evaluation run. Serialised field names are part of the
/// on-disk report format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: MetricTask,
    /// F1 per AU/EXPR class, or PCC per ERI dimension; empty for VA.
    pub per_class: Vec<f64>,
    pub aggregate: f64,
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub degenerate_flags: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Moments of a pair of equal-length series (population normalisation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub cov: f64,
    /// Zero when either series is constant.
    pub pearson: f64,
}

impl SequenceStats {
    pub fn compute(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::arg("series lengths differ"));
        }
        if x.len() < 2 {
            return Err(Error::arg("need at least 2 samples"));
        }
        let n = x.len() as f64;
        let mean_x = x.sum() / n;
        let mean_y = y.sum() / n;
        let (mut vx, mut vy, mut c) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y.iter()) {
            vx += (a - mean_x) * (a - mean_x);
            vy += (b - mean_y) * (b - mean_y);
            c += (a - mean_x) * (b - mean_y);
        }
        let constant = |v: ArrayView1<f64>| v.iter().all(|e| *e == v[0]);
        let (std_x, std_y, cov) = if constant(x) || constant(y) {
            (
                if constant(x) { 0.0 } else { (vx / n).sqrt() },
                if constant(y) { 0.0 } else { (vy / n).sqrt() },
                0.0,
            )
        } else {
            ((vx / n).sqrt(), (vy / n).sqrt(), c / n)
        };
        let pearson = if std_x > 0.0 && std_y > 0.0 {
            (cov / (std_x * std_y)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        Ok(SequenceStats {
            mean_x,
            mean_y,
            std_x,
            std_y,
            cov,
            pearson,
        })
    }
}

/// Per-class F1 plus the indices of classes whose F1 denominator was zero.
pub fn f1_per_class_flagged(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<usize>)> {
    if pred.dim() != target.dim() {
        return Err(Error::arg(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.nrows() == 0 {
        return Err(Error::arg("F1 over zero frames"));
    }
    let mut f1 = Vec::with_capacity(pred.ncols());
    let mut degenerate = Vec::new();
    for c in 0..pred.ncols() {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (p, t) in pred.column(c).iter().zip(target.column(c).iter()) {
            match (*p > 0.5, *t > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        if denom == 0 {
            degenerate.push(c);
            f1.push(0.0);
        } else {
            f1.push(2.0 * tp as f64 / denom as f64);
        }
    }
    Ok((f1, degenerate))
}

/// `F1_c = 2·TP / (2·TP + FP + FN)` for each column of binary matrices.
pub fn f1_per_class(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Vec<f64>> {
    f1_per_class_flagged(pred, target).map(|(f, _)| f)
}

fn mean_of(xs: &[f64], expected: usize, what: &str) -> Result<f64> {
    if xs.len() != expected {
        return Err(Error::arg(format!(
            "{what} expects {expected} values, got {}",
            xs.len()
        )));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean F1 over the twelve action units.
pub fn score_au(f1s: &[f64]) -> Result<f64> {
    mean_of(f1s, N_AU, "AU score")
}

/// Mean F1 over the eight expression classes.
pub fn score_expr(f1s: &[f64]) -> Result<f64> {
    mean_of(f1s, N_EXPR, "expression score")
}

/// Mean of the valence and arousal CCCs.
pub fn score_va(
    pred_v: ArrayView1<f64>,
    pred_a: ArrayView1<f64>,
    true_v: ArrayView1<f64>,
    true_a: ArrayView1<f64>,
) -> Result<MetricsReport> {
    let (cv, dv) = ccc_flagged(pred_v, true_v)?;
    let (ca, da) = ccc_flagged(pred_a, true_a)?;
    let mut degenerate_flags = Vec::new();
    if dv {
        degenerate_flags.push("ccc_valence: both series constant".to_string());
    }
    if da {
        degenerate_flags.push("ccc_arousal: both series constant".to_string());
    }
    Ok(MetricsReport {
        task: MetricTask::Va,
        per_class: Vec::new(),
        aggregate: 0.5 * (cv + ca),
        ccc_valence: Some(cv),
        ccc_arousal: Some(ca),
        degenerate_flags,
    })
}

/// Pearson correlation; zero (flagged) when either series is constant.
pub fn pcc_flagged(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<(f64, bool)> {
    let s = SequenceStats::compute(x, y)?;
    Ok((s.pearson, s.std_x == 0.0 || s.std_y == 0.0))
}

pub fn pcc(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    pcc_flagged(x, y).map(|(v, _)| v)
}

/// Mean PCC over the seven reaction-intensity dimensions.
pub fn score_eri(pccs: &[f64]) -> Result<f64> {
    mean_of(pccs, N_ERI, "ERI score")
}

/// AU probabilities to 0/1 decisions.
pub fn binarize(probs: ArrayView2<f64>) -> Array2<f64> {
    probs.mapv(|p| if p >= AU_THRESHOLD { 1.0 } else { 0.0 })
}

/// One-hot of each row's argmax; ties resolve to the lowest index.
pub fn argmax_one_hot(probs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for (i, row) in probs.rows().into_iter().enumerate() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        out[[i, best]] = 1.0;
    }
    out
}

fn classification_report(task: MetricTask, pred: Array2<f64>, target: ArrayView2<f64>) -> Result<MetricsReport> {
    let (per_class, degenerate) = f1_per_class_flagged(pred.view(), target)?;
    let aggregate = match task {
        MetricTask::Au => score_au(&per_class)?,
        _ => score_expr(&per_class)?,
    };
    Ok(MetricsReport {
        task,
        per_class,
        aggregate,
        ccc_valence: None,
        ccc_arousal: None,
        degenerate_flags: degenerate
            .into_iter()
            .map(|c| format!("f1[{c}]: class absent from predictions and targets"))
            .collect(),
    })
}

/// Scores frame-wise outputs against dense targets (AU 0/1, EXPR one-hot,
/// VA values). Outputs are probabilities for AU/EXPR.
pub fn evaluate(task: Task, outputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<MetricsReport> {
    if outputs.dim() != targets.dim() {
        return Err(Error::arg("outputs and targets differ in shape"));
    }
    if outputs.ncols() != task.n_outputs() {
        return Err(Error::arg(format!(
            "task {task} expects {} columns, got {}",
            task.n_outputs(),
            outputs.ncols()
        )));
    }
    match task {
        Task::Au => classification_report(MetricTask::Au, binarize(outputs), targets),
        Task::Expr => classification_report(MetricTask::Expr, argmax_one_hot(outputs), targets),
        Task::Va => score_va(
            outputs.column(0),
            outputs.column(1),
            targets.column(0),
            targets.column(1),
        ),
    }
}

/// Per-dimension PCC report for reaction-intensity predictions `[N × 7]`.
pub fn evaluate_eri(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<MetricsReport> {
    if pred.dim() != target.dim() || pred.ncols() != N_ERI {
        return Err(Error::arg("ERI evaluation expects matching [N × 7] matrices"));
    }
    let mut per_class = Vec::with_capacity(N_ERI);
    let mut degenerate_flags = Vec::new();
    for c in 0..N_ERI {
        let (p, flag) = pcc_flagged(pred.column(c), target.column(c))?;
        if flag {
            degenerate_flags.push(format!("pcc[{c}]: zero variance"));
        }
        per_class.push(p);
    }
    Ok(MetricsReport {
        task: MetricTask::Eri,
        aggregate: score_eri(&per_class)?,
        per_class,
        ccc_valence: None,
        ccc_arousal: None,
        degenerate_flags,
    })
}
