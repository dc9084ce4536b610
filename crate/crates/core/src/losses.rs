//! Task losses: class-weighted binary cross-entropy for action units,
//! class-weighted cross-entropy for expressions, and the `1 - CCC` loss for
//! valence/arousal. Each loss has a companion returning the analytic
//! gradient with respect to the predictions.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::datamodel::{Task, TaskSpec};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Per-class loss weights, inversely proportional to class frequency and
/// normalised to mean one.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(n: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        ClassWeights {
            weights: self.weights.iter().map(|w| w * s).collect(),
        }
    }
}

/// `weights[j] = (1/counts[j]) / mean_k(1/counts[k])`.
pub fn compute_class_weights(counts: &[u64]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::arg("no class counts"));
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::arg(format!("class {j} has zero training samples")));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(ClassWeights {
        weights: inv.iter().map(|v| v / mean).collect(),
    })
}

/// Add-one variant of [`compute_class_weights`] for training sets in which
/// some class never occurs.
pub fn compute_class_weights_smoothed(counts: &[u64]) -> Result<ClassWeights> {
    let shifted: Vec<u64> = counts.iter().map(|c| c + 1).collect();
    compute_class_weights(&shifted)
}

fn clamp_p(p: f64) -> (f64, f64) {
    // Value and derivative of the clamp.
    if p < EPS {
        (EPS, 0.0)
    } else if p > 1.0 - EPS {
        (1.0 - EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

fn check_batch(pred: ArrayView2<f64>, target: ArrayView2<f64>, w: &ClassWeights, valid: &[bool]) -> Result<usize> {
    if pred.dim() != target.dim() {
        return Err(Error::arg(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.ncols() != w.len() {
        return Err(Error::arg(format!(
            "{} classes but {} weights",
            pred.ncols(),
            w.len()
        )));
    }
    if valid.len() != pred.nrows() {
        return Err(Error::arg("validity mask length differs from batch size"));
    }
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == 0 {
        return Err(Error::arg("no valid frames in batch"));
    }
    Ok(n_valid)
}

/// Weighted binary cross-entropy over the action units, averaged over
/// classes and valid frames. `pred` holds sigmoid probabilities.
pub fn au_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, w: &ClassWeights, valid: &[bool]) -> Result<f64> {
    au_loss_grad(pred, target, w, valid).map(|(l, _)| l)
}

pub fn au_loss_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    w: &ClassWeights,
    valid: &[bool],
) -> Result<(f64, Array2<f64>)> {
    let n_valid = check_batch(pred, target, w, valid)?;
    let c = pred.ncols() as f64;
    let norm = 1.0 / (c * n_valid as f64);
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
        for j in 0..pred.ncols() {
            let y = target[[i, j]];
            let (p, dp) = clamp_p(pred[[i, j]]);
            let wj = w.weights[j];
            total -= wj * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            grad[[i, j]] = -norm * wj * (y / p - (1.0 - y) / (1.0 - p)) * dp;
        }
    }
    Ok((total * norm, grad))
}

/// Weighted cross-entropy over expression classes: `pred` rows are softmax
/// distributions and `target` rows one-hot.
pub fn expr_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, w: &ClassWeights, valid: &[bool]) -> Result<f64> {
    expr_loss_grad(pred, target, w, valid).map(|(l, _)| l)
}

pub fn expr_loss_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    w: &ClassWeights,
    valid: &[bool],
) -> Result<(f64, Array2<f64>)> {
    let n_valid = check_batch(pred, target, w, valid)?;
    for (i, row) in pred.rows().into_iter().enumerate() {
        if valid[i] && (row.sum() - 1.0).abs() > 1e-3 {
            return Err(Error::arg(format!("prediction row {i} does not sum to 1")));
        }
    }
    let c = pred.ncols() as f64;
    let norm = 1.0 / (c * n_valid as f64);
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
        for j in 0..pred.ncols() {
            let z = target[[i, j]];
            if z == 0.0 {
                continue;
            }
            let (p, dp) = clamp_p(pred[[i, j]]);
            let wj = w.weights[j];
            total -= wj * z * p.ln();
            grad[[i, j]] = -norm * wj * z / p * dp;
        }
    }
    Ok((total * norm, grad))
}

/// Summary statistics shared by CCC and its gradient.
struct PairMoments {
    n: f64,
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
    const_x: bool,
    const_y: bool,
}

fn moments(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<PairMoments> {
    if x.len() != y.len() {
        return Err(Error::arg(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::arg("CCC needs at least 2 samples"));
    }
    let n = x.len() as f64;
    let mean_x = x.sum() / n;
    let mean_y = y.sum() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    Ok(PairMoments {
        n,
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
        const_x: x.iter().all(|v| *v == x[0]),
        const_y: y.iter().all(|v| *v == y[0]),
    })
}

/// Concordance correlation coefficient together with a flag that is set
/// when both inputs are constant and the value comes from the degenerate
/// rule (1 if equal, 0 otherwise).
pub fn ccc_flagged(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<(f64, bool)> {
    let m = moments(x, y)?;
    if m.const_x && m.const_y {
        return Ok((if x[0] == y[0] { 1.0 } else { 0.0 }, true));
    }
    let (var_x, var_y, cov) = (
        if m.const_x { 0.0 } else { m.var_x },
        if m.const_y { 0.0 } else { m.var_y },
        if m.const_x || m.const_y { 0.0 } else { m.cov },
    );
    let dm = m.mean_x - m.mean_y;
    let v = 2.0 * cov / (var_x + var_y + dm * dm);
    Ok((v.clamp(-1.0, 1.0), false))
}

/// `2·Cov(x,y) / (σx² + σy² + (μx − μy)²)` with population moments.
pub fn ccc(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    ccc_flagged(x, y).map(|(v, _)| v)
}

/// Derivative of `ccc(x, y)` with respect to each `x_i`.
pub fn ccc_grad_x(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>> {
    let m = moments(x, y)?;
    if m.const_x && m.const_y {
        return Ok(Array1::zeros(x.len()));
    }
    let dm = m.mean_x - m.mean_y;
    let a = m.cov;
    let b = m.var_x + m.var_y + dm * dm;
    Ok(x
        .iter()
        .zip(y.iter())
        .map(|(xi, yi)| {
            let da = (yi - m.mean_y) / m.n;
            let db = 2.0 * (xi - m.mean_x) / m.n + 2.0 * dm / m.n;
            2.0 * (da * b - a * db) / (b * b)
        })
        .collect())
}

fn select_valid(v: ArrayView1<f64>, valid: &[bool]) -> Array1<f64> {
    v.iter()
        .zip(valid)
        .filter(|(_, ok)| **ok)
        .map(|(x, _)| *x)
        .collect()
}

/// `(1 − CCC(v̂, v)) + (1 − CCC(â, a))` over the valid frames of a batch.
pub fn va_loss(
    pred_v: ArrayView1<f64>,
    pred_a: ArrayView1<f64>,
    true_v: ArrayView1<f64>,
    true_a: ArrayView1<f64>,
    valid: &[bool],
) -> Result<f64> {
    va_loss_grad(pred_v, pred_a, true_v, true_a, valid).map(|(l, _, _)| l)
}

/// Loss plus gradients with respect to `pred_v` and `pred_a` (zero at
/// invalid frames).
pub fn va_loss_grad(
    pred_v: ArrayView1<f64>,
    pred_a: ArrayView1<f64>,
    true_v: ArrayView1<f64>,
    true_a: ArrayView1<f64>,
    valid: &[bool],
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let n = pred_v.len();
    if [pred_a.len(), true_v.len(), true_a.len(), valid.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::arg("valence/arousal vectors differ in length"));
    }
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid < 2 {
        return Err(Error::arg(format!(
            "VA loss needs at least 2 valid frames, got {n_valid}"
        )));
    }
    let (pv, pa, tv, ta) = (
        select_valid(pred_v, valid),
        select_valid(pred_a, valid),
        select_valid(true_v, valid),
        select_valid(true_a, valid),
    );
    let loss = (1.0 - ccc(pv.view(), tv.view())?) + (1.0 - ccc(pa.view(), ta.view())?);
    let gv_valid = ccc_grad_x(pv.view(), tv.view())?;
    let ga_valid = ccc_grad_x(pa.view(), ta.view())?;
    let mut gv = Array1::zeros(n);
    let mut ga = Array1::zeros(n);
    let mut k = 0;
    for (i, ok) in valid.iter().enumerate() {
        if *ok {
            gv[i] = -gv_valid[k];
            ga[i] = -ga_valid[k];
            k += 1;
        }
    }
    Ok((loss, gv, ga))
}

/// Loss and gradient for a flattened `[N × n_outputs]` batch, dispatched on
/// the task. Every row is treated as valid.
pub fn task_loss_grad(task: &TaskSpec, pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let valid = vec![true; pred.nrows()];
    let weights = || {
        task.class_weights
            .clone()
            .map(|weights| ClassWeights { weights })
            .unwrap_or_else(|| ClassWeights::uniform(task.n_outputs))
    };
    match task.task {
        Task::Au => au_loss_grad(pred, target, &weights(), &valid),
        Task::Expr => expr_loss_grad(pred, target, &weights(), &valid),
        Task::Va => {
            let (l, gv, ga) = va_loss_grad(
                pred.column(0),
                pred.column(1),
                target.column(0),
                target.column(1),
                &valid,
            )?;
            let mut grad = Array2::zeros(pred.dim());
            grad.column_mut(0).assign(&gv);
            grad.column_mut(1).assign(&ga);
            Ok((l, grad))
        }
    }
}
