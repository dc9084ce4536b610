//! Frame-continuity filling and temporal smoothing of per-frame predictions.
//!
//! All filters work column-wise on `[n_frames × n_outputs]` matrices and pad
//! the boundaries by half-sample reflection (`d c b a | a b c d | d c b a`).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};

use crate::datamodel::{SmoothingKind, TaskSpec};
use crate::error::{Error, Result};

/// Truncation radius of the Gaussian kernel in units of sigma.
pub const GAUSSIAN_TRUNCATE: f64 = 4.0;

/// Dense predictions for frames `0..n_frames`. Each missing frame copies the
/// nearest present frame, preferring the earlier one on ties.
pub fn fill_missing(predictions: &BTreeMap<usize, Vec<f64>>, n_frames: usize) -> Result<Array2<f64>> {
    let Some((_, first)) = predictions.iter().next() else {
        return Err(Error::arg("no predicted frames to fill from"));
    };
    let width = first.len();
    if predictions.values().any(|v| v.len() != width) {
        return Err(Error::arg("prediction vectors differ in length"));
    }
    if let Some((&last, _)) = predictions.iter().next_back() {
        if last >= n_frames {
            return Err(Error::arg(format!(
                "frame {last} outside a {n_frames}-frame video"
            )));
        }
    }
    let present: Vec<usize> = predictions.keys().copied().collect();
    let mut out = Array2::zeros((n_frames, width));
    let mut next = 0; // index of the first present frame >= t
    for t in 0..n_frames {
        while next < present.len() && present[next] < t {
            next += 1;
        }
        let src = match (next.checked_sub(1).map(|i| present[i]), present.get(next)) {
            (_, Some(&after)) if after == t => after,
            (Some(before), Some(&after)) => {
                if t - before <= after - t {
                    before
                } else {
                    after
                }
            }
            (Some(before), None) => before,
            (None, Some(&after)) => after,
            (None, None) => unreachable!("non-empty map"),
        };
        out.row_mut(t).assign(&Array1::from(predictions[&src].clone()));
    }
    Ok(out)
}

/// Maps any integer position onto `0..n` by half-sample reflection.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalised Gaussian taps for offsets `-r..=r`, `r = ⌊4σ + 0.5⌋`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (GAUSSIAN_TRUNCATE * sigma + 0.5) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x * x) as f64 / (sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

fn check_series(series: ArrayView2<f64>) -> Result<()> {
    if series.nrows() == 0 {
        return Err(Error::arg("empty series"));
    }
    Ok(())
}

pub fn gaussian_smooth(series: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
    let kernel = gaussian_kernel(sigma)?;
    check_series(series)?;
    let radius = (kernel.len() / 2) as isize;
    let n = series.nrows();
    let mut out = Array2::zeros(series.dim());
    for c in 0..series.ncols() {
        let col = series.column(c);
        for t in 0..n {
            // Accumulating deviations from the centre sample keeps constant
            // series bit-exact.
            let centre = col[t];
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let src = reflect_index(t as isize + k as isize - radius, n);
                acc += w * (col[src] - centre);
            }
            out[[t, c]] = centre + acc;
        }
    }
    Ok(out)
}

/// Window offsets `-(w/2) ..= w - 1 - w/2`: even windows take the extra
/// element on the left.
fn window_offsets(window: usize) -> Result<std::ops::RangeInclusive<isize>> {
    if window == 0 {
        return Err(Error::arg("window must be at least 1"));
    }
    let left = (window / 2) as isize;
    Ok(-left..=(window as isize - 1 - left))
}

fn sliding<F>(series: ArrayView2<f64>, window: usize, mut reduce: F) -> Result<Array2<f64>>
where
    F: FnMut(&mut [f64], f64) -> f64,
{
    let offsets = window_offsets(window)?;
    check_series(series)?;
    let n = series.nrows();
    let mut buf = vec![0.0; window];
    let mut out = Array2::zeros(series.dim());
    for c in 0..series.ncols() {
        let col = series.column(c);
        for t in 0..n {
            for (slot, off) in buf.iter_mut().zip(offsets.clone()) {
                *slot = col[reflect_index(t as isize + off, n)];
            }
            out[[t, c]] = reduce(&mut buf, col[t]);
        }
    }
    Ok(out)
}

/// Sliding median; for even windows the upper of the two middle values.
pub fn median_smooth(series: ArrayView2<f64>, window: usize) -> Result<Array2<f64>> {
    sliding(series, window, |buf, _| {
        buf.sort_by(|a, b| a.total_cmp(b));
        buf[buf.len() / 2]
    })
}

pub fn average_smooth(series: ArrayView2<f64>, window: usize) -> Result<Array2<f64>> {
    sliding(series, window, |buf, centre| {
        let n = buf.len() as f64;
        centre + buf.iter().map(|v| v - centre).sum::<f64>() / n
    })
}

/// Applies the task's configured smoothing filter. Runs on probabilities or
/// values, before any thresholding or argmax.
pub fn apply_policy(predictions: ArrayView2<f64>, task: &TaskSpec) -> Result<Array2<f64>> {
    let spec = &task.smoothing;
    spec.validate()?;
    if predictions.ncols() != task.n_outputs {
        return Err(Error::Config(format!(
            "predictions have {} columns but task {} has {} outputs",
            predictions.ncols(),
            task.task,
            task.n_outputs
        )));
    }
    match spec.kind {
        SmoothingKind::None => Ok(predictions.to_owned()),
        SmoothingKind::Gaussian => gaussian_smooth(predictions, spec.sigma),
        SmoothingKind::Median => median_smooth(predictions, spec.window),
        SmoothingKind::Average => average_smooth(predictions, spec.window),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{SmoothingSpec, Task};
    use crate::metrics::argmax_one_hot;
    use ndarray::{array, Array2};

    fn col(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn fill_tie_prefers_earlier_frame() {
        let preds = BTreeMap::from([(0, vec![1.0]), (2, vec![3.0])]);
        let out = fill_missing(&preds, 3).unwrap();
        assert_eq!(out, array![[1.0], [1.0], [3.0]]);
    }

    #[test]
    fn fill_single_present_frame() {
        let preds = BTreeMap::from([(5, vec![0.2, 0.8])]);
        let out = fill_missing(&preds, 10).unwrap();
        assert!(out.rows().into_iter().all(|r| r.to_vec() == vec![0.2, 0.8]));
    }

    #[test]
    fn fill_errors() {
        assert!(fill_missing(&BTreeMap::new(), 3).is_err());
        assert!(fill_missing(&BTreeMap::from([(4, vec![1.0])]), 3).is_err());
    }

    #[test]
    fn reflect_pads_half_sample() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn median_removes_spike() {
        let out = median_smooth(col(&[0.0, 0.0, 9.0, 0.0, 0.0]).view(), 3).unwrap();
        assert_eq!(out, col(&[0.0; 5]));
    }

    #[test]
    fn window_one_is_identity() {
        let s = col(&[0.3, 0.1, 0.9, 0.4]);
        assert_eq!(median_smooth(s.view(), 1).unwrap(), s);
        assert_eq!(average_smooth(s.view(), 1).unwrap(), s);
        assert!(median_smooth(s.view(), 0).is_err());
        assert!(gaussian_smooth(s.view(), 0.0).is_err());
        assert!(gaussian_smooth(s.view(), -1.0).is_err());
    }

    #[test]
    fn constant_series_unchanged() {
        let s = Array2::from_elem((30, 2), 0.375);
        assert_eq!(gaussian_smooth(s.view(), 5.0).unwrap(), s);
        assert_eq!(average_smooth(s.view(), 4).unwrap(), s);
    }

    #[test]
    fn impulse_response_is_kernel() {
        let mut s = Array2::zeros((101, 1));
        s[[50, 0]] = 1.0;
        let out = gaussian_smooth(s.view(), 5.0).unwrap();
        // Closed form: exp(-x²/50) / Σ_{|k|≤20} exp(-k²/50).
        let z: f64 = (-20..=20).map(|k: i32| (-(k * k) as f64 / 50.0).exp()).sum();
        for t in 0..101 {
            let x = t as i32 - 50;
            let expected = if x.abs() <= 20 {
                (-(x * x) as f64 / 50.0).exp() / z
            } else {
                0.0
            };
            assert!((out[[t, 0]] - expected).abs() < 1e-14, "t = {t}");
        }
    }

    #[test]
    fn policy_dispatch() {
        let s = Array2::from_shape_fn((40, 12), |(i, j)| ((i * 7 + j * 3) % 5) as f64 / 5.0);
        let none = TaskSpec::new(Task::Au).with_smoothing(SmoothingKind::None);
        assert_eq!(apply_policy(s.view(), &none).unwrap(), s);
        let g = TaskSpec::new(Task::Au);
        assert_eq!(g.smoothing.sigma, 5.0);
        assert_eq!(
            apply_policy(s.view(), &g).unwrap(),
            gaussian_smooth(s.view(), 5.0).unwrap()
        );
        let mut bad = TaskSpec::new(Task::Va);
        bad.smoothing = SmoothingSpec {
            kind: SmoothingKind::Median,
            window: 0,
            sigma: 1.0,
        };
        assert!(matches!(
            apply_policy(Array2::zeros((3, 2)).view(), &bad),
            Err(Error::Config(_))
        ));
        assert!("bilateral".parse::<SmoothingKind>().is_err());
    }

    #[test]
    fn smoothing_can_change_expression_argmax() {
        // Middle frame flickers to class 1 between two class-0 frames.
        let mut p = Array2::from_elem((3, 8), 0.0);
        p[[0, 0]] = 0.9;
        p[[0, 1]] = 0.1;
        p[[1, 0]] = 0.45;
        p[[1, 1]] = 0.55;
        p[[2, 0]] = 0.9;
        p[[2, 1]] = 0.1;
        let raw = argmax_one_hot(p.view());
        let smoothed = gaussian_smooth(p.view(), 1.0).unwrap();
        let after = argmax_one_hot(smoothed.view());
        assert_eq!(raw[[1, 1]], 1.0);
        assert_eq!(after[[1, 0]], 1.0);
    }
}
