//! Brute-force reference implementations of the statistics, filters and
//! gradients in `affectkit-core`, written from their defining formulas with
//! no shared code. The acceptance suite lives in `tests/acceptance.rs`.

use ndarray::Array2;
use rand::Rng;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance.
pub fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

pub fn cov(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Concordance correlation with the degenerate conventions: both constant
/// and equal gives 1, both constant and unequal gives 0.
pub fn ccc(x: &[f64], y: &[f64]) -> f64 {
    if is_constant(x) && is_constant(y) {
        return if x[0] == y[0] { 1.0 } else { 0.0 };
    }
    let c = if is_constant(x) || is_constant(y) { 0.0 } else { cov(x, y) };
    2.0 * c / (var(x) + var(y) + (mean(x) - mean(y)).powi(2))
}

/// Pearson correlation, zero when either side is constant.
pub fn pcc(x: &[f64], y: &[f64]) -> f64 {
    if is_constant(x) || is_constant(y) {
        return 0.0;
    }
    cov(x, y) / (var(x).sqrt() * var(y).sqrt())
}

/// Per-class F1 from an explicit 2×2 confusion table.
pub fn f1(pred: &Array2<f64>, target: &Array2<f64>) -> Vec<f64> {
    (0..pred.ncols())
        .map(|c| {
            let mut table = [[0usize; 2]; 2];
            for r in 0..pred.nrows() {
                table[target[[r, c]] as usize][pred[[r, c]] as usize] += 1;
            }
            let (tp, fp, fn_) = (table[1][1], table[0][1], table[1][0]);
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

/// Column `x` extended on both sides by mirror images until it covers
/// `pad` samples beyond each end; returns the extended vector and the
/// offset of `x[0]` in it.
fn mirror_extend(x: &[f64], pad: usize) -> (Vec<f64>, usize) {
    let reversed: Vec<f64> = x.iter().rev().copied().collect();
    let reps = pad / x.len() + 2;
    let mut ext = Vec::new();
    // Tiles alternate reversed/forward so that the forward copy at index
    // `reps` (counting from zero) is the original.
    let start = if reps.is_multiple_of(2) { 0 } else { 1 };
    for k in 0..(2 * reps + 1) {
        let forward = (k + start) % 2 == 0;
        ext.extend_from_slice(if forward { x } else { &reversed });
    }
    let offset = reps * x.len();
    assert_eq!(&ext[offset..offset + x.len()], x);
    (ext, offset)
}

pub fn gaussian(x: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5).floor() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let (ext, off) = mirror_extend(x, radius as usize);
    (0..x.len())
        .map(|t| {
            (-radius..=radius)
                .zip(&raw)
                .map(|(k, w)| w / total * ext[(off as i64 + t as i64 + k) as usize])
                .sum()
        })
        .collect()
}

fn window(x: &[f64], w: usize, t: usize) -> Vec<f64> {
    let left = w / 2;
    let (ext, off) = mirror_extend(x, w);
    ext[off + t - left..off + t - left + w].to_vec()
}

/// Sliding median; even windows take the upper middle value and extend one
/// further to the left than to the right.
pub fn median(x: &[f64], w: usize) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            let mut win = window(x, w, t);
            win.sort_by(f64::total_cmp);
            win[w / 2]
        })
        .collect()
}

pub fn average(x: &[f64], w: usize) -> Vec<f64> {
    (0..x.len()).map(|t| window(x, w, t).iter().sum::<f64>() / w as f64).collect()
}

/// Nearest present frame by exhaustive search, earlier frame on ties.
pub fn nearest_present(present: &[usize], t: usize) -> usize {
    let mut best = present[0];
    for &s in present {
        if s.abs_diff(t) < best.abs_diff(t) || (s.abs_diff(t) == best.abs_diff(t) && s < best) {
            best = s;
        }
    }
    best
}

/// Central finite-difference derivative of `f` along every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, step: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(&probe);
        probe[idx] = orig - step;
        let down = f(&probe);
        probe[idx] = orig;
        g[idx] = (up - down) / (2.0 * step);
    }
    g
}

/// Largest `|a - n| / max(|a|, |n|)` over entries where either side is
/// non-zero at double precision; entries where both vanish match exactly.
pub fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-9 {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn random_binary<R: Rng>(rng: &mut R, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_bool(p) as u8 as f64)
}
