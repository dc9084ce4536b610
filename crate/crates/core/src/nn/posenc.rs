//! Fixed sinusoidal position encodings.

use ndarray::Array2;

use super::graph::Mat;

fn sincos_into(out: &mut Mat, col0: usize, dim: usize, positions: impl Iterator<Item = f64>) {
    let half = dim / 2;
    for (row, pos) in positions.enumerate() {
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
            out[[row, col0 + i]] = (pos * omega).sin();
            out[[row, col0 + half + i]] = (pos * omega).cos();
        }
    }
}

/// `[n_positions × dim]` table; sine halves first, cosine halves second.
/// An odd trailing column stays zero.
pub fn sinusoidal_1d(n_positions: usize, dim: usize) -> Mat {
    let mut out = Array2::zeros((n_positions, dim));
    sincos_into(&mut out, 0, dim, (0..n_positions).map(|p| p as f64));
    out
}

/// `[side² × dim]` table for a square patch grid in raster order: the first
/// half of the columns encodes the row coordinate, the second the column.
pub fn sinusoidal_2d(side: usize, dim: usize) -> Mat {
    let mut out = Array2::zeros((side * side, dim));
    let half = dim / 2;
    sincos_into(&mut out, 0, half, (0..side * side).map(|p| (p / side) as f64));
    sincos_into(&mut out, half, half, (0..side * side).map(|p| (p % side) as f64));
    out
}
