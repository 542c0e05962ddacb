use crate::numeric::{Real, Tensor};

fn fill_1d<T: Real>(out: &mut [T], pos: f64) {
    let d = out.len();
    for i in 0..d / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = T::lit((pos * freq).sin());
        out[2 * i + 1] = T::lit((pos * freq).cos());
    }
}

/// Standard sinusoidal codes for positions `0..n`, `n x d`.
pub fn sinusoidal_1d<T: Real>(n: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, d]);
    for (p, row) in t.data_mut().chunks_mut(d).enumerate() {
        fill_1d(row, p as f64);
    }
    t
}

/// 2-D codes for a `rows x cols` token grid in row-major order: the first
/// half of each code encodes the row index, the second half the column.
pub fn sinusoidal_2d<T: Real>(rows: usize, cols: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows * cols, d]);
    let half = d / 2;
    for (k, code) in t.data_mut().chunks_mut(d).enumerate() {
        let (r, c) = (k / cols, k % cols);
        let (a, b) = code.split_at_mut(half);
        fill_1d(a, r as f64);
        fill_1d(b, c as f64);
    }
    t
}
