//! Bilinear resampling with half-pixel centers and edge clamping.

use ndarray::{Array2, ArrayView2};

/// Source coordinate and blend weight for each destination index.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

/// Resizes a single-channel map to `(h, w)`.
pub fn bilinear(map: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = map.dim();
    if (sh, sw) == (h, w) {
        return map.to_owned();
    }
    let (ty, tx) = (taps(sh, h), taps(sw, w));
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (y0, y1, fy) = ty[i];
        let (x0, x1, fx) = tx[j];
        let top = map[(y0, x0)] * (1.0 - fx) + map[(y0, x1)] * fx;
        let bottom = map[(y1, x0)] * (1.0 - fx) + map[(y1, x1)] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Resizes the spatial rows of a `(sh·sw) × L` attention map to `(h·w) × L`
/// and renormalizes each row to sum to one.
pub fn resize_rows(map: ArrayView2<f64>, (sh, sw): (usize, usize), (h, w): (usize, usize)) -> Array2<f64> {
    let tokens = map.ncols();
    let mut out = Array2::zeros((h * w, tokens));
    for l in 0..tokens {
        let column = map.column(l).to_owned().into_shape_with_order((sh, sw)).expect("row count is sh·sw");
        let resized = bilinear(column.view(), h, w);
        out.column_mut(l).assign(&resized.into_shape_with_order(h * w).expect("contiguous"));
    }
    normalize_rows(&mut out);
    out
}

pub fn normalize_rows(map: &mut Array2<f64>) {
    for mut row in map.rows_mut() {
        let total: f64 = row.sum();
        if total > 0.0 {
            row /= total;
        }
    }
}

/// 2×2 average pooling (odd trailing rows/columns are dropped).
pub fn avg_pool2<T>(h: usize, w: usize, get: impl Fn(usize, usize) -> T) -> Vec<Vec<T>>
where
    T: std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    (0..h / 2)
        .map(|i| {
            (0..w / 2)
                .map(|j| {
                    (get(2 * i, 2 * j) + get(2 * i + 1, 2 * j) + get(2 * i, 2 * j + 1) + get(2 * i + 1, 2 * j + 1)) * 0.25
                })
                .collect()
        })
        .collect()
}
