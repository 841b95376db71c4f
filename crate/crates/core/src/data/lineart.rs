use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineartConfig {
    /// Responses at or below this quantile of the normalized gradient
    /// magnitude are zeroed.
    pub quantile: f64,
}

impl Default for LineartConfig {
    fn default() -> Self {
        Self { quantile: 0.9 }
    }
}

fn luminance(rgb: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = rgb.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * rgb[[0, i, j]] + 0.587 * rgb[[1, i, j]] + 0.114 * rgb[[2, i, j]]
    })
}

/// Edge map in `[0, 1]`: central-difference gradient magnitude of the
/// luminance, scaled by its maximum and thresholded at a quantile.
pub fn lineart_extract(rgb: &Array3<f64>, config: &LineartConfig) -> Array2<f64> {
    let lum = luminance(rgb);
    let (h, w) = lum.dim();
    let at = |i: isize, j: isize| lum[[i.clamp(0, h as isize - 1) as usize, j.clamp(0, w as isize - 1) as usize]];
    let mag = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        let gx = (at(i, j + 1) - at(i, j - 1)) / 2.0;
        let gy = (at(i + 1, j) - at(i - 1, j)) / 2.0;
        (gx * gx + gy * gy).sqrt()
    });
    let max = mag.fold(0.0f64, |m, &v| m.max(v));
    if max <= 0.0 {
        return Array2::zeros((h, w));
    }
    let norm = mag / max;
    let mut sorted: Vec<f64> = norm.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let q = config.quantile.clamp(0.0, 1.0);
    let threshold = sorted[((sorted.len() - 1) as f64 * q).floor() as usize];
    norm.mapv(|v| if v > threshold { v } else { 0.0 })
}
