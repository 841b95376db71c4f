//! Attribute-recovery evaluation: generate across an attribute's grid and
//! its midpoints with one seed, read the attribute back from each image and
//! measure how faithfully it follows the request.

use serde::{Deserialize, Serialize};

use crate::attribute::normalize;
use crate::backbone::DiffusionBackbone;
use crate::data::grid_axis;
use crate::data::render::estimate_position;
use crate::error::Result;
use crate::inference::{GenerateRequest, Generator};

/// Ranks starting at 1, ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation. NaN if either input has a NaN or is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 || x.iter().chain(y).any(|v| v.is_nan()) {
        return f64::NAN;
    }
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    /// Requested values, normalized, grid then midpoints.
    pub requested: Vec<f64>,
    /// Read-back values, normalized; NaN where no object was found.
    pub estimated: Vec<f64>,
    pub grid_len: usize,
    pub spearman: f64,
    pub midpoints_between: usize,
    pub midpoint_count: usize,
    pub mean_abs_error: f64,
}

impl InterpolationReport {
    pub fn from_estimates(grid_req: &[f64], grid_est: &[f64], mid_req: &[f64], mid_est: &[f64]) -> Self {
        let between = mid_est
            .iter()
            .enumerate()
            .filter(|(i, &m)| {
                let (a, b) = (grid_est[*i], grid_est[i + 1]);
                a.min(b) < m && m < a.max(b)
            })
            .count();
        let requested: Vec<f64> = grid_req.iter().chain(mid_req).copied().collect();
        let estimated: Vec<f64> = grid_est.iter().chain(mid_est).copied().collect();
        let mean_abs_error =
            requested.iter().zip(&estimated).map(|(r, e)| (r - e).abs()).sum::<f64>() / requested.len() as f64;
        Self {
            spearman: spearman(&requested, &estimated),
            requested,
            estimated,
            grid_len: grid_req.len(),
            midpoints_between: between,
            midpoint_count: mid_req.len(),
            mean_abs_error,
        }
    }

    pub fn midpoint_fraction(&self) -> f64 {
        self.midpoints_between as f64 / self.midpoint_count.max(1) as f64
    }

    /// Rank correlation ≥ 0.9 and at least 80% of midpoints strictly
    /// between their neighbours.
    pub fn passes(&self) -> bool {
        self.spearman >= 0.9 && self.midpoint_fraction() >= 0.8
    }
}

/// Generates the attribute's grid values and every midpoint with the same
/// request otherwise, and reads the horizontal position back from each.
pub fn interpolation_experiment<B: DiffusionBackbone>(
    generator: &Generator<B>,
    attribute: &str,
    base: &GenerateRequest,
) -> Result<InterpolationReport> {
    let spec = generator.registry.require(attribute)?.clone();
    let grid = grid_axis(&spec, spec.default_grid_size);
    let mids: Vec<f64> = grid.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    let estimate = |v: f64| -> Result<f64> {
        let req = base.clone().with(attribute, v);
        let img = generator.generate(&req)?;
        Ok(estimate_position(&img.pixels).unwrap_or(f64::NAN))
    };
    let norm = |vals: &[f64]| -> Result<Vec<f64>> { vals.iter().map(|&v| normalize(&spec, v)).collect() };
    let grid_est = grid.iter().map(|&v| estimate(v)).collect::<Result<Vec<_>>>()?;
    let mid_est = mids.iter().map(|&v| estimate(v)).collect::<Result<Vec<_>>>()?;
    Ok(InterpolationReport::from_estimates(&norm(&grid)?, &grid_est, &norm(&mids)?, &mid_est))
}

/// Prompts for attribute recovery: the rendered-record template, then the
/// attribute placed on a subject never seen in training. An attribute word
/// that has absorbed the training object's identity fails on the second.
pub fn recovery_templates(attribute: &str) -> Vec<String> {
    vec![
        format!("a <attr:{attribute}> photo of <obj>"),
        format!("<attr:{attribute}> a photo of a dog"),
    ]
}

/// Mean rank correlation over the given reports, a missing correlation
/// counting as -1.
pub fn mean_spearman(reports: &[InterpolationReport]) -> f64 {
    if reports.is_empty() {
        return f64::NAN;
    }
    reports.iter().map(|r| if r.spearman.is_nan() { -1.0 } else { r.spearman }).sum::<f64>() / reports.len() as f64
}

/// Runs the interpolation experiment once per recovery template with the
/// rest of `base` unchanged.
pub fn recovery_suite<B: DiffusionBackbone>(
    generator: &Generator<B>,
    attribute: &str,
    base: &GenerateRequest,
) -> Result<Vec<InterpolationReport>> {
    recovery_templates(attribute)
        .into_iter()
        .map(|template| interpolation_experiment(generator, attribute, &GenerateRequest { template, ..base.clone() }))
        .collect()
}
