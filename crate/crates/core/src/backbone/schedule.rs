use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-β variance-preserving schedule. Index 0 is the clean sample
/// (α = 1, σ = 0); indices `1..=timesteps` are the trainable noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub kind: String,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    meta: ScheduleMeta,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "bad linear schedule: T={timesteps}, beta {beta_start}..{beta_end}"
            )));
        }
        let mut alphas = Vec::with_capacity(timesteps + 1);
        let mut sigmas = Vec::with_capacity(timesteps + 1);
        let mut alpha_bar = 1.0f64;
        alphas.push(1.0);
        sigmas.push(0.0);
        for i in 0..timesteps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64;
            alpha_bar *= 1.0 - beta;
            alphas.push(alpha_bar.sqrt());
            sigmas.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self {
            meta: ScheduleMeta {
                kind: "linear".into(),
                timesteps,
                beta_start,
                beta_end,
            },
            alphas,
            sigmas,
        })
    }

    pub fn from_meta(meta: &ScheduleMeta) -> Result<Self> {
        match meta.kind.as_str() {
            "linear" => Self::linear(meta.timesteps, meta.beta_start, meta.beta_end),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }

    pub fn meta(&self) -> &ScheduleMeta {
        &self.meta
    }

    /// Number of noisy timesteps; valid indices are `0..=timesteps()`.
    pub fn timesteps(&self) -> usize {
        self.meta.timesteps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::Precondition(format!(
                "timestep {t} outside 0..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

/// `α_t·sample + σ_t·noise`
pub fn add_noise(
    schedule: &NoiseSchedule,
    sample: &Array3<f64>,
    noise: &Array3<f64>,
    t: usize,
) -> Result<Array3<f64>> {
    if sample.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            expected: sample.shape().to_vec(),
            actual: noise.shape().to_vec(),
        });
    }
    schedule.check(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(Zip::from(sample)
        .and(noise)
        .map_collect(|&x, &n| a * x + s * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
    }

    #[test]
    fn monotone_and_bounded() {
        let s = sched();
        for t in 1..=100 {
            assert!(s.alpha(t) <= s.alpha(t - 1));
            assert!(s.sigma(t) >= s.sigma(t - 1));
            let sum = s.alpha(t).powi(2) + s.sigma(t).powi(2);
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(s.alpha(100) < 0.01);
    }

    #[test]
    fn clean_step_is_identity() {
        let x = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| (c + i * j) as f64 * 0.1);
        let n = Array3::from_elem((3, 4, 4), 7.0);
        assert_eq!(add_noise(&sched(), &x, &n, 0).unwrap(), x);
    }

    #[test]
    fn zero_sample_gives_scaled_noise() {
        let s = sched();
        let x = Array3::zeros((3, 4, 4));
        let n = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| c as f64 - i as f64 + 0.5 * j as f64);
        assert_eq!(add_noise(&s, &x, &n, 40).unwrap(), n.mapv(|v| s.sigma(40) * v));
    }

    #[test]
    fn noise_recoverable_by_inversion() {
        let s = sched();
        let x = Array3::from_shape_fn((3, 8, 8), |(c, i, j)| ((c * 7 + i * 3 + j) as f64).sin());
        let n = Array3::from_shape_fn((3, 8, 8), |(c, i, j)| ((c + i * 5 + j * 11) as f64).cos());
        for t in [1, 17, 50, 100] {
            let y = add_noise(&s, &x, &n, t).unwrap();
            let rec = (&y - &x.mapv(|v| v * s.alpha(t))) / s.sigma(t);
            let err = (&rec - &n).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-6, "t={t}: {err}");
        }
    }

    #[test]
    fn shape_mismatch_and_bad_timestep() {
        let s = sched();
        let x = Array3::zeros((3, 4, 4));
        assert!(add_noise(&s, &x, &Array3::zeros((3, 4, 5)), 1).is_err());
        assert!(add_noise(&s, &x, &x, 101).is_err());
    }
}
