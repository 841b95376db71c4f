use ndarray::{Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::guidance::cfg_predict;
use super::{DiffusionBackbone, PredictionKind};
use crate::error::{Error, Result};

/// Pixel range of the sample space.
pub const SAMPLE_MIN: f64 = -1.0;
pub const SAMPLE_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
        }
    }
}

/// Seeded standard-normal tensor.
pub fn gaussian_noise(shape: [usize; 3], rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// The timesteps visited by a `steps`-step sampler, from `T` down to 0.
pub fn timestep_sequence(timesteps: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|i| ((timesteps as f64) * (1.0 - i as f64 / steps as f64)).round() as usize)
        .collect()
}

/// Deterministic DDIM sampling with classifier-free guidance. The initial
/// noise is the only randomness and comes from `seed`. The result is clamped
/// to the pixel range after the last step only.
pub fn sample_image<B: DiffusionBackbone + ?Sized>(
    backbone: &B,
    positive: &Array2<f64>,
    negative: &Array2<f64>,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Array3<f64>> {
    if config.steps == 0 {
        return Err(Error::Precondition("sampler needs at least one step".into()));
    }
    let schedule = backbone.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_noise(backbone.sample_shape(), &mut rng);
    let ts = timestep_sequence(schedule.timesteps(), config.steps);
    for pair in ts.windows(2) {
        let (t, next) = (pair[0], pair[1]);
        if t == next {
            continue;
        }
        let pred = cfg_predict(backbone, &x, t, positive, negative, config.guidance_scale)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let x0 = match backbone.prediction_kind() {
            PredictionKind::Sample => pred,
            PredictionKind::Noise => Zip::from(&x).and(&pred).map_collect(|&xt, &e| (xt - s * e) / a),
        };
        let (an, sn) = (schedule.alpha(next), schedule.sigma(next));
        x = if sn == 0.0 {
            x0
        } else {
            Zip::from(&x)
                .and(&x0)
                .map_collect(|&xt, &x0| an * x0 + sn * (xt - a * x0) / s)
        };
    }
    Ok(x.mapv(|v| v.clamp(SAMPLE_MIN, SAMPLE_MAX)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ToyBackbone, ToyConfig};

    #[test]
    fn timestep_sequences() {
        assert_eq!(timestep_sequence(100, 1), vec![100, 0]);
        assert_eq!(timestep_sequence(100, 4), vec![100, 75, 50, 25, 0]);
        let ts = timestep_sequence(100, 50);
        assert_eq!(ts.len(), 51);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn deterministic_and_single_step() {
        let bb = ToyBackbone::new(ToyConfig::default()).unwrap();
        let cond = bb.encode(&Array2::from_elem((24, 16), 0.1)).unwrap();
        let cfg = SamplerConfig { steps: 5, guidance_scale: 3.0 };
        let a = sample_image(&bb, &cond, &cond, &cfg, 7).unwrap();
        assert_eq!(a, sample_image(&bb, &cond, &cond, &cfg, 7).unwrap());
        assert_ne!(a, sample_image(&bb, &cond, &cond, &cfg, 8).unwrap());

        let one = SamplerConfig { steps: 1, guidance_scale: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = gaussian_noise(bb.sample_shape(), &mut rng);
        let direct = bb.denoise(&noise, 100, &cond).unwrap().mapv(|v| v.clamp(-1.0, 1.0));
        assert_eq!(sample_image(&bb, &cond, &cond, &one, 3).unwrap(), direct);
    }

    #[test]
    fn zero_steps_rejected() {
        let bb = ToyBackbone::new(ToyConfig::default()).unwrap();
        let cond = bb.encode(&Array2::zeros((24, 16))).unwrap();
        let cfg = SamplerConfig { steps: 0, guidance_scale: 1.0 };
        assert!(sample_image(&bb, &cond, &cond, &cfg, 0).is_err());
    }
}
