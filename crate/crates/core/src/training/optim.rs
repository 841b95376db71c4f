use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to blocks updated with `decay = true`.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// AdamW with first and second moments kept per named parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    blocks: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            blocks: BTreeMap::new(),
        }
    }

    /// One update of `params` in place. A zero learning rate leaves both
    /// the parameters and the moments untouched.
    pub fn update(&mut self, key: &str, params: &mut [f64], grads: &[f64], lr: f64, decay: bool) {
        assert_eq!(params.len(), grads.len(), "gradient length for `{key}`");
        if lr == 0.0 {
            return;
        }
        let c = self.config;
        let st = self.blocks.entry(key.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - c.beta1.powi(st.t);
        let bc2 = 1.0 - c.beta2.powi(st.t);
        for i in 0..params.len() {
            let g = grads[i];
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let step = (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + c.eps);
            if decay {
                params[i] -= lr * c.weight_decay * params[i];
            }
            params[i] -= lr * step;
        }
    }

    /// Drops all moments, as at a stage boundary.
    pub fn reset(&mut self) {
        self.blocks.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = vec![1.0, -2.0, 0.5];
        opt.update("x", &mut p, &[3.0, -0.1, 0.0], 0.1, false);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_rate_is_bitwise_noop() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![1.0, -0.0, 3.25];
        let before = p.clone();
        for _ in 0..5 {
            opt.update("x", &mut p, &[1.0, 2.0, 3.0], 0.0, true);
        }
        assert_eq!(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), before.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = vec![5.0, -3.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.update("q", &mut p, &g, 0.05, false);
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
        let mut p = vec![2.0];
        opt.update("d", &mut p, &[0.0], 0.1, true);
        assert!((p[0] - 1.9).abs() < 1e-12);
    }
}
