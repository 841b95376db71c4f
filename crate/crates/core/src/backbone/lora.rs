//! Low-rank adaptation: configuration, target selection and the per-layer
//! state that checkpoints carry.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linear::{LoraFactors, LoraGrad};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Layer names or `prefix.*` patterns.
    pub targets: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            targets: vec!["text.*".into(), "denoiser.*".into()],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target layer".into()));
        }
        Ok(())
    }

    /// Resolves the selector against the layers a backbone offers. Every
    /// pattern must match at least one layer.
    pub fn resolve_targets<'a>(&self, available: &[&'a str]) -> Result<Vec<&'a str>> {
        let mut chosen = Vec::new();
        for pattern in &self.targets {
            let matches: Vec<&str> = available
                .iter()
                .copied()
                .filter(|name| pattern_matches(pattern, name))
                .collect();
            if matches.is_empty() {
                return Err(Error::Config(format!(
                    "LoRA target `{pattern}` matches no layer (available: {})",
                    available.join(", ")
                )));
            }
            for m in matches {
                if !chosen.contains(&m) {
                    chosen.push(m);
                }
            }
        }
        chosen.sort_unstable();
        Ok(chosen)
    }

    /// Fresh factors for one layer: A ~ N(0, 1/in), B = 0.
    pub fn init_factors(&self, layer: &str, in_dim: usize, out_dim: usize) -> LoraFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(layer.as_bytes()));
        let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("valid std");
        LoraFactors {
            a: Array2::from_shape_simple_fn((self.rank, in_dim), || normal.sample(&mut rng)),
            b: Array2::zeros((out_dim, self.rank)),
            scale: self.scale(),
        }
    }
}

fn pattern_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// LoRA trainable parameter count for a set of `(in, out)` layer shapes.
pub fn lora_param_count(rank: usize, shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|(i, o)| rank * (i + o)).sum()
}

/// Adapter factors keyed by layer name, as stored in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraState {
    pub config: Option<LoraConfig>,
    pub layers: BTreeMap<String, LoraFactors>,
}

impl LoraState {
    pub fn param_count(&self) -> usize {
        self.layers.values().map(LoraFactors::param_count).sum()
    }
}

/// Gradients for every adapted layer touched by a backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoraGrads {
    pub layers: BTreeMap<String, LoraGrad>,
}

impl LoraGrads {
    pub fn insert(&mut self, layer: &str, grad: Option<LoraGrad>) {
        if let Some(g) = grad {
            match self.layers.get_mut(layer) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    self.layers.insert(layer.to_string(), g);
                }
            }
        }
    }

    pub fn merge(&mut self, other: LoraGrads) {
        for (name, g) in other.layers {
            self.insert(&name, Some(g));
        }
    }
}
