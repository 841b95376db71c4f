//! Regenerates rendered records with new backgrounds and textures through an
//! image conditioner that follows a depth or lineart map.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_gray, load_rgb, save_gray, save_rgb};
use super::lineart::{lineart_extract, LineartConfig};
use super::{Manifest, SampleRecord, SampleSource};
use crate::backbone::lora::fnv1a;
use crate::error::{Error, Result};

pub const WING_POSE_PROMPTS: &str = "a bird {with two wings, flying} on a {rainy, sunny} day";
pub const DOLLY_ZOOM_PROMPTS: &str =
    "a chair {in the Acropolis, in a forest, under the snow, on a beach, in Times Square, in a department store}";
pub const ILLUMINATION_PROMPTS: &str = "a {white, gray, brown} dog";
/// Default guidance strength for lineart conditioning.
pub const LINEART_STRENGTH: f64 = 0.6;
pub const DEPTH_STRENGTH: f64 = 1.0;

/// Expands every `{a, b, ...}` group into the Cartesian product of prompts,
/// leftmost group varying slowest.
pub fn expand_prompt_pattern(pattern: &str) -> Result<Vec<String>> {
    let Some(open) = pattern.find('{') else {
        if pattern.contains('}') {
            return Err(Error::Config(format!("unbalanced `}}` in prompt pattern `{pattern}`")));
        }
        return Ok(vec![pattern.to_string()]);
    };
    let close = pattern[open..]
        .find('}')
        .map(|c| open + c)
        .ok_or_else(|| Error::Config(format!("unclosed `{{` in prompt pattern `{pattern}`")))?;
    let rest = expand_prompt_pattern(&pattern[close + 1..])?;
    let mut out = Vec::new();
    for choice in pattern[open + 1..close].split(',') {
        for tail in &rest {
            out.push(format!("{}{}{}", &pattern[..open], choice.trim(), tail));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionerKind {
    Depth,
    Lineart,
}

impl std::str::FromStr for ConditionerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Self::Depth),
            "lineart" => Ok(Self::Lineart),
            other => Err(Error::Config(format!(
                "unknown conditioner kind `{other}` (expected depth or lineart)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub conditioner_kind: ConditionerKind,
    pub guidance_strength: f64,
    pub prompt_pool: Vec<String>,
    /// Augmented images per rendered record.
    pub augment_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lineart: LineartConfig,
}

impl AugmentationPolicy {
    pub fn lineart(prompt_pool: Vec<String>) -> Self {
        Self {
            conditioner_kind: ConditionerKind::Lineart,
            guidance_strength: LINEART_STRENGTH,
            prompt_pool,
            augment_ratio: 1.0,
            seed: 0,
            lineart: LineartConfig::default(),
        }
    }

    pub fn depth(prompt_pool: Vec<String>) -> Self {
        Self {
            conditioner_kind: ConditionerKind::Depth,
            guidance_strength: DEPTH_STRENGTH,
            ..Self::lineart(prompt_pool)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_pool.is_empty() {
            return Err(Error::Config("augmentation prompt pool is empty".into()));
        }
        if let Some(p) = self.prompt_pool.iter().find(|p| p.contains('<') || p.contains('>')) {
            return Err(Error::Config(format!("augmentation prompt `{p}` contains a placeholder")));
        }
        if !(self.guidance_strength > 0.0 && self.guidance_strength <= 1.0) {
            return Err(Error::Config(format!(
                "guidance strength {} outside (0, 1]",
                self.guidance_strength
            )));
        }
        if !(self.augment_ratio.is_finite() && self.augment_ratio >= 0.0) {
            return Err(Error::Config(format!("augment ratio {} must be ≥ 0", self.augment_ratio)));
        }
        Ok(())
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::lineart(expand_prompt_pattern(WING_POSE_PROMPTS).expect("valid pattern"))
    }
}

/// Generates an image that follows a condition map and a text prompt.
pub trait ImageConditioner: Send + Sync {
    fn generate(
        &self,
        condition: &Array2<f64>,
        kind: ConditionerKind,
        prompt: &str,
        strength: f64,
        seed: u64,
    ) -> Result<Array3<f64>>;
}

/// Deterministic stand-in for a conditioned generator. The object silhouette
/// comes from the condition map; background colour and texture come from
/// the prompt; the object's own colour is blended toward a prompt colour as
/// strength drops.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyConditioner;

const OBJECT_COLOR: [f64; 3] = [0.62, 0.36, 0.16];

fn object_mask(condition: &Array2<f64>, kind: ConditionerKind) -> Array2<bool> {
    match kind {
        ConditionerKind::Depth => condition.mapv(|d| d > 0.0),
        ConditionerKind::Lineart => {
            // exterior = edge-free pixels reachable from the border
            let (h, w) = condition.dim();
            let mut outside = Array2::from_elem((h, w), false);
            let mut stack: Vec<(usize, usize)> = (0..h)
                .flat_map(|i| [(i, 0), (i, w - 1)])
                .chain((0..w).flat_map(|j| [(0, j), (h - 1, j)]))
                .collect();
            while let Some((i, j)) = stack.pop() {
                if outside[[i, j]] || condition[[i, j]] > 0.0 {
                    continue;
                }
                outside[[i, j]] = true;
                if i > 0 {
                    stack.push((i - 1, j));
                }
                if i + 1 < h {
                    stack.push((i + 1, j));
                }
                if j > 0 {
                    stack.push((i, j - 1));
                }
                if j + 1 < w {
                    stack.push((i, j + 1));
                }
            }
            outside.mapv(|o| !o)
        }
    }
}

impl ImageConditioner for ToyConditioner {
    fn generate(
        &self,
        condition: &Array2<f64>,
        kind: ConditionerKind,
        prompt: &str,
        strength: f64,
        seed: u64,
    ) -> Result<Array3<f64>> {
        let mask = object_mask(condition, kind);
        if !mask.iter().any(|&m| m) {
            return Err(Error::Data("condition map contains no object".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(prompt.as_bytes()));
        let mut palette = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes()));
        let bg: [f64; 3] = std::array::from_fn(|_| palette.random_range(0.3..0.95));
        let tint: [f64; 3] = std::array::from_fn(|_| palette.random_range(0.1..0.9));
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let (h, w) = condition.dim();
        Ok(Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            if mask[[i, j]] {
                let shade = match kind {
                    ConditionerKind::Depth => 0.6 + 0.4 * condition[[i, j]],
                    ConditionerKind::Lineart => 1.0 - 0.5 * condition[[i, j]],
                };
                (strength * OBJECT_COLOR[c] + (1.0 - strength) * tint[c]) * shade
            } else {
                let texture: f64 = waves
                    .iter()
                    .map(|(fx, fy, ph)| (fx * j as f64 + fy * i as f64 + ph).sin())
                    .sum::<f64>()
                    * 0.03;
                (bg[c] + texture).clamp(0.0, 1.0)
            }
        }))
    }
}

#[derive(Debug, Clone)]
pub struct AugmentReport {
    pub manifest: Manifest,
    pub added: usize,
    /// `(parent id, reason)` for every augmentation that failed.
    pub skipped: Vec<(String, String)>,
}

/// Adds augmented children of the rendered records and saves the extended
/// manifest. Existing records are never modified.
pub fn augment(
    manifest: &Manifest,
    policy: &AugmentationPolicy,
    conditioner: &dyn ImageConditioner,
) -> Result<AugmentReport> {
    policy.validate()?;
    let mut parents: Vec<&SampleRecord> = manifest.rendered().collect();
    parents.sort_by(|a, b| a.id.cmp(&b.id));
    if policy.conditioner_kind == ConditionerKind::Depth {
        if let Some(r) = parents.iter().find(|r| r.depth_path.is_none()) {
            return Err(Error::Data(format!("record `{}` has no depth map", r.id)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let total = (policy.augment_ratio * parents.len() as f64).round() as usize;
    let mut counts = vec![total / parents.len().max(1); parents.len()];
    let mut order: Vec<usize> = (0..parents.len()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(total % parents.len().max(1)) {
        counts[i] += 1;
    }

    let mut out = manifest.clone();
    let mut skipped = Vec::new();
    let mut added = 0;
    for (parent, &count) in parents.iter().zip(&counts) {
        for k in 0..count {
            let prompt = policy.prompt_pool[rng.random_range(0..policy.prompt_pool.len())].clone();
            let seed: u64 = rng.random();
            let id = format!("{}-a{k}", parent.id);
            if manifest.get(&id).is_some() {
                return Err(Error::Data(format!("record `{id}` already exists; augment a fresh render")));
            }
            match augment_one(manifest, parent, &id, &prompt, seed, policy, conditioner) {
                Ok(record) => {
                    out.records.push(record);
                    added += 1;
                }
                Err(e) => {
                    tracing::warn!(parent = %parent.id, error = %e, "augmentation skipped");
                    skipped.push((parent.id.clone(), e.to_string()));
                }
            }
        }
    }
    if !skipped.is_empty() {
        tracing::warn!(skipped = skipped.len(), added, "augmentation finished with failures");
    }
    out.save()?;
    Ok(AugmentReport {
        manifest: out,
        added,
        skipped,
    })
}

fn augment_one(
    manifest: &Manifest,
    parent: &SampleRecord,
    id: &str,
    prompt: &str,
    seed: u64,
    policy: &AugmentationPolicy,
    conditioner: &dyn ImageConditioner,
) -> Result<SampleRecord> {
    let (condition, depth_path, lineart_path) = match policy.conditioner_kind {
        ConditionerKind::Depth => {
            let p = parent.depth_path.clone().expect("checked by caller");
            (load_gray(&manifest.resolve(&p))?, Some(p), None)
        }
        ConditionerKind::Lineart => {
            let map = match &parent.lineart_path {
                Some(p) => load_gray(&manifest.resolve(p))?,
                None => lineart_extract(&load_rgb(&manifest.resolve(&parent.rgb_path))?, &policy.lineart),
            };
            let p = PathBuf::from("lineart").join(format!("{id}.png"));
            save_gray(&manifest.resolve(&p), &map)?;
            // reload so the map used matches the stored 8-bit file
            (load_gray(&manifest.resolve(&p))?, None, Some(p))
        }
    };
    let rgb = conditioner.generate(&condition, policy.conditioner_kind, prompt, policy.guidance_strength, seed)?;
    let rgb_path = PathBuf::from("images").join(format!("{id}.png"));
    save_rgb(&manifest.resolve(&rgb_path), &rgb)?;
    let slots: String = manifest
        .attributes
        .specs()
        .iter()
        .filter(|s| parent.attributes.get(&s.name).is_some())
        .map(|s| format!("<attr:{}> ", s.name))
        .collect();
    Ok(SampleRecord {
        id: id.to_string(),
        rgb_path,
        depth_path,
        lineart_path,
        attributes: parent.attributes.clone(),
        prompt_template: format!("{slots}{prompt}"),
        source: SampleSource::Augmented,
        parent_id: Some(parent.id.clone()),
    })
}
