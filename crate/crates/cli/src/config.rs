//! TOML configuration files.
//!
//! A run config (`--config`) has one optional table per subcommand, keyed by
//! the subcommand name with `-` replaced by `_`; keys are the long flag
//! names, also with `_`. Precedence, highest first: command-line flag,
//! `CW_*` environment variable (serve only), run config, built-in default.
//!
//! Stage, model and policy files are overlays: keys they set replace the
//! built-in default, everything else keeps it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cwords::attribute::{AttributeRegistry, AttributeSpec};
use cwords::data::{expand_prompt_pattern, AugmentationPolicy, Binding, ConditionerKind, ToyRenderer};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn read_toml(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<toml::Table>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with every key present in `table` replaced, recursively.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: toml::Table) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    merge(&mut value, serde_json::to_value(table)?);
    Ok(serde_json::from_value(value)?)
}

pub fn overlay_file<T: Clone + Serialize + DeserializeOwned>(base: &T, path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(base.clone()),
        Some(p) => overlay(base, read_toml(p)?).with_context(|| format!("in {}", p.display())),
    }
}

/// The run config's table for one subcommand, deserialized strictly.
pub fn section<T: DeserializeOwned + Default>(config: Option<&Path>, command: &str) -> Result<T> {
    let Some(path) = config else {
        return Ok(T::default());
    };
    let mut table = read_toml(path)?;
    match table.remove(command) {
        None => Ok(T::default()),
        Some(value) => value
            .try_into()
            .with_context(|| format!("section [{command}] of {}", path.display())),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeEntry {
    name: String,
    min: f64,
    max: f64,
    #[serde(default)]
    periodic: bool,
    grid_size: Option<usize>,
    binding: Option<Binding>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeFile {
    #[serde(rename = "attribute")]
    attributes: Vec<AttributeEntry>,
}

/// Attribute spec file: `[[attribute]]` tables with `name`, `min`, `max`
/// and optional `periodic`, `grid_size` and renderer `binding`
/// (`position`, `shading` or `dolly_zoom`). Without any binding the first
/// attribute drives the disc position.
pub fn load_attribute_file(path: &Path) -> Result<(AttributeRegistry, ToyRenderer)> {
    let file: AttributeFile = read_toml(path)?
        .try_into()
        .with_context(|| format!("attribute file {}", path.display()))?;
    if file.attributes.is_empty() {
        bail!("attribute file {} declares no attributes", path.display());
    }
    let mut specs = Vec::new();
    let mut bindings = BTreeMap::new();
    for entry in &file.attributes {
        let mut spec = AttributeSpec::new(entry.name.clone(), entry.min, entry.max)?.periodic(entry.periodic);
        if let Some(n) = entry.grid_size {
            spec = spec.with_grid_size(n);
        }
        spec.validate()?;
        specs.push(spec);
        if let Some(b) = entry.binding {
            bindings.insert(entry.name.clone(), b);
        }
    }
    if bindings.is_empty() {
        bindings.insert(specs[0].name.clone(), Binding::Position);
    }
    Ok((AttributeRegistry::new(specs)?, ToyRenderer::new(bindings)?))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    conditioner_kind: Option<String>,
    guidance_strength: Option<f64>,
    prompt_pool: Option<Vec<String>>,
    /// `{a, b}` groups expand to every combination.
    prompt_pattern: Option<String>,
    augment_ratio: Option<f64>,
    seed: Option<u64>,
    lineart_quantile: Option<f64>,
}

/// Augmentation policy file. The conditioner kind picks the base defaults
/// (lineart: strength 0.6, depth: strength 1.0); other keys override them.
pub fn load_policy(path: Option<&Path>) -> Result<AugmentationPolicy> {
    let file: PolicyFile = match path {
        None => PolicyFile::default(),
        Some(p) => read_toml(p)?
            .try_into()
            .with_context(|| format!("policy file {}", p.display()))?,
    };
    let mut policy = AugmentationPolicy::default();
    if let Some(kind) = &file.conditioner_kind {
        if kind.parse::<ConditionerKind>()? == ConditionerKind::Depth {
            policy = AugmentationPolicy::depth(policy.prompt_pool);
        }
    }
    if file.prompt_pool.is_some() && file.prompt_pattern.is_some() {
        bail!("give either prompt_pool or prompt_pattern, not both");
    }
    if let Some(pool) = file.prompt_pool {
        policy.prompt_pool = pool;
    }
    if let Some(pattern) = &file.prompt_pattern {
        policy.prompt_pool = expand_prompt_pattern(pattern)?;
    }
    if let Some(v) = file.guidance_strength {
        policy.guidance_strength = v;
    }
    if let Some(v) = file.augment_ratio {
        policy.augment_ratio = v;
    }
    if let Some(v) = file.seed {
        policy.seed = v;
    }
    if let Some(v) = file.lineart_quantile {
        policy.lineart.quantile = v;
    }
    Ok(policy)
}

/// Relative paths in a run config resolve against the config's directory.
pub fn anchor(config: Option<&Path>, path: Option<PathBuf>) -> Option<PathBuf> {
    let path = path?;
    match config.and_then(Path::parent) {
        Some(dir) if path.is_relative() => Some(dir.join(path)),
        _ => Some(path),
    }
}
