//! Datasets of rendered and augmented images annotated with attribute
//! values, plus the toy renderer, lineart extractor and augmentation.

pub mod augment;
pub mod io;
pub mod lineart;
pub mod render;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribute::{AttributeRegistry, AttributeSpec, AttributeValue};
use crate::error::{Error, Result};
use crate::template::PromptTemplate;

pub use augment::{
    augment, expand_prompt_pattern, AugmentReport, AugmentationPolicy, ConditionerKind, ImageConditioner,
    ToyConditioner, DOLLY_ZOOM_PROMPTS, ILLUMINATION_PROMPTS, LINEART_STRENGTH, WING_POSE_PROMPTS,
};
pub use lineart::{lineart_extract, LineartConfig};
pub use render::{render_toy, Binding, RenderOutput, ToyRenderer};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Rendered,
    Augmented,
}

/// One training image. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub rgb_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineart_path: Option<PathBuf>,
    pub attributes: AttributeValue,
    pub prompt_template: String,
    pub source: SampleSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

impl SampleRecord {
    pub fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.rgb_path)
            .chain(self.depth_path.as_ref())
            .chain(self.lineart_path.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub attributes: AttributeRegistry,
    pub records: Vec<SampleRecord>,
    /// Directory that record paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(attributes: AttributeRegistry, root: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            attributes,
            records: Vec::new(),
            root: root.into(),
        }
    }

    /// Accepts either a manifest file or the directory holding `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    /// Writes `manifest.json` into `root`, records sorted by id.
    pub fn save(&mut self) -> Result<PathBuf> {
        self.records.sort_by(|a, b| a.id.cmp(&b.id));
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let file = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn rendered(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.source == SampleSource::Rendered)
    }

    /// Attribute names usable as template slots.
    pub fn slot_names(&self) -> Vec<&str> {
        self.attributes.specs().iter().map(|s| s.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub record: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.record {
            Some(id) => write!(f, "{id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every problem found in the manifest; empty means valid.
pub fn validate_manifest(manifest: &Manifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |record: Option<&str>, message: String| {
        out.push(Violation {
            record: record.map(str::to_string),
            message,
        })
    };
    if manifest.version != MANIFEST_VERSION {
        push(None, format!("unsupported version {}", manifest.version));
    }
    let mut seen = HashSet::new();
    for r in &manifest.records {
        if !seen.insert(r.id.as_str()) {
            push(Some(&r.id), format!("duplicate id `{}`", r.id));
        }
    }
    let by_id: BTreeMap<&str, &SampleRecord> = manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let names = manifest.slot_names();
    for r in &manifest.records {
        let id = Some(r.id.as_str());
        for p in r.paths() {
            if !manifest.resolve(p).is_file() {
                push(id, format!("missing file {}", p.display()));
            }
        }
        for (name, &v) in &r.attributes.assignments {
            match manifest.attributes.get(name) {
                None => push(id, format!("unregistered attribute `{name}`")),
                Some(spec) => {
                    if let Err(e) = spec.resolve(v) {
                        push(id, e.to_string());
                    }
                }
            }
        }
        match PromptTemplate::parse(&r.prompt_template, &names) {
            Err(e) => push(id, format!("bad template: {e}")),
            Ok(t) => {
                for name in t.attr_names() {
                    if r.attributes.get(name).is_none() {
                        push(id, format!("template slot `{name}` has no value"));
                    }
                }
                if r.source == SampleSource::Rendered && !t.has_obj() {
                    push(id, "rendered record template lacks <obj>".into());
                }
            }
        }
        match (r.source, &r.parent_id) {
            (SampleSource::Rendered, Some(_)) => push(id, "rendered record has a parent".into()),
            (SampleSource::Augmented, None) => push(id, "augmented record has no parent".into()),
            (SampleSource::Augmented, Some(parent)) => match by_id.get(parent.as_str()) {
                None => push(id, format!("parent `{parent}` not found")),
                Some(p) if p.source != SampleSource::Rendered => {
                    push(id, format!("parent `{parent}` is not a rendered record"))
                }
                Some(p) if p.attributes != r.attributes => {
                    push(id, format!("attributes differ from parent `{parent}`"))
                }
                Some(_) => {}
            },
            (SampleSource::Rendered, None) => {}
        }
    }
    out
}

/// Evenly spaced values per attribute, combined as a Cartesian product with
/// the first attribute varying slowest. Periodic attributes omit the
/// endpoint that duplicates the start.
pub fn sample_attribute_grid(specs: &[AttributeSpec], counts: &[usize]) -> Result<Vec<AttributeValue>> {
    if specs.len() != counts.len() {
        return Err(Error::Config(format!(
            "{} attributes but {} grid sizes",
            specs.len(),
            counts.len()
        )));
    }
    let mut grid = vec![AttributeValue::new()];
    for (spec, &n) in specs.iter().zip(counts) {
        if n < 2 {
            return Err(Error::Config(format!("grid for `{}` needs at least 2 values", spec.name)));
        }
        let axis = grid_axis(spec, n);
        grid = grid
            .into_iter()
            .flat_map(|base| axis.iter().map(move |&v| base.clone().with(spec.name.clone(), v)))
            .collect();
    }
    Ok(grid)
}

/// The per-attribute values used by [`sample_attribute_grid`].
pub fn grid_axis(spec: &AttributeSpec, n: usize) -> Vec<f64> {
    let divisions = if spec.periodic { n } else { n - 1 };
    (0..n)
        .map(|i| {
            if !spec.periodic && i == n - 1 {
                spec.domain_max
            } else {
                spec.domain_min + spec.range() * i as f64 / divisions as f64
            }
        })
        .collect()
}

/// Grid using each spec's default size.
pub fn default_grid(specs: &[AttributeSpec]) -> Result<Vec<AttributeValue>> {
    let counts: Vec<usize> = specs.iter().map(|s| s.default_grid_size).collect();
    sample_attribute_grid(specs, &counts)
}
