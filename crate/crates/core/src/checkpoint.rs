//! Single-file JSON checkpoint holding everything a generator needs on top
//! of the base model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribute::AttributeRegistry;
use crate::backbone::toy::TOY_IDENTIFIER;
use crate::backbone::{DiffusionBackbone, LoraState, ScheduleMeta, ToyBackbone, ToyConfig, TrainableBackbone};
use crate::conditioning::IdentityToken;
use crate::error::{Error, Result};
use crate::words::WordModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub id: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub backbone: BackboneDescriptor,
    pub schedule: ScheduleMeta,
    pub attributes: AttributeRegistry,
    pub identity: IdentityToken,
    pub words: Vec<WordModel>,
    pub lora: LoraState,
}

impl Checkpoint {
    pub fn new<B: DiffusionBackbone + ?Sized>(
        backbone: &B,
        attributes: AttributeRegistry,
        identity: IdentityToken,
        words: Vec<WordModel>,
        lora: LoraState,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            backbone: BackboneDescriptor {
                id: backbone.identifier(),
                config: backbone.config_json(),
            },
            schedule: backbone.schedule().meta().clone(),
            attributes,
            identity,
            words,
            lora,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported checkpoint version {v}"))),
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Checkpoint(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    /// Internal consistency: every word's attributes are registered and
    /// every registered attribute has a word.
    pub fn validate(&self) -> Result<()> {
        for w in &self.words {
            for spec in w.attributes() {
                match self.attributes.get(&spec.name) {
                    Some(reg) if reg == spec => {}
                    _ => {
                        return Err(Error::Checkpoint(format!(
                            "word `{}` uses attribute `{}` that does not match the registry",
                            w.slot(),
                            spec.name
                        )))
                    }
                }
            }
            if !w.is_finite() {
                return Err(Error::Checkpoint(format!("word `{}` has non-finite weights", w.slot())));
            }
        }
        for spec in self.attributes.specs() {
            if !self.words.iter().any(|w| w.attributes().iter().any(|a| a.name == spec.name)) {
                return Err(Error::Checkpoint(format!("attribute `{}` has no word model", spec.name)));
            }
        }
        Ok(())
    }

    /// Rebuilds the toy backbone with this checkpoint's adapters attached.
    pub fn toy_backbone(&self) -> Result<ToyBackbone> {
        if self.backbone.id != TOY_IDENTIFIER {
            return Err(Error::Checkpoint(format!(
                "backbone `{}` is not the toy backbone",
                self.backbone.id
            )));
        }
        let config: ToyConfig = serde_json::from_value(self.backbone.config.clone())?;
        let mut backbone = ToyBackbone::new(config)?;
        if backbone.schedule().meta() != &self.schedule {
            return Err(Error::Checkpoint("schedule metadata does not match the backbone".into()));
        }
        backbone.load_lora(&self.lora)?;
        self.identity.validate(&backbone)?;
        for w in &self.words {
            if w.output_dim() != backbone.embedding_width() {
                return Err(Error::Checkpoint(format!(
                    "word `{}` emits {} values, backbone width is {}",
                    w.slot(),
                    w.output_dim(),
                    backbone.embedding_width()
                )));
            }
        }
        Ok(backbone)
    }

    pub fn lora_rank(&self) -> Option<usize> {
        self.lora.layers.values().next().map(|f| f.rank())
    }

    pub fn word_param_count(&self) -> usize {
        self.words.iter().map(WordModel::param_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::AttributeSpec;
    use crate::training::{ModelConfig, TrainState};

    fn checkpoint() -> Checkpoint {
        let reg = AttributeRegistry::new(vec![AttributeSpec::new("pose", 0.0, 90.0).unwrap()]).unwrap();
        let mut state = TrainState::new(ToyBackbone::new(ToyConfig::default()).unwrap(), reg, &ModelConfig::default()).unwrap();
        for (_, f) in state.backbone.lora_factors_mut() {
            f.b.fill(0.013);
        }
        state.identity.embedding[0] = 1.0 / 3.0;
        state.to_checkpoint()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let c = checkpoint();
        let text = c.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
        let bb = back.toy_backbone().unwrap();
        assert_eq!(bb.lora_state().layers, c.lora.layers);
    }

    #[test]
    fn rejects_bad_files() {
        let c = checkpoint();
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        v["version"] = 99.into();
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::load(Path::new("/nonexistent/ckpt.json")).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.json");
        std::fs::write(&p, "not json").unwrap();
        assert!(Checkpoint::load(&p).is_err());

        let mut other = c.clone();
        other.backbone.id = "sd-2.1".into();
        assert!(other.toy_backbone().is_err());
        let mut orphan = c;
        orphan.words.clear();
        assert!(orphan.validate().is_err());
    }

    #[test]
    fn save_load() {
        let c = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/ckpt.json");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }
}
