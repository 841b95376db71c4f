//! Image generation from a trained model: single images and attribute
//! sweeps with a fixed seed.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attribute::{AttributeRegistry, AttributeValue};
use crate::backbone::{sample_image, DiffusionBackbone, SamplerConfig, ToyBackbone};
use crate::checkpoint::Checkpoint;
use crate::conditioning::{assemble_conditioning, IdentityToken, NegativeMode};
use crate::data::io::sample_to_pixels;
use crate::error::{Error, Result};
use crate::template::PromptTemplate;
use crate::words::WordModel;

fn default_steps() -> usize {
    SamplerConfig::default().steps
}

fn default_scale() -> f64 {
    SamplerConfig::default().guidance_scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub template: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_scale")]
    pub guidance_scale: f64,
    #[serde(default)]
    pub negative_mode: NegativeMode,
}

impl GenerateRequest {
    pub fn new(template: impl Into<String>) -> Self {
        Self {
            template: template.into(),
            attributes: BTreeMap::new(),
            seed: 0,
            steps: default_steps(),
            guidance_scale: default_scale(),
            negative_mode: NegativeMode::default(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: f64) -> Self {
        self.attributes.insert(name.into(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub base: GenerateRequest,
    pub sweep_attribute: String,
    pub from: f64,
    pub to: f64,
    pub frames: usize,
}

/// One generated image, `[3, h, w]` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub pixels: Array3<f64>,
    /// Attribute values after periodic wrapping.
    pub attributes: AttributeValue,
}

/// `frames` values evenly spaced from `from` to `to`, both included.
pub fn sweep_values(from: f64, to: f64, frames: usize) -> Result<Vec<f64>> {
    if frames < 2 {
        return Err(Error::Precondition(format!("a sweep needs at least 2 frames, got {frames}")));
    }
    Ok((0..frames)
        .map(|i| {
            if i == frames - 1 {
                to
            } else {
                from + (to - from) * i as f64 / (frames - 1) as f64
            }
        })
        .collect())
}

/// An immutable trained model ready for sampling.
#[derive(Debug, Clone)]
pub struct Generator<B> {
    pub backbone: B,
    pub registry: AttributeRegistry,
    pub identity: IdentityToken,
    pub words: Vec<WordModel>,
}

impl Generator<ToyBackbone> {
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        Ok(Self {
            backbone: checkpoint.toy_backbone()?,
            registry: checkpoint.attributes.clone(),
            identity: checkpoint.identity.clone(),
            words: checkpoint.words.clone(),
        })
    }
}

impl<B: DiffusionBackbone> Generator<B> {
    pub fn slot_names(&self) -> Vec<&str> {
        self.words.iter().map(WordModel::slot).collect()
    }

    pub fn parse_template(&self, raw: &str) -> Result<PromptTemplate> {
        PromptTemplate::parse(raw, &self.slot_names())
    }

    /// Template and attribute checks shared by single images and sweeps.
    pub fn resolve(&self, request: &GenerateRequest) -> Result<(PromptTemplate, AttributeValue)> {
        let template = self.parse_template(&request.template)?;
        let values: AttributeValue = request.attributes.iter().map(|(k, &v)| (k.clone(), v)).collect();
        let values = self.registry.resolve(&values)?;
        for name in template.attr_names() {
            let word = self
                .words
                .iter()
                .find(|w| w.slot() == name)
                .ok_or_else(|| Error::UnknownAttribute(name.to_string()))?;
            for spec in word.attributes() {
                if values.get(&spec.name).is_none() {
                    return Err(Error::MissingAttribute(spec.name.clone()));
                }
            }
        }
        if request.steps == 0 {
            return Err(Error::Precondition("steps must be at least 1".into()));
        }
        if !(request.guidance_scale.is_finite() && request.guidance_scale >= 0.0) {
            return Err(Error::Precondition(format!(
                "guidance_scale {} must be finite and ≥ 0",
                request.guidance_scale
            )));
        }
        Ok((template, values))
    }

    fn render(&self, template: &PromptTemplate, values: AttributeValue, request: &GenerateRequest) -> Result<Generated> {
        let identity = Some(&self.identity);
        let bundle = assemble_conditioning(
            template,
            identity,
            &values,
            &self.words,
            &self.backbone,
            request.negative_mode,
        )?;
        let config = SamplerConfig {
            steps: request.steps,
            guidance_scale: request.guidance_scale,
        };
        let sample = sample_image(&self.backbone, &bundle.positive, &bundle.negative, &config, request.seed)?;
        Ok(Generated {
            pixels: sample_to_pixels(&sample),
            attributes: values,
        })
    }

    pub fn generate(&self, request: &GenerateRequest) -> Result<Generated> {
        let (template, values) = self.resolve(request)?;
        self.render(&template, values, request)
    }

    /// Same seed for every frame; only the swept attribute changes.
    pub fn sweep(&self, request: &SweepRequest) -> Result<Vec<Generated>> {
        let spec = self.registry.require(&request.sweep_attribute)?;
        spec.resolve(request.from)?;
        spec.resolve(request.to)?;
        let values = sweep_values(request.from, request.to, request.frames)?;
        let mut frames = Vec::with_capacity(values.len());
        for v in values {
            let mut req = request.base.clone();
            req.attributes.insert(request.sweep_attribute.clone(), v);
            frames.push(self.generate(&req)?);
        }
        Ok(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::AttributeSpec;
    use crate::backbone::ToyConfig;
    use crate::training::{ModelConfig, TrainState};

    fn generator() -> Generator<ToyBackbone> {
        let reg = AttributeRegistry::new(vec![AttributeSpec::new("pose", 0.0, 90.0).unwrap()]).unwrap();
        let state = TrainState::new(ToyBackbone::new(ToyConfig::default()).unwrap(), reg, &ModelConfig::default()).unwrap();
        Generator::from_checkpoint(&state.to_checkpoint()).unwrap()
    }

    #[test]
    fn sweep_spacing() {
        assert_eq!(sweep_values(0.0, 1.0, 5).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(sweep_values(3.0, 7.0, 2).unwrap(), vec![3.0, 7.0]);
        assert!(sweep_values(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn request_defaults_from_json() {
        let r: GenerateRequest = serde_json::from_str(r#"{"template":"a photo of <obj>"}"#).unwrap();
        assert_eq!(r.steps, 50);
        assert_eq!(r.guidance_scale, 7.5);
        assert_eq!(r.negative_mode, NegativeMode::Identity);
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        let g = generator();
        let req = GenerateRequest { steps: 3, ..GenerateRequest::new("a <attr:pose> photo of <obj>").with("pose", 30.0) };
        let a = g.generate(&req).unwrap();
        assert_eq!(a, g.generate(&req).unwrap());
        assert!(a.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let bad = req.clone().with("pose", -1.0);
        assert!(matches!(g.generate(&bad), Err(Error::DomainViolation { name, .. }) if name == "pose"));
        let unparsable = GenerateRequest { template: "a <attr:nope> photo".into(), ..req.clone() };
        assert!(matches!(g.generate(&unparsable), Err(Error::TemplateParse { position: 2, .. })));
        let missing = GenerateRequest { attributes: BTreeMap::new(), ..req };
        assert!(matches!(g.generate(&missing), Err(Error::MissingAttribute(_))));
    }

    #[test]
    fn sweep_frames_carry_values() {
        let g = generator();
        let req = SweepRequest {
            base: GenerateRequest { steps: 2, ..GenerateRequest::new("a <attr:pose> photo of <obj>") },
            sweep_attribute: "pose".into(),
            from: 0.0,
            to: 90.0,
            frames: 3,
        };
        let frames = g.sweep(&req).unwrap();
        let vals: Vec<f64> = frames.iter().map(|f| f.attributes.get("pose").unwrap()).collect();
        assert_eq!(vals, vec![0.0, 45.0, 90.0]);
        assert!(g.sweep(&SweepRequest { to: 100.0, ..req }).is_err());
    }
}
