//! The text-conditioned denoiser abstraction, low-rank adaptation, guidance
//! and sampling, plus a small deterministic backbone that trains on a CPU.

pub mod guidance;
pub mod linear;
pub mod lora;
pub mod sampler;
pub mod schedule;
pub mod tokenizer;
pub mod toy;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use guidance::cfg_predict;
pub use linear::{Linear, LoraFactors, LoraGrad};
pub use lora::{lora_param_count, LoraConfig, LoraGrads, LoraState};
pub use sampler::{gaussian_noise, sample_image, timestep_sequence, SamplerConfig, SAMPLE_MAX, SAMPLE_MIN};
pub use schedule::{add_noise, NoiseSchedule, ScheduleMeta};
pub use tokenizer::ToyTokenizer;
pub use toy::{ToyBackbone, ToyConfig};

use crate::error::Result;

pub type TokenId = u32;

/// What the denoiser head predicts from a noised sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    /// The clean sample.
    Sample,
    /// The noise that was added.
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    /// Id occupying attribute slots in the plain tokenized prompt.
    pub placeholder: TokenId,
}

/// Inference surface of a text-conditioned diffusion model.
pub trait DiffusionBackbone: Send + Sync {
    fn identifier(&self) -> String;
    /// Everything needed to rebuild the base model, stored in checkpoints.
    fn config_json(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
    fn embedding_width(&self) -> usize;
    fn max_sequence_length(&self) -> usize;
    /// `[channels, height, width]`
    fn sample_shape(&self) -> [usize; 3];
    fn special_tokens(&self) -> SpecialTokens;
    /// Word tokens only, without BOS/EOS/padding.
    fn tokenize(&self, text: &str) -> Vec<TokenId>;
    fn embed(&self, ids: &[TokenId]) -> Result<Array2<f64>>;
    /// Text-encoder forward from input embeddings to the conditioning sequence.
    fn encode(&self, input: &Array2<f64>) -> Result<Array2<f64>>;
    fn denoise(&self, sample: &Array3<f64>, t: usize, cond: &Array2<f64>) -> Result<Array3<f64>>;
    fn schedule(&self) -> &NoiseSchedule;
    fn prediction_kind(&self) -> PredictionKind;
}

/// A backbone the trainer can differentiate through and adapt with LoRA.
pub trait TrainableBackbone: DiffusionBackbone + Clone {
    type EncodeTape: Send;
    type DenoiseTape: Send;

    fn encode_train(&self, input: &Array2<f64>) -> Result<(Array2<f64>, Self::EncodeTape)>;
    /// Returns the gradient with respect to the input embeddings.
    fn encode_backward(&self, tape: &Self::EncodeTape, d_cond: &Array2<f64>) -> (Array2<f64>, LoraGrads);
    fn denoise_train(
        &self,
        sample: &Array3<f64>,
        t: usize,
        cond: &Array2<f64>,
    ) -> Result<(Array3<f64>, Self::DenoiseTape)>;
    /// Returns the gradient with respect to the conditioning sequence.
    fn denoise_backward(&self, tape: &Self::DenoiseTape, d_pred: &Array3<f64>) -> (Array2<f64>, LoraGrads);

    /// `(name, in, out)` of every layer LoRA may target.
    fn adaptable_layers(&self) -> Vec<(&'static str, usize, usize)>;
    fn attach_lora(&mut self, config: &LoraConfig) -> Result<()>;
    fn lora_state(&self) -> LoraState;
    fn load_lora(&mut self, state: &LoraState) -> Result<()>;
    fn lora_factors_mut(&mut self) -> Vec<(&'static str, &mut LoraFactors)>;
    /// Folds every adapter into its base weight and removes the adapters.
    fn merge_lora(&mut self);
    /// Removes adapters without merging.
    fn detach_lora(&mut self) -> LoraState;
    /// Parameters a full fine-tune would train.
    fn full_param_count(&self) -> usize;
    fn lora_param_count(&self) -> usize {
        self.lora_state().param_count()
    }
}

/// Attaches fresh adapters (B = 0) and returns the adapted handle.
pub fn attach_lora<B: TrainableBackbone>(mut backbone: B, config: &LoraConfig) -> Result<B> {
    backbone.attach_lora(config)?;
    Ok(backbone)
}
