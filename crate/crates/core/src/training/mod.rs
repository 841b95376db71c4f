//! Two-stage fine-tuning. Stage 1 learns the identity token together with
//! the adapters from identity-only prompts. Stage 2 freezes the identity
//! token and learns the adapters and attribute words from attribute prompts.
//! A joint single-stage trainer is kept for ablations.

pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, AdamWConfig};

use crate::attribute::{AttributeRegistry, AttributeValue};
use crate::backbone::{add_noise, gaussian_noise, LoraConfig, LoraGrads, PredictionKind, TrainableBackbone};
use crate::checkpoint::Checkpoint;
use crate::conditioning::{prepare_input, IdentityToken, SlotSource, DEFAULT_IDENTITY_TOKEN};
use crate::data::io::{load_rgb, pixels_to_sample};
use crate::data::{validate_manifest, Manifest, SampleSource};
use crate::encoding::PositionalEncodingConfig;
use crate::error::{Error, Result};
use crate::mapper::init_mapper;
use crate::template::PromptTemplate;
use crate::words::{DiscreteWordTable, WordGrads, WordModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub learning_rate_lora: f64,
    pub learning_rate_embedding: f64,
    pub learning_rate_mapper: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            steps: 500,
            learning_rate_lora: 1e-2,
            learning_rate_embedding: 1e-2,
            learning_rate_mapper: 0.0,
            batch_size: 4,
            seed: 1,
        }
    }

    pub fn stage2() -> Self {
        Self {
            steps: 1500,
            learning_rate_lora: 1e-2,
            learning_rate_embedding: 0.0,
            learning_rate_mapper: 1e-2,
            batch_size: 4,
            seed: 2,
        }
    }

    /// Single-stage baseline with the same total step count: stage-2 rates
    /// and batching plus the stage-1 embedding rate.
    pub fn merged(stage1: &StageConfig, stage2: &StageConfig) -> Self {
        Self {
            steps: stage1.steps + stage2.steps,
            learning_rate_embedding: stage1.learning_rate_embedding,
            ..stage2.clone()
        }
    }

    /// Rates may be zero, which freezes the corresponding group.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        for (name, lr) in [
            ("learning_rate_lora", self.learning_rate_lora),
            ("learning_rate_embedding", self.learning_rate_embedding),
            ("learning_rate_mapper", self.learning_rate_mapper),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} = {lr} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Stage {
    /// Logged as 0.
    Joint,
    One,
    Two,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::Joint => 0,
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Stage::Joint),
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(format!("unknown stage {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    /// Unix milliseconds.
    pub timestamp: u64,
}

/// Mean squared elementwise difference.
pub fn compute_loss(prediction: &Array3<f64>, target: &Array3<f64>) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape().to_vec(),
            actual: prediction.shape().to_vec(),
        });
    }
    let sum = Zip::from(prediction)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t));
    Ok(sum / prediction.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordKind {
    #[default]
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WordConfig {
    pub kind: WordKind,
    pub positional_encoding: PositionalEncodingConfig,
    /// Defaults to the backbone embedding width.
    pub hidden_dim: Option<usize>,
    pub seed: u64,
    /// Word whose embedding initializes the output bias.
    pub category_word: Option<String>,
    /// Bin count for discrete tables; defaults to the attribute grid size.
    pub bins: Option<usize>,
}

impl Default for WordConfig {
    fn default() -> Self {
        Self {
            kind: WordKind::Continuous,
            positional_encoding: PositionalEncodingConfig::default(),
            hidden_dim: None,
            seed: 0,
            category_word: None,
            bins: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lora: LoraConfig,
    pub identity_token: String,
    pub words: WordConfig,
    pub optimizer: AdamWConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lora: LoraConfig::default(),
            identity_token: DEFAULT_IDENTITY_TOKEN.into(),
            words: WordConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

/// A decoded training record.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    /// Sample-space image in `[-1, 1]`.
    pub sample: Array3<f64>,
    pub template: PromptTemplate,
    pub values: AttributeValue,
    pub source: SampleSource,
}

/// Validates the manifest and decodes every image. Fails before any
/// optimization, listing all unreadable files at once.
pub fn load_training_data(manifest: &Manifest) -> Result<Vec<TrainItem>> {
    if manifest.records.is_empty() {
        return Err(Error::Data("manifest has no records".into()));
    }
    let violations = validate_manifest(manifest);
    let missing: Vec<PathBuf> = manifest
        .records
        .iter()
        .map(|r| manifest.resolve(&r.rgb_path))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnreadableFiles(missing));
    }
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Data(format!("invalid manifest: {}", list.join("; "))));
    }
    let names = manifest.slot_names();
    let mut items = Vec::with_capacity(manifest.records.len());
    let mut unreadable = Vec::new();
    for r in &manifest.records {
        let path = manifest.resolve(&r.rgb_path);
        match load_rgb(&path) {
            Ok(px) => items.push(TrainItem {
                id: r.id.clone(),
                sample: pixels_to_sample(&px),
                template: PromptTemplate::parse(&r.prompt_template, &names)?,
                values: manifest.attributes.resolve(&r.attributes)?,
                source: r.source,
            }),
            Err(_) => unreadable.push(path),
        }
    }
    if !unreadable.is_empty() {
        return Err(Error::UnreadableFiles(unreadable));
    }
    Ok(items)
}

/// Stage-1 view of the data: rendered records with attribute slots removed.
pub fn identity_items(items: &[TrainItem]) -> Result<Vec<TrainItem>> {
    items
        .iter()
        .filter(|i| i.source == SampleSource::Rendered)
        .map(|i| {
            Ok(TrainItem {
                template: i.template.without_attrs()?,
                values: AttributeValue::new(),
                ..i.clone()
            })
        })
        .collect()
}

/// Gradients of the batch loss for every trainable group.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub lora: LoraGrads,
    pub identity: Array1<f64>,
    pub words: Vec<WordGrads>,
}

/// Which groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Trainable {
    lora: bool,
    identity: bool,
    words: bool,
}

pub struct TrainState<B: TrainableBackbone> {
    pub backbone: B,
    pub registry: AttributeRegistry,
    pub identity: IdentityToken,
    pub words: Vec<WordModel>,
    pub lora_config: LoraConfig,
    pub optimizer: AdamW,
    pub step: usize,
    pub stage: Stage,
}

impl<B: TrainableBackbone> TrainState<B> {
    /// Attaches fresh adapters, initializes the identity token from the
    /// backbone embedding of its string, and builds one word per attribute.
    pub fn new(mut backbone: B, registry: AttributeRegistry, config: &ModelConfig) -> Result<Self> {
        backbone.attach_lora(&config.lora)?;
        let identity = IdentityToken::new(&backbone, &config.identity_token)?;
        let width = backbone.embedding_width();
        let bias = match &config.words.category_word {
            Some(word) => {
                let ids = backbone.tokenize(word);
                if ids.len() != 1 {
                    return Err(Error::Config(format!("category word `{word}` must be one token")));
                }
                Some(backbone.embed(&ids)?.row(0).to_vec())
            }
            None => None,
        };
        let words = registry
            .specs()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let seed = config.words.seed.wrapping_add(i as u64);
                Ok(match config.words.kind {
                    WordKind::Continuous => WordModel::Continuous(init_mapper(
                        std::slice::from_ref(spec),
                        config.words.positional_encoding,
                        config.words.hidden_dim.unwrap_or(width),
                        width,
                        seed,
                        bias.as_deref(),
                    )?),
                    WordKind::Discrete => WordModel::Discrete(DiscreteWordTable::new(
                        spec,
                        config.words.bins.unwrap_or(spec.default_grid_size),
                        width,
                        seed,
                        bias.as_deref(),
                    )?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone,
            registry,
            identity,
            words,
            lora_config: config.lora.clone(),
            optimizer: AdamW::new(config.optimizer),
            step: 0,
            stage: Stage::One,
        })
    }

    /// Switches stage and clears optimizer moments.
    pub fn enter_stage(&mut self, stage: Stage) {
        self.stage = stage;
        self.optimizer.reset();
    }

    /// Batch loss and gradients. Each item draws its timestep uniformly from
    /// `1..=T` and its noise from `rng`.
    pub fn compute_gradients(&self, batch: &[&TrainItem], rng: &mut ChaCha8Rng) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let schedule = self.backbone.schedule();
        let mut grads = Gradients {
            lora: LoraGrads::default(),
            identity: Array1::zeros(self.identity.embedding.len()),
            words: self.words.iter().map(WordGrads::zeros_like).collect(),
        };
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for item in batch {
            let t = rng.random_range(1..=schedule.timesteps());
            let noise = gaussian_noise(self.backbone.sample_shape(), rng);
            let noised = add_noise(schedule, &item.sample, &noise, t)?;
            let input = prepare_input(&self.backbone, &item.template, Some(&self.identity), &item.values, &self.words)?;
            let (cond, etape) = self.backbone.encode_train(&input.embeddings)?;
            let (pred, dtape) = self.backbone.denoise_train(&noised, t, &cond)?;
            let target = match self.backbone.prediction_kind() {
                PredictionKind::Sample => &item.sample,
                PredictionKind::Noise => &noise,
            };
            let loss = compute_loss(&pred, target)?;
            if !loss.is_finite() {
                return Err(Error::Precondition(format!("non-finite loss on `{}`", item.id)));
            }
            total += loss;
            let k = 2.0 * scale / pred.len() as f64;
            let d_pred = Zip::from(&pred).and(target).map_collect(|&p, &y| k * (p - y));
            let (d_cond, lg) = self.backbone.denoise_backward(&dtape, &d_pred);
            grads.lora.merge(lg);
            let (d_input, lg) = self.backbone.encode_backward(&etape, &d_cond);
            grads.lora.merge(lg);
            for slot in &input.slots {
                let row = d_input.row(slot.position).to_owned();
                match slot.source {
                    SlotSource::Identity => grads.identity += &row,
                    SlotSource::Word(w) => {
                        let trace = slot.trace.as_ref().expect("word slots carry a trace");
                        grads.words[w].add_assign(&self.words[w].backward(trace, &row));
                    }
                }
            }
        }
        Ok((total * scale, grads))
    }

    fn apply(&mut self, grads: &Gradients, cfg: &StageConfig, which: Trainable) {
        if which.lora {
            for (name, factors) in self.backbone.lora_factors_mut() {
                if let Some(g) = grads.lora.layers.get(name) {
                    let (a, b) = (
                        factors.a.as_slice_mut().expect("contiguous"),
                        g.a.as_slice().expect("contiguous"),
                    );
                    self.optimizer.update(&format!("lora/{name}/a"), a, b, cfg.learning_rate_lora, true);
                    let (a, b) = (
                        factors.b.as_slice_mut().expect("contiguous"),
                        g.b.as_slice().expect("contiguous"),
                    );
                    self.optimizer.update(&format!("lora/{name}/b"), a, b, cfg.learning_rate_lora, true);
                }
            }
        }
        if which.identity {
            self.optimizer.update(
                "identity",
                self.identity.embedding.as_slice_mut().expect("contiguous"),
                grads.identity.as_slice().expect("contiguous"),
                cfg.learning_rate_embedding,
                false,
            );
        }
        if which.words {
            for (w, (model, g)) in self.words.iter_mut().zip(&grads.words).enumerate() {
                for (k, (p, g)) in model.param_slices_mut().into_iter().zip(g.slices()).enumerate() {
                    self.optimizer
                        .update(&format!("word/{w}/{k}"), p, g, cfg.learning_rate_mapper, false);
                }
            }
        }
    }

    fn check_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::StageViolation(format!(
                "state is in stage {}, step requires stage {}",
                u8::from(self.stage),
                u8::from(stage)
            )));
        }
        Ok(())
    }

    /// Identity-only step: updates adapters and the identity embedding.
    pub fn stage1_step(&mut self, batch: &[&TrainItem], cfg: &StageConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.check_stage(Stage::One)?;
        if let Some(item) = batch.iter().find(|i| i.template.has_attrs() || !i.template.has_obj()) {
            return Err(Error::StageViolation(format!(
                "stage 1 needs identity-only templates, `{}` has `{}`",
                item.id,
                item.template.raw()
            )));
        }
        let (loss, grads) = self.compute_gradients(batch, rng)?;
        self.apply(&grads, cfg, Trainable { lora: true, identity: true, words: false });
        self.step += 1;
        Ok(loss)
    }

    /// Attribute step: updates adapters and word models. The identity
    /// embedding is never written.
    pub fn stage2_step(&mut self, batch: &[&TrainItem], cfg: &StageConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.check_stage(Stage::Two)?;
        self.check_attribute_batch(batch)?;
        let (loss, grads) = self.compute_gradients(batch, rng)?;
        self.apply(&grads, cfg, Trainable { lora: true, identity: false, words: true });
        self.step += 1;
        Ok(loss)
    }

    /// Single-stage step that updates every group at once.
    pub fn joint_step(&mut self, batch: &[&TrainItem], cfg: &StageConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.check_stage(Stage::Joint)?;
        self.check_attribute_batch(batch)?;
        let (loss, grads) = self.compute_gradients(batch, rng)?;
        self.apply(&grads, cfg, Trainable { lora: true, identity: true, words: true });
        self.step += 1;
        Ok(loss)
    }

    fn check_attribute_batch(&self, batch: &[&TrainItem]) -> Result<()> {
        for item in batch {
            if !item.template.has_attrs() {
                return Err(Error::Data(format!("`{}` has no attribute slots", item.id)));
            }
            for name in item.template.attr_names() {
                let word = self
                    .words
                    .iter()
                    .find(|w| w.slot() == name)
                    .ok_or_else(|| Error::UnknownAttribute(name.to_string()))?;
                for spec in word.attributes() {
                    if item.values.get(&spec.name).is_none() {
                        return Err(Error::Data(format!(
                            "`{}` lacks a value for attribute `{}`",
                            item.id, spec.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut lora = self.backbone.lora_state();
        lora.config = Some(self.lora_config.clone());
        Checkpoint::new(
            &self.backbone,
            self.registry.clone(),
            self.identity.clone(),
            self.words.clone(),
            lora,
        )
    }
}

/// Seeded epoch-wise shuffling over item indices.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Receives one record per optimization step.
pub trait LogSink {
    fn record(&mut self, record: &LogRecord) -> Result<()>;
}

impl LogSink for Vec<LogRecord> {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// JSON-lines log file.
pub struct JsonlLog {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
    pub records: Vec<LogRecord>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: std::io::BufWriter::new(file),
            records: Vec::new(),
        })
    }

    pub fn finish(mut self) -> Result<Vec<LogRecord>> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.records)
    }
}

impl LogSink for JsonlLog {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.records.push(record.clone());
        Ok(())
    }
}

/// Runs `cfg.steps` steps of `stage` over `items`.
pub fn run_stage<B: TrainableBackbone>(
    state: &mut TrainState<B>,
    stage: Stage,
    items: &[TrainItem],
    cfg: &StageConfig,
    log: &mut dyn LogSink,
) -> Result<()> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data(format!("no records usable in stage {}", u8::from(stage))));
    }
    state.enter_stage(stage);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(items.len());
    for _ in 0..cfg.steps {
        let batch: Vec<&TrainItem> = sampler.next(cfg.batch_size, &mut rng).into_iter().map(|i| &items[i]).collect();
        let loss = match stage {
            Stage::One => state.stage1_step(&batch, cfg, &mut rng)?,
            Stage::Two => state.stage2_step(&batch, cfg, &mut rng)?,
            Stage::Joint => state.joint_step(&batch, cfg, &mut rng)?,
        };
        log.record(&LogRecord {
            step: state.step,
            stage,
            loss,
            timestamp: now_ms(),
        })?;
        if state.step % 100 == 0 {
            tracing::debug!(step = state.step, stage = u8::from(stage), loss, "training");
        }
    }
    Ok(())
}

/// Full two-stage run: identity first, then attributes.
pub fn train_two_stage<B: TrainableBackbone>(
    manifest: &Manifest,
    stage1: &StageConfig,
    stage2: &StageConfig,
    backbone: B,
    model: &ModelConfig,
    log: &mut dyn LogSink,
) -> Result<TrainState<B>> {
    stage1.validate()?;
    stage2.validate()?;
    let items = load_training_data(manifest)?;
    let mut state = TrainState::new(backbone, manifest.attributes.clone(), model)?;
    run_stage(&mut state, Stage::One, &identity_items(&items)?, stage1, log)?;
    run_stage(&mut state, Stage::Two, &items, stage2, log)?;
    Ok(state)
}

/// Single-stage baseline over the attribute prompts of every record.
pub fn train_joint<B: TrainableBackbone>(
    manifest: &Manifest,
    cfg: &StageConfig,
    backbone: B,
    model: &ModelConfig,
    log: &mut dyn LogSink,
) -> Result<TrainState<B>> {
    let items = load_training_data(manifest)?;
    let mut state = TrainState::new(backbone, manifest.attributes.clone(), model)?;
    run_stage(&mut state, Stage::Joint, &items, cfg, log)?;
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Two-stage training that writes the checkpoint to `out` and the step log
/// to `log_path` as JSON lines.
pub fn train<B: TrainableBackbone>(
    manifest: &Manifest,
    stage1: &StageConfig,
    stage2: &StageConfig,
    backbone: B,
    model: &ModelConfig,
    out: &Path,
    log_path: &Path,
) -> Result<TrainOutcome> {
    let mut log = JsonlLog::create(log_path)?;
    let state = train_two_stage(manifest, stage1, stage2, backbone, model, &mut log)?;
    let records = log.finish()?;
    let checkpoint = state.to_checkpoint();
    checkpoint.save(out)?;
    Ok(TrainOutcome {
        checkpoint,
        log: records,
    })
}

/// Moving average with the given window, one value per full window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .windows(window.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}
