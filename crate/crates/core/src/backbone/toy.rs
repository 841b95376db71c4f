//! A desk-scale denoiser in pixel space.
//!
//! Text side: token + position embeddings and one self-attention block.
//! Image side: a fixed query attention-pools the conditioning sequence into
//! one vector that scales and shifts the channels of a per-pixel network fed
//! by 3×3 patches of the noised sample and pixel coordinates. The head
//! predicts the clean sample as `α_t·x_t + σ_t·F(x_t, t, c)`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linear::{Linear, LoraFactors};
use super::lora::{LoraConfig, LoraGrads, LoraState};
use super::schedule::NoiseSchedule;
use super::tokenizer::ToyTokenizer;
use super::{DiffusionBackbone, PredictionKind, SpecialTokens, TokenId, TrainableBackbone};
use crate::error::{Error, Result};

pub const TOY_IDENTIFIER: &str = "toy-v1";

const PATCH_FEATURES: usize = 27;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub width: usize,
    pub max_len: usize,
    pub channels: usize,
    pub image_size: usize,
    pub time_features: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 1024,
            width: 16,
            max_len: 24,
            channels: 32,
            image_size: 32,
            time_features: 16,
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    config: ToyConfig,
    tokenizer: ToyTokenizer,
    schedule: NoiseSchedule,
    token_embedding: Array2<f64>,
    position_embedding: Array2<f64>,
    text_q: Linear,
    text_k: Linear,
    text_v: Linear,
    text_o: Linear,
    pool_query: Array1<f64>,
    pool_k: Linear,
    pool_v: Linear,
    pool_out: Linear,
    time_proj: Linear,
    conv_in: Linear,
    conv_mid: Linear,
    conv_out: Linear,
}

pub struct EncodeTape {
    x0: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    mixed: Array2<f64>,
}

pub struct DenoiseTape {
    t: usize,
    cond: Array2<f64>,
    values: Array2<f64>,
    weights: Array1<f64>,
    pooled: Array1<f64>,
    gamma: Array1<f64>,
    time_feats: Array1<f64>,
    patches: Array2<f64>,
    z1: Array2<f64>,
    u1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn dense(rng: &mut ChaCha8Rng, input: usize, output: usize, gain: f64) -> Linear {
    Linear::new(
        normal_matrix(rng, output, input, gain / (input as f64).sqrt()),
        Array1::zeros(output),
    )
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = v.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e / sum
}

/// Backward of a softmax given its output `p` and upstream gradient `dp`.
fn softmax_backward(p: ArrayView1<f64>, dp: ArrayView1<f64>) -> Array1<f64> {
    let dot = p.dot(&dp);
    Zip::from(p).and(dp).map_collect(|&pi, &di| pi * (di - dot))
}

impl ToyBackbone {
    pub fn new(config: ToyConfig) -> Result<Self> {
        if config.width == 0 || config.channels == 0 || config.max_len < 3 || config.image_size < 3 {
            return Err(Error::Config(format!("degenerate toy config {config:?}")));
        }
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        let tokenizer = ToyTokenizer::new(config.vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.width;
        let c = config.channels;

        let token_embedding = normal_matrix(&mut rng, config.vocab_size, d, 0.5);
        let position_embedding = normal_matrix(&mut rng, config.max_len, d, 0.1);
        let text_q = dense(&mut rng, d, d, 1.0);
        let text_k = dense(&mut rng, d, d, 1.0);
        let text_v = dense(&mut rng, d, d, 1.0);
        let text_o = dense(&mut rng, d, d, 0.5);
        let pool_query = Array1::from_shape_simple_fn(d, || {
            Normal::new(0.0, 1.0).expect("valid std").sample(&mut rng)
        });
        let pool_k = dense(&mut rng, d, d, 1.0);
        let pool_v = dense(&mut rng, d, d, 1.0);
        let pool_out = dense(&mut rng, d, 2 * c, 0.5);
        let time_proj = dense(&mut rng, config.time_features, c, 1.0);

        let mut conv_in = dense(&mut rng, PATCH_FEATURES + 2, c, 1.0);
        let coord = Normal::new(0.0, 3.0).expect("valid std");
        for o in 0..c {
            conv_in.weight[[o, PATCH_FEATURES]] = coord.sample(&mut rng);
            conv_in.weight[[o, PATCH_FEATURES + 1]] = coord.sample(&mut rng);
            conv_in.bias[o] = rng.random_range(-2.0..2.0);
        }
        let mut conv_mid = dense(&mut rng, c, c, 1.0);
        conv_mid.bias = Array1::from_shape_simple_fn(c, || {
            Normal::new(0.0, 0.1).expect("valid std").sample(&mut rng)
        });
        let conv_out = dense(&mut rng, c, 3, 1.0);

        Ok(Self {
            config,
            tokenizer,
            schedule,
            token_embedding,
            position_embedding,
            text_q,
            text_k,
            text_v,
            text_o,
            pool_query,
            pool_k,
            pool_v,
            pool_out,
            time_proj,
            conv_in,
            conv_mid,
            conv_out,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn token_embedding_table(&self) -> &Array2<f64> {
        &self.token_embedding
    }

    pub fn mean_token_norm(&self) -> f64 {
        let rows = self.token_embedding.nrows() as f64;
        self.token_embedding
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum::<f64>()
            / rows
    }

    fn layers(&self) -> [(&'static str, &Linear); 11] {
        [
            ("denoiser.conv_in", &self.conv_in),
            ("denoiser.conv_mid", &self.conv_mid),
            ("denoiser.conv_out", &self.conv_out),
            ("denoiser.pool_k", &self.pool_k),
            ("denoiser.pool_out", &self.pool_out),
            ("denoiser.pool_v", &self.pool_v),
            ("denoiser.time_proj", &self.time_proj),
            ("text.k", &self.text_k),
            ("text.o", &self.text_o),
            ("text.q", &self.text_q),
            ("text.v", &self.text_v),
        ]
    }

    fn layers_mut(&mut self) -> [(&'static str, &mut Linear); 11] {
        [
            ("denoiser.conv_in", &mut self.conv_in),
            ("denoiser.conv_mid", &mut self.conv_mid),
            ("denoiser.conv_out", &mut self.conv_out),
            ("denoiser.pool_k", &mut self.pool_k),
            ("denoiser.pool_out", &mut self.pool_out),
            ("denoiser.pool_v", &mut self.pool_v),
            ("denoiser.time_proj", &mut self.time_proj),
            ("text.k", &mut self.text_k),
            ("text.o", &mut self.text_o),
            ("text.q", &mut self.text_q),
            ("text.v", &mut self.text_v),
        ]
    }

    fn time_features(&self, t: usize) -> Array1<f64> {
        let n = self.config.time_features / 2;
        let x = t as f64 / self.config.timesteps as f64;
        let mut out = Array1::zeros(self.config.time_features);
        for k in 0..n {
            let freq = std::f64::consts::FRAC_PI_2 * 64f64.powf(k as f64 / (n.max(2) - 1) as f64);
            out[2 * k] = (freq * x).sin();
            out[2 * k + 1] = (freq * x).cos();
        }
        out
    }

    /// One row per pixel: the 3×3×3 zero-padded neighbourhood, then x and y
    /// coordinates in [-1, 1].
    fn patches(&self, sample: &Array3<f64>) -> Array2<f64> {
        let n = self.config.image_size;
        let mut p = Array2::zeros((n * n, PATCH_FEATURES + 2));
        for i in 0..n {
            for j in 0..n {
                let mut row = p.row_mut(i * n + j);
                let mut f = 0;
                for ch in 0..3 {
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let (y, x) = (i as i64 + di, j as i64 + dj);
                            if y >= 0 && x >= 0 && (y as usize) < n && (x as usize) < n {
                                row[f] = sample[[ch, y as usize, x as usize]];
                            }
                            f += 1;
                        }
                    }
                }
                row[PATCH_FEATURES] = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                row[PATCH_FEATURES + 1] = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            }
        }
        p
    }

    fn check_sequence(&self, seq: &Array2<f64>) -> Result<()> {
        if seq.ncols() != self.config.width || seq.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.max_len, self.config.width],
                actual: seq.shape().to_vec(),
            });
        }
        if seq.nrows() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: seq.nrows(),
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn check_sample(&self, sample: &Array3<f64>) -> Result<()> {
        let shape = self.sample_shape();
        if sample.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: sample.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn attn_scale(&self) -> f64 {
        1.0 / (self.config.width as f64).sqrt()
    }
}

impl DiffusionBackbone for ToyBackbone {
    fn identifier(&self) -> String {
        TOY_IDENTIFIER.to_string()
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    fn embedding_width(&self) -> usize {
        self.config.width
    }

    fn max_sequence_length(&self) -> usize {
        self.config.max_len
    }

    fn sample_shape(&self) -> [usize; 3] {
        [3, self.config.image_size, self.config.image_size]
    }

    fn special_tokens(&self) -> SpecialTokens {
        self.tokenizer.special_tokens()
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.tokenizer.tokenize(text)
    }

    fn embed(&self, ids: &[TokenId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.config.width));
        for (row, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::Precondition(format!("token id {id} outside vocabulary")));
            }
            out.row_mut(row).assign(&self.token_embedding.row(id));
        }
        Ok(out)
    }

    fn encode(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.encode_train(input).map(|(y, _)| y)
    }

    fn denoise(&self, sample: &Array3<f64>, t: usize, cond: &Array2<f64>) -> Result<Array3<f64>> {
        self.denoise_train(sample, t, cond).map(|(y, _)| y)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn prediction_kind(&self) -> PredictionKind {
        PredictionKind::Sample
    }
}

impl TrainableBackbone for ToyBackbone {
    type EncodeTape = EncodeTape;
    type DenoiseTape = DenoiseTape;

    fn encode_train(&self, input: &Array2<f64>) -> Result<(Array2<f64>, EncodeTape)> {
        self.check_sequence(input)?;
        let n = input.nrows();
        let x0 = input + &self.position_embedding.slice(s![..n, ..]);
        let q = self.text_q.forward(x0.view());
        let k = self.text_k.forward(x0.view());
        let v = self.text_v.forward(x0.view());
        let scores = q.dot(&k.t()) * self.attn_scale();
        let mut attn = Array2::zeros((n, n));
        for (i, row) in scores.rows().into_iter().enumerate() {
            attn.row_mut(i).assign(&softmax(row));
        }
        let mixed = attn.dot(&v);
        let y = &x0 + &self.text_o.forward(mixed.view());
        Ok((
            y,
            EncodeTape {
                x0,
                q,
                k,
                v,
                attn,
                mixed,
            },
        ))
    }

    fn encode_backward(&self, tape: &EncodeTape, d_cond: &Array2<f64>) -> (Array2<f64>, LoraGrads) {
        let mut grads = LoraGrads::default();
        let mut d_x0 = d_cond.clone();
        let (d_mixed, g) = self.text_o.backward(tape.mixed.view(), d_cond.view(), true);
        grads.insert("text.o", g);
        let d_mixed = d_mixed.expect("requested");
        let d_attn = d_mixed.dot(&tape.v.t());
        let d_v = tape.attn.t().dot(&d_mixed);
        let mut d_scores = Array2::zeros(d_attn.raw_dim());
        for i in 0..d_attn.nrows() {
            d_scores
                .row_mut(i)
                .assign(&softmax_backward(tape.attn.row(i), d_attn.row(i)));
        }
        d_scores *= self.attn_scale();
        let d_q = d_scores.dot(&tape.k);
        let d_k = d_scores.t().dot(&tape.q);
        for (name, layer, d) in [
            ("text.q", &self.text_q, d_q),
            ("text.k", &self.text_k, d_k),
            ("text.v", &self.text_v, d_v),
        ] {
            let (dx, g) = layer.backward(tape.x0.view(), d.view(), true);
            d_x0 += &dx.expect("requested");
            grads.insert(name, g);
        }
        (d_x0, grads)
    }

    fn denoise_train(
        &self,
        sample: &Array3<f64>,
        t: usize,
        cond: &Array2<f64>,
    ) -> Result<(Array3<f64>, DenoiseTape)> {
        self.check_sample(sample)?;
        self.check_sequence(cond)?;
        self.schedule.check(t)?;
        let c = self.config.channels;
        let n = self.config.image_size;

        let keys = self.pool_k.forward(cond.view());
        let values = self.pool_v.forward(cond.view());
        let weights = softmax((keys.dot(&self.pool_query) * self.attn_scale()).view());
        let pooled = values.t().dot(&weights);
        let modulation = self.pool_out.forward_vec(&pooled);
        let gamma = modulation.slice(s![..c]).to_owned();
        let beta = modulation.slice(s![c..]);

        let time_feats = self.time_features(t);
        let time_emb = self.time_proj.forward_vec(&time_feats);

        let patches = self.patches(sample);
        let z1 = self.conv_in.forward(patches.view());
        let scale = gamma.mapv(|g| 1.0 + g);
        let shift = &beta + &time_emb;
        let u1 = &z1 * &scale + &shift;
        let h1 = u1.mapv(silu);
        let z2 = self.conv_mid.forward(h1.view());
        let h2 = z2.mapv(silu);
        let f = self.conv_out.forward(h2.view());

        let (alpha, sigma) = (self.schedule.alpha(t), self.schedule.sigma(t));
        let out = Array3::from_shape_fn((3, n, n), |(ch, i, j)| {
            alpha * sample[[ch, i, j]] + sigma * f[[i * n + j, ch]]
        });
        Ok((
            out,
            DenoiseTape {
                t,
                cond: cond.clone(),
                values,
                weights,
                pooled,
                gamma,
                time_feats,
                patches,
                z1,
                u1,
                h1,
                z2,
                h2,
            },
        ))
    }

    fn denoise_backward(&self, tape: &DenoiseTape, d_pred: &Array3<f64>) -> (Array2<f64>, LoraGrads) {
        let mut grads = LoraGrads::default();
        let n = self.config.image_size;
        let sigma = self.schedule.sigma(tape.t);
        let d_f = Array2::from_shape_fn((n * n, 3), |(p, ch)| sigma * d_pred[[ch, p / n, p % n]]);

        let (d_h2, g) = self.conv_out.backward(tape.h2.view(), d_f.view(), true);
        grads.insert("denoiser.conv_out", g);
        let d_z2 = d_h2.expect("requested") * &tape.z2.mapv(silu_grad);
        let (d_h1, g) = self.conv_mid.backward(tape.h1.view(), d_z2.view(), true);
        grads.insert("denoiser.conv_mid", g);
        let d_u1 = d_h1.expect("requested") * &tape.u1.mapv(silu_grad);

        let d_gamma = (&d_u1 * &tape.z1).sum_axis(Axis(0));
        let d_shift = d_u1.sum_axis(Axis(0));
        if self.time_proj.lora.is_some() {
            let (_, g) = self.time_proj.backward(
                tape.time_feats.view().insert_axis(Axis(0)),
                d_shift.view().insert_axis(Axis(0)),
                false,
            );
            grads.insert("denoiser.time_proj", g);
        }
        if self.conv_in.lora.is_some() {
            let d_z1 = &d_u1 * &tape.gamma.mapv(|g| 1.0 + g);
            let (_, g) = self.conv_in.backward(tape.patches.view(), d_z1.view(), false);
            grads.insert("denoiser.conv_in", g);
        }

        let mut d_mod = Array1::zeros(2 * self.config.channels);
        d_mod.slice_mut(s![..self.config.channels]).assign(&d_gamma);
        d_mod.slice_mut(s![self.config.channels..]).assign(&d_shift);
        let (d_pooled, g) = self.pool_out.backward(
            tape.pooled.view().insert_axis(Axis(0)),
            d_mod.view().insert_axis(Axis(0)),
            true,
        );
        grads.insert("denoiser.pool_out", g);
        let d_pooled = d_pooled.expect("requested").index_axis_move(Axis(0), 0);

        let d_weights = tape.values.dot(&d_pooled);
        let d_values = tape
            .weights
            .view()
            .insert_axis(Axis(1))
            .dot(&d_pooled.view().insert_axis(Axis(0)));
        let d_scores = softmax_backward(tape.weights.view(), d_weights.view()) * self.attn_scale();
        let d_keys = d_scores
            .view()
            .insert_axis(Axis(1))
            .dot(&self.pool_query.view().insert_axis(Axis(0)));

        let (d_cond_k, g) = self.pool_k.backward(tape.cond.view(), d_keys.view(), true);
        grads.insert("denoiser.pool_k", g);
        let (d_cond_v, g) = self.pool_v.backward(tape.cond.view(), d_values.view(), true);
        grads.insert("denoiser.pool_v", g);
        (d_cond_k.expect("requested") + d_cond_v.expect("requested"), grads)
    }

    fn adaptable_layers(&self) -> Vec<(&'static str, usize, usize)> {
        self.layers()
            .iter()
            .map(|(name, l)| (*name, l.in_dim(), l.out_dim()))
            .collect()
    }

    fn attach_lora(&mut self, config: &LoraConfig) -> Result<()> {
        config.validate()?;
        let names: Vec<&'static str> = self.layers().iter().map(|(n, _)| *n).collect();
        let targets = config.resolve_targets(&names)?;
        for (name, layer) in self.layers_mut() {
            layer.lora = targets
                .contains(&name)
                .then(|| config.init_factors(name, layer.in_dim(), layer.out_dim()));
        }
        Ok(())
    }

    fn lora_state(&self) -> LoraState {
        let layers = self
            .layers()
            .iter()
            .filter_map(|(name, l)| l.lora.clone().map(|f| (name.to_string(), f)))
            .collect::<std::collections::BTreeMap<_, _>>();
        LoraState {
            config: None,
            layers,
        }
    }

    fn load_lora(&mut self, state: &LoraState) -> Result<()> {
        let known: Vec<&'static str> = self.layers().iter().map(|(n, _)| *n).collect();
        if let Some(bad) = state.layers.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("checkpoint adapts unknown layer `{bad}`")));
        }
        for (name, layer) in self.layers_mut() {
            layer.lora = match state.layers.get(name) {
                Some(f) => {
                    if f.a.ncols() != layer.in_dim() || f.b.nrows() != layer.out_dim() || f.a.nrows() != f.b.ncols() {
                        return Err(Error::ShapeMismatch {
                            expected: vec![layer.out_dim(), layer.in_dim()],
                            actual: vec![f.b.nrows(), f.a.ncols()],
                        });
                    }
                    Some(f.clone())
                }
                None => None,
            };
        }
        Ok(())
    }

    fn lora_factors_mut(&mut self) -> Vec<(&'static str, &mut LoraFactors)> {
        self.layers_mut()
            .into_iter()
            .filter_map(|(name, l)| l.lora.as_mut().map(|f| (name, f)))
            .collect()
    }

    fn merge_lora(&mut self) {
        for (_, layer) in self.layers_mut() {
            layer.merge_lora();
        }
    }

    fn detach_lora(&mut self) -> LoraState {
        let state = self.lora_state();
        for (_, layer) in self.layers_mut() {
            layer.lora = None;
        }
        state
    }

    fn full_param_count(&self) -> usize {
        self.token_embedding.len()
            + self.position_embedding.len()
            + self.pool_query.len()
            + self.layers().iter().map(|(_, l)| l.base_param_count()).sum::<usize>()
    }
}
