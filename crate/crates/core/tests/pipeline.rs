//! End-to-end behaviour of the toy pipeline: training progress per stage,
//! the sampler on a trained backbone, and denoiser cost.

use std::time::Instant;

use cwords::attribute::{AttributeRegistry, AttributeSpec, AttributeValue};
use cwords::backbone::{gaussian_noise, DiffusionBackbone, ToyBackbone, ToyConfig};
use cwords::conditioning::{encode_text, NegativeMode};
use cwords::data::io::sample_to_pixels;
use cwords::data::render::estimate_position;
use cwords::data::{augment, default_grid, render_toy, AugmentationPolicy, SampleSource, ToyConditioner, ToyRenderer};
use cwords::eval::{interpolation_experiment, mean_spearman, InterpolationReport};
use cwords::inference::{GenerateRequest, Generator, SweepRequest};
use cwords::template::PromptTemplate;
use cwords::training::{
    identity_items, load_training_data, run_stage, smoothed, ModelConfig, Stage, StageConfig, TrainItem,
    TrainState,
};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> ToyBackbone {
    ToyBackbone::new(ToyConfig::default()).unwrap()
}

fn registry() -> AttributeRegistry {
    AttributeRegistry::new(vec![AttributeSpec::new("pose", 0.0, 90.0).unwrap()]).unwrap()
}

fn recovery(state: &TrainState<ToyBackbone>) -> InterpolationReport {
    let generator = Generator::from_checkpoint(&state.to_checkpoint()).unwrap();
    interpolation_experiment(&generator, "pose", &GenerateRequest::new("a <attr:pose> photo of <obj>")).unwrap()
}

#[test]
fn stages_each_make_progress() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    let rendered = render_toy(&reg, &ToyRenderer::position("pose"), &default_grid(reg.specs()).unwrap(), dir.path()).unwrap();
    let manifest = augment(&rendered, &AugmentationPolicy::default(), &ToyConditioner).unwrap().manifest;
    let items = load_training_data(&manifest).unwrap();
    let stage1_items = identity_items(&items).unwrap();
    assert_eq!(stage1_items.len(), 18);
    assert!(stage1_items.iter().all(|i| i.source == SampleSource::Rendered && !i.template.has_attrs()));

    let mut state = TrainState::new(toy(), reg, &ModelConfig::default()).unwrap();
    let mut log = Vec::new();
    run_stage(&mut state, Stage::One, &stage1_items, &StageConfig::stage1(), &mut log).unwrap();
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    let curve = smoothed(&losses, 50);
    let (first, last) = (curve[0], *curve.last().unwrap());
    assert!(last <= 0.5 * first, "stage 1 smoothed loss {first} -> {last}");

    let after_one = recovery(&state);
    let identity = state.identity.clone();
    run_stage(&mut state, Stage::Two, &items, &StageConfig::stage2(), &mut log).unwrap();
    assert_eq!(state.identity, identity, "stage 2 must not move the identity token");
    let after_two = recovery(&state);
    let (m1, m2) = (mean_spearman(&[after_one.clone()]), mean_spearman(&[after_two.clone()]));
    assert!(
        m2 > m1,
        "recovery after stage 2 ({m2:.3}, {}/{}) should beat stage 1 alone ({m1:.3}, {}/{})",
        after_two.midpoints_between,
        after_two.midpoint_count,
        after_one.midpoints_between,
        after_one.midpoint_count
    );

    // a sweep over the trained attribute moves the object monotonically
    let generator = Generator::from_checkpoint(&state.to_checkpoint()).unwrap();
    let frames = generator
        .sweep(&SweepRequest {
            base: GenerateRequest::new("a <attr:pose> photo of <obj>"),
            sweep_attribute: "pose".into(),
            from: 0.0,
            to: 90.0,
            frames: 5,
        })
        .unwrap();
    let xs: Vec<f64> = frames.iter().map(|g| estimate_position(&g.pixels).unwrap()).collect();
    assert!(xs.windows(2).all(|w| w[0] < w[1]), "{xs:?}");
}

fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).mapv(|d| d * d).mean().unwrap()
}

#[test]
fn sampler_reproduces_a_learned_constant_image() {
    let bb = toy();
    let [c, h, w] = bb.sample_shape();
    let constant = Array3::from_shape_fn((c, h, w), |(ch, _, _)| [0.6, -0.2, 0.1][ch % 3]);
    let template = PromptTemplate::parse_syntax("a photo of <obj>").unwrap();
    let items: Vec<TrainItem> = (0..4)
        .map(|i| TrainItem {
            id: format!("c{i}"),
            sample: constant.clone(),
            template: template.clone(),
            values: AttributeValue::new(),
            source: SampleSource::Rendered,
        })
        .collect();
    let untrained = TrainState::new(bb.clone(), registry(), &ModelConfig::default()).unwrap();
    let mut trained = TrainState::new(bb, registry(), &ModelConfig::default()).unwrap();
    let cfg = StageConfig {
        steps: 300,
        ..StageConfig::stage1()
    };
    run_stage(&mut trained, Stage::One, &items, &cfg, &mut Vec::new()).unwrap();

    let request = GenerateRequest {
        seed: 11,
        guidance_scale: 1.0,
        negative_mode: NegativeMode::NullText,
        ..GenerateRequest::new("a photo of <obj>")
    };
    let target = sample_to_pixels(&constant);
    let error = |state: &TrainState<ToyBackbone>| {
        let generator = Generator::from_checkpoint(&state.to_checkpoint()).unwrap();
        mse(&generator.generate(&request).unwrap().pixels, &target)
    };
    let (before, after) = (error(&untrained), error(&trained));
    assert!(after < before, "trained MSE {after} not below untrained {before}");
}

#[test]
fn denoise_is_fast_on_one_core() {
    let bb = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = gaussian_noise(bb.sample_shape(), &mut rng);
    let cond: Array2<f64> = encode_text(&bb, "a bird flying on a sunny day").unwrap();
    bb.denoise(&x, 50, &cond).unwrap();
    let runs = 20;
    let started = Instant::now();
    for t in 0..runs {
        bb.denoise(&x, t * 5, &cond).unwrap();
    }
    let per_call = started.elapsed().as_secs_f64() * 1e3 / runs as f64;
    assert!(per_call < 10.0, "denoise took {per_call:.2} ms");
}
