use std::sync::OnceLock;

use axum::body::{to_bytes, Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use cwords::attribute::{AttributeRegistry, AttributeSpec};
use cwords::backbone::{ToyBackbone, ToyConfig};
use cwords::checkpoint::Checkpoint;
use cwords::data::render::estimate_position;
use cwords::data::{augment, default_grid, render_toy, AugmentationPolicy, ToyConditioner, ToyRenderer};
use cwords::training::{train_two_stage, ModelConfig, StageConfig, TrainState};
use cwords_service::{router, AppState, AttributeInfo, ErrorBody, GenerateResponse, SweepResponse};
use serde_json::{json, Value};
use tower::ServiceExt;

fn registry() -> AttributeRegistry {
    AttributeRegistry::new(vec![AttributeSpec::new("pose", 0.0, 90.0).unwrap()]).unwrap()
}

fn untrained() -> Checkpoint {
    let state = TrainState::new(ToyBackbone::new(ToyConfig::default()).unwrap(), registry(), &ModelConfig::default()).unwrap();
    state.to_checkpoint()
}

fn trained() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let reg = registry();
        let m = render_toy(&reg, &ToyRenderer::position("pose"), &default_grid(reg.specs()).unwrap(), dir.path()).unwrap();
        let m = augment(&m, &AugmentationPolicy::default(), &ToyConditioner).unwrap().manifest;
        let mut log = Vec::new();
        let state = train_two_stage(
            &m,
            &StageConfig::stage1(),
            &StageConfig::stage2(),
            ToyBackbone::new(ToyConfig::default()).unwrap(),
            &ModelConfig::default(),
            &mut log,
        )
        .unwrap();
        state.to_checkpoint()
    })
}

fn app(checkpoint: &Checkpoint, depth: usize) -> Router {
    router(AppState::from_checkpoint(checkpoint, depth).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Bytes) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap())
}

async fn raw(app: &Router, uri: &str, body: &str) -> (StatusCode, Bytes) {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap())
}

fn gen_body(pose: f64, seed: u64, steps: usize) -> Value {
    json!({"template": "a <attr:pose> photo of <obj>", "attributes": {"pose": pose}, "seed": seed, "steps": steps})
}

fn error(bytes: &[u8]) -> ErrorBody {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn without_checkpoint_everything_is_unavailable() {
    let app = router(AppState::empty());
    let (s, b) = call(&app, "GET", "/attributes", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error(&b).error, "no_checkpoint");
    assert_eq!(call(&app, "POST", "/generate", Some(gen_body(10.0, 0, 2))).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(raw(&app, "/sweep", "{}").await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn attributes_mirror_registry_and_are_stable() {
    let ckpt = untrained();
    let app = app(&ckpt, 4);
    let (s, first) = call(&app, "GET", "/attributes", None).await;
    assert_eq!(s, StatusCode::OK);
    let infos: Vec<AttributeInfo> = serde_json::from_slice(&first).unwrap();
    assert_eq!(infos.len(), 1);
    let spec = &ckpt.attributes.specs()[0];
    assert_eq!(infos[0].name, spec.name);
    assert_eq!((infos[0].min, infos[0].max, infos[0].periodic), (spec.domain_min, spec.domain_max, spec.periodic));
    assert_eq!(infos[0].grid_size, 18);
    assert_eq!(infos[0].grid.len(), 18);
    let (_, second) = call(&app, "GET", "/attributes", None).await;
    assert_eq!(first, second);
}

#[tokio::test]
async fn generate_is_deterministic_and_echoes_parameters() {
    let app = app(&untrained(), 4);
    let (s, a) = call(&app, "POST", "/generate", Some(gen_body(30.0, 7, 4))).await;
    assert_eq!(s, StatusCode::OK);
    let a: GenerateResponse = serde_json::from_slice(&a).unwrap();
    let (_, b) = call(&app, "POST", "/generate", Some(gen_body(30.0, 7, 4))).await;
    let b: GenerateResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!((a.seed, a.steps, a.guidance_scale), (7, 4, 7.5));
    assert_eq!(a.attributes.get("pose"), Some(&30.0));
    assert_eq!(a.template, "a <attr:pose> photo of <obj>");
    assert_eq!((a.image.format.as_str(), a.image.width, a.image.height), ("png", 32, 32));
    assert_eq!(&a.image.png_bytes().unwrap()[1..4], b"PNG");
    assert!(a.timing.generate_ms >= 0.0);
}

#[tokio::test]
async fn request_errors_map_to_statuses() {
    let app = app(&untrained(), 4);
    let (s, b) = call(&app, "POST", "/generate", Some(gen_body(-5.0, 0, 2))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let e = error(&b);
    assert_eq!(e.attribute.as_deref(), Some("pose"));
    assert_eq!((e.min, e.max), (Some(0.0), Some(90.0)));

    let (s, b) = call(&app, "POST", "/generate", Some(json!({"template": "a <attr:wing> photo", "attributes": {}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error(&b).position, Some(2));

    let (s, b) = call(&app, "POST", "/generate", Some(json!({"template": "a <attr:pose> photo of <obj>"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(&b).error, "missing_attribute");

    let (s, b) = call(&app, "POST", "/generate", Some(json!({"template": "a photo", "attributes": {"size": 1.0}}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(&b).attribute.as_deref(), Some("size"));

    let (s, _) = call(&app, "POST", "/generate", Some(json!({"template": "a photo", "steps": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", "/generate", Some(json!({"template": "a photo", "guidance_scale": -1.0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, b) = raw(&app, "/generate", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error(&b).error, "invalid_body");
    assert_eq!(raw(&app, "/generate", r#"{"template": 3}"#).await.0, StatusCode::BAD_REQUEST);
}

fn sweep_body(from: f64, to: f64, frames: usize) -> Value {
    json!({
        "base": {"template": "a <attr:pose> photo of <obj>", "seed": 3, "steps": 3},
        "sweep_attribute": "pose", "from": from, "to": to, "frames": frames
    })
}

#[tokio::test]
async fn sweep_frames_are_evenly_spaced() {
    let app = app(&untrained(), 4);
    let (s, b) = call(&app, "POST", "/sweep", Some(sweep_body(0.0, 1.0, 5))).await;
    assert_eq!(s, StatusCode::OK);
    let r: SweepResponse = serde_json::from_slice(&b).unwrap();
    let values: Vec<f64> = r.frames.iter().map(|f| f.value).collect();
    assert_eq!(values, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert!(r.frames.iter().all(|f| f.attributes["pose"] == f.value));
    assert_eq!(r.frames.iter().map(|f| f.index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);

    let (_, b) = call(&app, "POST", "/sweep", Some(sweep_body(10.0, 80.0, 2))).await;
    let r: SweepResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(r.frames.iter().map(|f| f.value).collect::<Vec<_>>(), vec![10.0, 80.0]);

    assert_eq!(call(&app, "POST", "/sweep", Some(sweep_body(0.0, 1.0, 1))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, b) = call(&app, "POST", "/sweep", Some(sweep_body(0.0, 100.0, 3))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(&b).attribute.as_deref(), Some("pose"));
    let mut unknown = sweep_body(0.0, 1.0, 3);
    unknown["sweep_attribute"] = json!("size");
    assert_eq!(call(&app, "POST", "/sweep", Some(unknown)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn overflow_is_rejected_and_responses_stay_matched() {
    let app = app(&untrained(), 1);
    let calls = (0..6u64).map(|seed| {
        let app = app.clone();
        async move { call(&app, "POST", "/generate", Some(gen_body(45.0, seed, 300))).await }
    });
    let results = futures_join(calls).await;
    let ok = results.iter().filter(|(s, _)| *s == StatusCode::OK).count();
    let busy = results.iter().filter(|(s, _)| *s == StatusCode::TOO_MANY_REQUESTS).count();
    assert!(ok >= 1 && busy >= 1, "ok {ok}, busy {busy}");
    assert_eq!(ok + busy, 6);

    // with room for everyone, each response carries its own request's seed
    let app = self::app(&untrained(), 8);
    let calls = (0..4u64).map(|seed| {
        let app = app.clone();
        async move { (seed, call(&app, "POST", "/generate", Some(gen_body(45.0, seed, 2))).await) }
    });
    for (seed, (status, body)) in futures_join(calls).await {
        assert_eq!(status, StatusCode::OK);
        let r: GenerateResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(r.seed, seed);
        let (_, alone) = call(&app, "POST", "/generate", Some(gen_body(45.0, seed, 2))).await;
        let alone: GenerateResponse = serde_json::from_slice(&alone).unwrap();
        assert_eq!(alone.image, r.image);
    }
}

async fn futures_join<F: std::future::Future + Send + 'static>(futs: impl Iterator<Item = F>) -> Vec<F::Output>
where
    F::Output: Send + 'static,
{
    let handles: Vec<_> = futs.map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn trained_checkpoint_behaviour() {
    let ckpt = tokio::task::spawn_blocking(trained).await.unwrap();
    let app = app(ckpt, 4);

    let mut body = gen_body(30.0, 0, 50);
    let (_, a) = call(&app, "POST", "/generate", Some(body.clone())).await;
    body["negative_mode"] = json!("null_text");
    let (_, b) = call(&app, "POST", "/generate", Some(body)).await;
    let a: GenerateResponse = serde_json::from_slice(&a).unwrap();
    let b: GenerateResponse = serde_json::from_slice(&b).unwrap();
    assert_ne!(a.image, b.image);

    let mut sweep = sweep_body(0.0, 90.0, 7);
    sweep["base"]["steps"] = json!(50);
    let (s, body) = call(&app, "POST", "/sweep", Some(sweep)).await;
    assert_eq!(s, StatusCode::OK);
    let r: SweepResponse = serde_json::from_slice(&body).unwrap();
    let estimates: Vec<f64> = r
        .frames
        .iter()
        .map(|f| estimate_position(&f.image.to_pixels().unwrap()).unwrap())
        .collect();
    assert!(estimates.windows(2).all(|w| w[0] < w[1]), "{estimates:?}");

    // serving many requests leaves the model untouched
    let (_, again) = call(&app, "POST", "/generate", Some(gen_body(30.0, 0, 50))).await;
    let again: GenerateResponse = serde_json::from_slice(&again).unwrap();
    assert_eq!(again.image, a.image);
}
