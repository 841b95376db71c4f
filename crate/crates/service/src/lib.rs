//! HTTP inference over one loaded checkpoint.
//!
//! Generation runs on a single worker thread fed by a bounded FIFO queue.
//! A full queue is rejected with 429; without a checkpoint every endpoint
//! answers 503. The generator is owned by the worker and never mutated.

pub mod api;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use cwords::attribute::AttributeRegistry;
use cwords::backbone::ToyBackbone;
use cwords::checkpoint::Checkpoint;
use cwords::inference::{GenerateRequest, Generator, SweepRequest};
use serde::de::DeserializeOwned;
use tokio::sync::{mpsc, oneshot};

pub use api::{
    ApiError, AttributeInfo, EncodedImage, ErrorBody, GenerateResponse, SweepFrame, SweepResponse, Timing,
};

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_QUEUE_DEPTH: usize = 16;
/// Upper bounds that keep a single request from monopolizing the worker.
pub const MAX_STEPS: usize = 1000;
pub const MAX_FRAMES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub queue_depth: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            host: DEFAULT_HOST.into(),
            port: DEFAULT_PORT,
            queue_depth: DEFAULT_QUEUE_DEPTH,
        }
    }
}

/// Command-line flags; every one also reads `CW_<NAME>` from the
/// environment. Unset values fall through to a config file or defaults.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ServeArgs {
    /// Checkpoint to serve; without one every endpoint answers 503.
    #[arg(long, env = "CW_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "CW_HOST")]
    pub host: Option<String>,
    #[arg(long, env = "CW_PORT")]
    pub port: Option<u16>,
    /// Requests allowed to wait for the worker before 429.
    #[arg(long, env = "CW_QUEUE_DEPTH")]
    pub queue_depth: Option<usize>,
}

impl ServeArgs {
    /// Flags over `base`.
    pub fn apply(&self, base: ServeConfig) -> ServeConfig {
        ServeConfig {
            checkpoint: self.checkpoint.clone().or(base.checkpoint),
            host: self.host.clone().unwrap_or(base.host),
            port: self.port.unwrap_or(base.port),
            queue_depth: self.queue_depth.unwrap_or(base.queue_depth),
        }
    }
}

enum Job {
    Generate(GenerateRequest, oneshot::Sender<Result<GenerateResponse, ApiError>>),
    Sweep(SweepRequest, oneshot::Sender<Result<SweepResponse, ApiError>>),
}

struct Loaded {
    attributes: Vec<AttributeInfo>,
    queue: mpsc::Sender<(Instant, Job)>,
}

/// Shared handler state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    loaded: Option<Arc<Loaded>>,
}

impl AppState {
    /// A service with no model: every endpoint answers 503.
    pub fn empty() -> Self {
        Self { loaded: None }
    }

    /// Starts the worker thread that owns `generator`.
    pub fn new(generator: Generator<ToyBackbone>, queue_depth: usize) -> anyhow::Result<Self> {
        anyhow::ensure!(queue_depth >= 1, "queue depth must be at least 1");
        let attributes = attribute_infos(&generator.registry);
        let (tx, rx) = mpsc::channel(queue_depth);
        std::thread::Builder::new()
            .name("cwords-worker".into())
            .spawn(move || worker(generator, rx))?;
        Ok(Self {
            loaded: Some(Arc::new(Loaded { attributes, queue: tx })),
        })
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint, queue_depth: usize) -> anyhow::Result<Self> {
        Self::new(Generator::from_checkpoint(checkpoint)?, queue_depth)
    }

    fn loaded(&self) -> Result<&Loaded, ApiError> {
        self.loaded.as_deref().ok_or_else(ApiError::no_checkpoint)
    }

    fn enqueue(&self, job: Job) -> Result<(), ApiError> {
        self.loaded()?.queue.try_send((Instant::now(), job)).map_err(|e| match e {
            mpsc::error::TrySendError::Full(_) => ApiError::queue_full(),
            mpsc::error::TrySendError::Closed(_) => ApiError::worker_gone(),
        })
    }
}

fn millis(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn check_limits(request: &GenerateRequest) -> Result<(), ApiError> {
    if request.steps > MAX_STEPS {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_request",
            format!("steps {} exceeds the limit of {MAX_STEPS}", request.steps),
        ));
    }
    Ok(())
}

fn run_generate(generator: &Generator<ToyBackbone>, request: &GenerateRequest, queued: Instant) -> Result<GenerateResponse, ApiError> {
    check_limits(request)?;
    let queue_ms = millis(queued);
    let started = Instant::now();
    let generated = generator.generate(request)?;
    let image = EncodedImage::from_pixels(&generated.pixels)?;
    Ok(GenerateResponse {
        image,
        template: request.template.clone(),
        seed: request.seed,
        steps: request.steps,
        guidance_scale: request.guidance_scale,
        negative_mode: request.negative_mode,
        attributes: api::attribute_map(&generated),
        timing: Timing {
            queue_ms,
            generate_ms: millis(started),
        },
    })
}

fn run_sweep(generator: &Generator<ToyBackbone>, request: &SweepRequest, queued: Instant) -> Result<SweepResponse, ApiError> {
    check_limits(&request.base)?;
    if request.frames > MAX_FRAMES {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_request",
            format!("frames {} exceeds the limit of {MAX_FRAMES}", request.frames),
        ));
    }
    let queue_ms = millis(queued);
    let started = Instant::now();
    let values = cwords::inference::sweep_values(request.from, request.to, request.frames)?;
    let generated = generator.sweep(request)?;
    let frames = generated
        .iter()
        .zip(values)
        .enumerate()
        .map(|(index, (g, value))| {
            Ok(SweepFrame {
                index,
                value,
                attributes: api::attribute_map(g),
                image: EncodedImage::from_pixels(&g.pixels)?,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    let base = &request.base;
    Ok(SweepResponse {
        sweep_attribute: request.sweep_attribute.clone(),
        template: base.template.clone(),
        seed: base.seed,
        steps: base.steps,
        guidance_scale: base.guidance_scale,
        negative_mode: base.negative_mode,
        frames,
        timing: Timing {
            queue_ms,
            generate_ms: millis(started),
        },
    })
}

fn worker(generator: Generator<ToyBackbone>, mut rx: mpsc::Receiver<(Instant, Job)>) {
    while let Some((queued, job)) = rx.blocking_recv() {
        // a dropped receiver means the client went away; nothing to report
        match job {
            Job::Generate(req, reply) => {
                let _ = reply.send(run_generate(&generator, &req, queued));
            }
            Job::Sweep(req, reply) => {
                let _ = reply.send(run_sweep(&generator, &req, queued));
            }
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_body(&e))
}

async fn attributes(State(state): State<AppState>) -> Result<Json<Vec<AttributeInfo>>, ApiError> {
    Ok(Json(state.loaded()?.attributes.clone()))
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    state.loaded()?;
    let request: GenerateRequest = parse_body(&body)?;
    let (tx, rx) = oneshot::channel();
    state.enqueue(Job::Generate(request, tx))?;
    Ok(Json(rx.await.map_err(|_| ApiError::worker_gone())??))
}

async fn sweep(State(state): State<AppState>, body: Bytes) -> Result<Json<SweepResponse>, ApiError> {
    state.loaded()?;
    let request: SweepRequest = parse_body(&body)?;
    let (tx, rx) = oneshot::channel();
    state.enqueue(Job::Sweep(request, tx))?;
    Ok(Json(rx.await.map_err(|_| ApiError::worker_gone())??))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/attributes", get(attributes))
        .route("/generate", post(generate))
        .route("/sweep", post(sweep))
        .with_state(state)
}

/// Registry of a checkpoint as served by `GET /attributes`.
pub fn attribute_infos(registry: &AttributeRegistry) -> Vec<AttributeInfo> {
    registry.specs().iter().map(AttributeInfo::from).collect()
}

/// Loads the checkpoint (if any), binds and serves until ctrl-c.
pub async fn serve(config: ServeConfig) -> anyhow::Result<()> {
    let state = match &config.checkpoint {
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            tracing::info!(path = %path.display(), attributes = checkpoint.attributes.len(), "checkpoint loaded");
            AppState::from_checkpoint(&checkpoint, config.queue_depth)?
        }
        None => {
            tracing::warn!("no checkpoint given; all endpoints will answer 503");
            AppState::empty()
        }
    };
    let listener = tokio::net::TcpListener::bind((config.host.as_str(), config.port)).await?;
    tracing::info!(addr = %listener.local_addr()?, queue_depth = config.queue_depth, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
