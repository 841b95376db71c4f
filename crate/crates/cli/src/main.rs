//! `cwords`: the full pipeline from toy renders to a served checkpoint.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cwords::backbone::{ToyBackbone, ToyConfig, TrainableBackbone};
use cwords::checkpoint::Checkpoint;
use cwords::conditioning::NegativeMode;
use cwords::data::io::save_rgb;
use cwords::data::{augment, default_grid, render_toy, Manifest, ToyConditioner};
use cwords::inference::{GenerateRequest, Generator, SweepRequest};
use cwords::training::{train_joint, train_two_stage, JsonlLog, ModelConfig, Stage, StageConfig};
use cwords_service::{ServeArgs, ServeConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "cwords", version, about = "Continuous attribute words for text-to-image diffusion")]
struct Cli {
    /// Print one JSON document on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Run config (TOML) with a table per subcommand; flags override it.
    #[arg(long, global = true, env = "CW_CONFIG")]
    config: Option<PathBuf>,
    /// Log verbosity on stderr: -v info, -vv debug. RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the toy object over an attribute grid and write a manifest.
    RenderToy(RenderArgs),
    /// Add conditioned augmentations of the rendered records.
    Augment(AugmentArgs),
    /// Two-stage training (or the merged single-stage baseline).
    Train(TrainArgs),
    /// Generate one image.
    Generate(GenerateArgs),
    /// Generate frames sweeping one attribute with a fixed seed.
    Sweep(SweepArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
    /// Describe a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RenderArgs {
    /// Attribute spec file (TOML, `[[attribute]]` tables).
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Grid points per attribute; overrides each spec's grid size.
    #[arg(long)]
    grid: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AugmentArgs {
    /// Manifest file or the directory holding manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Augmentation policy (TOML); defaults to lineart with the wing-pose prompts.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Stage-1 overrides (TOML keys of a stage config).
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    stage2: Option<PathBuf>,
    /// Model overrides: lora, identity_token, words, optimizer tables.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Only `toy` is available.
    #[arg(long)]
    backbone: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step log (JSON lines); defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Train the merged single-stage baseline with the same total steps.
    #[arg(long)]
    #[serde(default)]
    joint: bool,
    /// Seeds both stages (stage 2 uses seed + 1) and the word init.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
struct SampleArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Prompt template; defaults to every attribute slot before `photo of <obj>`.
    #[arg(long)]
    template: Option<String>,
    /// Attribute value as name=value; repeatable.
    #[arg(long = "set", value_parser = parse_assignment)]
    #[serde(rename = "set", deserialize_with = "assignments_from_table")]
    sets: Vec<(String, f64)>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// null_text or identity.
    #[arg(long)]
    negative_mode: Option<NegativeMode>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
struct GenerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    sample: SampleArgs,
    /// Output PNG.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    sample: SampleArgs,
    /// Attribute to sweep.
    #[arg(long)]
    attr: Option<String>,
    #[arg(long)]
    from: Option<f64>,
    #[arg(long)]
    to: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    /// Output directory for frame_NNN.png.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ServeSection {
    checkpoint: Option<PathBuf>,
    host: Option<String>,
    port: Option<u16>,
    queue_depth: Option<usize>,
}

fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let value: f64 = value.trim().parse().map_err(|e| format!("value of `{name}`: {e}"))?;
    Ok((name.trim().to_string(), value))
}

fn assignments_from_table<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<(String, f64)>, D::Error> {
    Ok(BTreeMap::<String, f64>::deserialize(d)?.into_iter().collect())
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.with_context(|| format!("missing --{flag} (flag or run config)"))
}

/// Human text and the matching JSON document for one command.
struct Report {
    text: String,
    json: serde_json::Value,
}

fn render_cmd(args: RenderArgs, file: RenderArgs, cfg: Option<&Path>) -> Result<Report> {
    let attributes = require(pick(args.attributes, config::anchor(cfg, file.attributes)), "attributes")?;
    let out = require(pick(args.out, config::anchor(cfg, file.out)), "out")?;
    let grid = pick(args.grid, file.grid);
    let (mut registry, renderer) = config::load_attribute_file(&attributes)?;
    if let Some(n) = grid {
        let specs = registry.specs().iter().map(|s| s.clone().with_grid_size(n)).collect();
        registry = cwords::attribute::AttributeRegistry::new(specs)?;
    }
    let points = default_grid(registry.specs())?;
    let manifest = render_toy(&registry, &renderer, &points, &out)?;
    let path = out.join(cwords::data::MANIFEST_FILE);
    Ok(Report {
        text: format!("rendered {} records into {}", manifest.records.len(), out.display()),
        json: json!({"records": manifest.records.len(), "manifest": path}),
    })
}

fn augment_cmd(args: AugmentArgs, file: AugmentArgs, cfg: Option<&Path>) -> Result<Report> {
    let manifest_path = require(pick(args.manifest, config::anchor(cfg, file.manifest)), "manifest")?;
    let mut policy = config::load_policy(pick(args.policy, config::anchor(cfg, file.policy)).as_deref())?;
    if let Some(r) = pick(args.ratio, file.ratio) {
        policy.augment_ratio = r;
    }
    if let Some(s) = pick(args.seed, file.seed) {
        policy.seed = s;
    }
    let manifest = Manifest::load(&manifest_path)?;
    let report = augment(&manifest, &policy, &ToyConditioner)?;
    Ok(Report {
        text: format!(
            "added {} augmented records ({} skipped), {} total",
            report.added,
            report.skipped.len(),
            report.manifest.records.len()
        ),
        json: json!({
            "added": report.added,
            "skipped": report.skipped.iter().map(|(id, why)| json!({"parent": id, "reason": why})).collect::<Vec<_>>(),
            "records": report.manifest.records.len(),
        }),
    })
}

fn train_cmd(args: TrainArgs, file: TrainArgs, cfg: Option<&Path>) -> Result<Report> {
    let manifest_path = require(pick(args.manifest, config::anchor(cfg, file.manifest)), "manifest")?;
    let out = require(pick(args.out, config::anchor(cfg, file.out)), "out")?;
    let backbone = pick(args.backbone, file.backbone).unwrap_or_else(|| "toy".into());
    if backbone != "toy" {
        bail!("unknown backbone `{backbone}`; only `toy` is available");
    }
    let mut stage1 = config::overlay_file(&StageConfig::stage1(), pick(args.stage1, config::anchor(cfg, file.stage1)).as_deref())?;
    let mut stage2 = config::overlay_file(&StageConfig::stage2(), pick(args.stage2, config::anchor(cfg, file.stage2)).as_deref())?;
    let mut model = config::overlay_file(&ModelConfig::default(), pick(args.model, config::anchor(cfg, file.model)).as_deref())?;
    if let Some(seed) = pick(args.seed, file.seed) {
        stage1.seed = seed;
        stage2.seed = seed.wrapping_add(1);
        model.words.seed = seed;
    }
    let log_path = pick(args.log, config::anchor(cfg, file.log)).unwrap_or_else(|| out.with_extension("log.jsonl"));
    let joint = args.joint || file.joint;

    let manifest = Manifest::load(&manifest_path)?;
    if manifest.records.is_empty() {
        bail!("manifest {} has no records", manifest_path.display());
    }
    let base = ToyBackbone::new(ToyConfig::default())?;
    let mut log = JsonlLog::create(&log_path)?;
    let state = if joint {
        train_joint(&manifest, &StageConfig::merged(&stage1, &stage2), base, &model, &mut log)?
    } else {
        train_two_stage(&manifest, &stage1, &stage2, base, &model, &mut log)?
    };
    let records = log.finish()?;
    let checkpoint = state.to_checkpoint();
    checkpoint.save(&out)?;
    let last = |stage: Stage| records.iter().rev().find(|r| r.stage == stage).map(|r| r.loss);
    let stages: Vec<Stage> = if joint { vec![Stage::Joint] } else { vec![Stage::One, Stage::Two] };
    let mut text = format!("trained {} steps, checkpoint {}", records.len(), out.display());
    for s in &stages {
        if let Some(l) = last(*s) {
            text += &format!("\n  stage {} final loss {l:.5}", u8::from(*s));
        }
    }
    Ok(Report {
        text,
        json: json!({
            "checkpoint": out,
            "log": log_path,
            "steps": records.len(),
            "final_loss": stages.iter().map(|s| (u8::from(*s).to_string(), last(*s))).collect::<BTreeMap<_, _>>(),
        }),
    })
}

fn load_generator(path: &Path) -> Result<Generator<ToyBackbone>> {
    let checkpoint = Checkpoint::load(path)?;
    Ok(Generator::from_checkpoint(&checkpoint)?)
}

/// Merges flags over the run config into a request for `generator`.
fn sample_request(args: SampleArgs, file: SampleArgs, generator: &Generator<ToyBackbone>) -> Result<GenerateRequest> {
    let template = pick(args.template, file.template).unwrap_or_else(|| {
        let slots: String = generator.slot_names().iter().map(|s| format!("<attr:{s}> ")).collect();
        format!("a {slots}photo of <obj>")
    });
    let mut request = GenerateRequest::new(template);
    for (name, value) in file.sets.into_iter().chain(args.sets) {
        request.attributes.insert(name, value);
    }
    if let Some(v) = pick(args.seed, file.seed) {
        request.seed = v;
    }
    if let Some(v) = pick(args.steps, file.steps) {
        request.steps = v;
    }
    if let Some(v) = pick(args.guidance_scale, file.guidance_scale) {
        request.guidance_scale = v;
    }
    if let Some(v) = pick(args.negative_mode, file.negative_mode) {
        request.negative_mode = v;
    }
    Ok(request)
}

fn generate_cmd(args: GenerateArgs, file: GenerateArgs, cfg: Option<&Path>) -> Result<Report> {
    let ckpt = require(pick(args.sample.ckpt.clone(), config::anchor(cfg, file.sample.ckpt.clone())), "ckpt")?;
    let out = require(pick(args.out, config::anchor(cfg, file.out)), "out")?;
    let generator = load_generator(&ckpt)?;
    let request = sample_request(args.sample, file.sample, &generator)?;
    let image = generator.generate(&request)?;
    save_rgb(&out, &image.pixels)?;
    let attributes: BTreeMap<&str, f64> =
        image.attributes.names().map(|n| (n, image.attributes.get(n).expect("listed"))).collect();
    Ok(Report {
        text: format!("wrote {} (seed {}, {:?})", out.display(), request.seed, attributes),
        json: json!({"out": out, "request": request, "attributes": attributes}),
    })
}

fn sweep_cmd(args: SweepArgs, file: SweepArgs, cfg: Option<&Path>) -> Result<Report> {
    let ckpt = require(pick(args.sample.ckpt.clone(), config::anchor(cfg, file.sample.ckpt.clone())), "ckpt")?;
    let out = require(pick(args.out, config::anchor(cfg, file.out)), "out")?;
    let attr = require(pick(args.attr, file.attr), "attr")?;
    let generator = load_generator(&ckpt)?;
    let spec = generator.registry.require(&attr)?.clone();
    let request = SweepRequest {
        base: sample_request(args.sample, file.sample, &generator)?,
        sweep_attribute: attr,
        from: pick(args.from, file.from).unwrap_or(spec.domain_min),
        to: pick(args.to, file.to).unwrap_or(spec.domain_max),
        frames: pick(args.frames, file.frames).unwrap_or(spec.default_grid_size),
    };
    let frames = generator.sweep(&request)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut listed = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let path = out.join(format!("frame_{i:03}.png"));
        save_rgb(&path, &frame.pixels)?;
        let value = frame.attributes.get(&request.sweep_attribute).expect("swept attribute is set");
        listed.push(json!({"index": i, "value": value, "path": path}));
    }
    let values: Vec<String> = frames
        .iter()
        .map(|f| f.attributes.get(&request.sweep_attribute).expect("swept attribute is set").to_string())
        .collect();
    Ok(Report {
        text: format!("wrote {} frames to {}: {} = [{}]", frames.len(), out.display(), request.sweep_attribute, values.join(", ")),
        json: json!({"request": request, "frames": listed}),
    })
}

#[derive(Debug, Serialize)]
struct Inspection {
    version: u32,
    backbone: String,
    attributes: Vec<cwords_service::AttributeInfo>,
    identity_token: String,
    words: Vec<serde_json::Value>,
    lora_rank: Option<usize>,
    lora_alpha: Option<f64>,
    lora_layers: Vec<String>,
    lora_params: usize,
    word_params: usize,
    full_params: usize,
}

fn inspect_cmd(args: InspectArgs) -> Result<Report> {
    let checkpoint = Checkpoint::load(&args.ckpt)?;
    let backbone = checkpoint.toy_backbone()?;
    let words = checkpoint
        .words
        .iter()
        .map(|w| {
            json!({
                "slot": w.slot(),
                "attributes": w.attributes().iter().map(|a| a.name.clone()).collect::<Vec<_>>(),
                "params": w.param_count(),
            })
        })
        .collect();
    let info = Inspection {
        version: checkpoint.version,
        backbone: checkpoint.backbone.id.clone(),
        attributes: cwords_service::attribute_infos(&checkpoint.attributes),
        identity_token: checkpoint.identity.token_string.clone(),
        words,
        lora_rank: checkpoint.lora_rank(),
        lora_alpha: checkpoint.lora.config.as_ref().map(|c| c.alpha),
        lora_layers: checkpoint.lora.layers.keys().cloned().collect(),
        lora_params: checkpoint.lora.param_count(),
        word_params: checkpoint.word_param_count(),
        full_params: backbone.full_param_count(),
    };
    let mut text = format!(
        "checkpoint version {}\nbackbone {}\nidentity token `{}`\n",
        info.version, info.backbone, info.identity_token
    );
    for a in &info.attributes {
        text += &format!(
            "attribute {} [{}, {}]{} grid {}\n",
            a.name,
            a.min,
            a.max,
            if a.periodic { " periodic" } else { "" },
            a.grid_size
        );
    }
    text += &format!(
        "lora rank {} alpha {} on {} layers\nparameters: lora {}, words {}, full backbone {} (trainable {:.2}% of full)",
        info.lora_rank.map_or("-".into(), |r| r.to_string()),
        info.lora_alpha.map_or("-".into(), |a| a.to_string()),
        info.lora_layers.len(),
        info.lora_params,
        info.word_params,
        info.full_params,
        100.0 * (info.lora_params + info.word_params) as f64 / info.full_params as f64,
    );
    Ok(Report {
        text,
        json: serde_json::to_value(&info)?,
    })
}

fn serve_cmd(args: ServeArgs, file: ServeSection, cfg: Option<&Path>) -> Result<()> {
    let defaults = ServeConfig::default();
    let base = ServeConfig {
        checkpoint: config::anchor(cfg, file.checkpoint),
        host: file.host.unwrap_or(defaults.host),
        port: file.port.unwrap_or(defaults.port),
        queue_depth: file.queue_depth.unwrap_or(defaults.queue_depth),
    };
    let config = args.apply(base);
    tokio::runtime::Runtime::new()?.block_on(cwords_service::serve(config))
}

fn run(cli: Cli) -> Result<Option<Report>> {
    let cfg = cli.config.as_deref();
    Ok(Some(match cli.command {
        Command::RenderToy(a) => render_cmd(a, config::section(cfg, "render_toy")?, cfg)?,
        Command::Augment(a) => augment_cmd(a, config::section(cfg, "augment")?, cfg)?,
        Command::Train(a) => train_cmd(a, config::section(cfg, "train")?, cfg)?,
        Command::Generate(a) => generate_cmd(a, config::section(cfg, "generate")?, cfg)?,
        Command::Sweep(a) => sweep_cmd(a, config::section(cfg, "sweep")?, cfg)?,
        Command::Inspect(a) => inspect_cmd(a)?,
        Command::Serve(a) => {
            serve_cmd(a, config::section(cfg, "serve")?, cfg)?;
            return Ok(None);
        }
    }))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let json = cli.json;
    match run(cli) {
        Ok(Some(report)) => {
            if json {
                println!("{}", report.json);
            } else {
                println!("{}", report.text);
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                println!("{}", json!({"error": format!("{e:#}")}));
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
