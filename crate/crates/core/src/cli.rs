//! `kpforge` command line: generate, train, eval, infer, bench and plot.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, missing or
//! malformed files), 2 for failures while running.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::compositor::{generate_dataset, synthetic, AssetPools, GenerateConfig, CANVAS_SIZE};
use crate::dataset::{load_manifest, split_dataset, KeypointSchema};
use crate::error::{Error, Result};
use crate::evaluation::{compare_reports, parse_alpha_grid, render_comparison_plot, series_color, EvalReport};
use crate::imaging::FloatImage;
use crate::inference::{benchmark_latency, detect, detect_all, BenchConfig, DecodeConfig};
use crate::model::{build_model, load_checkpoint, BackboneSource, ModelConfig, Variant};
use crate::training::{images_to_batch, load_samples, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "kpforge", version, about = "Tool landmark detection trained on synthetic composites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compose labelled training images from tool cutouts and backgrounds.
    Generate(GenerateArgs),
    /// Train one network for one tool and variant.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and write a report.
    Eval(EvalArgs),
    /// Detect keypoints in one image; prints JSON lines.
    Infer(InferArgs),
    /// Time forward pass plus decoding.
    Bench(BenchArgs),
    /// Compare reports: PCK curves and error bars.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory of tool cutouts (RGBA PNG + JSON sidecar each).
    #[arg(long, required_unless_present = "toy")]
    pub assets: Option<PathBuf>,
    #[arg(long, required_unless_present = "toy")]
    pub backgrounds: Option<PathBuf>,
    #[arg(long)]
    pub distractors: Option<PathBuf>,
    /// Use N procedurally drawn tools instead of asset directories.
    #[arg(long, value_name = "N", conflicts_with_all = ["assets", "backgrounds", "distractors"])]
    pub toy: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = CANVAS_SIZE)]
    pub canvas_size: usize,
    /// Skip the occluded / background-swapped copy of each composite.
    #[arg(long)]
    pub no_occlusion: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// JSON training configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Variant,
    /// Root directory; the checkpoint goes to `<out>/<tool>/<variant>/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Separate validation manifest. Without it, `--val-fraction` of the
    /// training manifest is held out.
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Overrides the seed of the configuration file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// torchvision-named ResNet-50 weights.
    #[arg(long, required_unless_present = "random_backbone")]
    pub backbone_weights: Option<PathBuf>,
    /// Use a randomly initialised backbone (smoke runs only).
    #[arg(long, conflicts_with = "backbone_weights")]
    pub random_backbone: bool,
    /// Network input size; must be a multiple of 32.
    #[arg(long, default_value_t = 224)]
    pub input_size: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "0.02:0.2:0.02")]
    pub alphas: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Confidence threshold; 0 scores the plain argmax.
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f32,
    /// Head index, coarsest first; defaults to the finest head.
    #[arg(long)]
    pub level: Option<usize>,
    /// Model identifier in the report; defaults to `<tool>/<variant dir>`.
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long)]
    pub level: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long)]
    pub level: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit code for an error: 1 for invalid input, 2 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. }
        | Error::Validation { .. }
        | Error::Schema(_)
        | Error::Config(_)
        | Error::MissingWeights(_)
        | Error::Json(_) => 1,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found"))))
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("serialisable"));
}

fn toy_pools(n: usize, seed: u64) -> AssetPools {
    AssetPools {
        assets: (0..n as u64).map(|i| synthetic::toy_tool(seed.wrapping_add(i), "screwdriver")).collect(),
        backgrounds: (0..16).map(|i| synthetic::toy_background(seed.wrapping_add(1000 + i), CANVAS_SIZE)).collect(),
        distractors: (0..8).map(|i| synthetic::toy_distractor(seed.wrapping_add(2000 + i))).collect(),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let pools = match a.toy {
        Some(0) => return Err(Error::Config("--toy needs at least one tool".into())),
        Some(n) => toy_pools(n, a.seed),
        None => {
            let assets = a.assets.as_deref().expect("required by clap");
            let backgrounds = a.backgrounds.as_deref().expect("required by clap");
            require_exists(assets, "asset directory")?;
            require_exists(backgrounds, "background directory")?;
            if let Some(d) = &a.distractors {
                require_exists(d, "distractor directory")?;
            }
            AssetPools::load(assets, backgrounds, a.distractors.as_deref())?
        }
    };
    if a.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let config = GenerateConfig {
        count: a.count,
        seed: a.seed,
        canvas_size: a.canvas_size,
        occlusion_copies: !a.no_occlusion,
        ..GenerateConfig::default()
    };
    let schema = pools.implied_schema()?;
    let samples = generate_dataset(&pools, &config, &a.out)?;
    schema.save(&a.out.join("schema.json"))?;
    print_json(&json!({
        "manifest": a.out.join("manifest.jsonl"),
        "schema": a.out.join("schema.json"),
        "samples": samples.len(),
        "tool": schema.tool_name,
    }));
    Ok(())
}

/// Checkpoint directory for one (tool, variant) pair.
pub fn checkpoint_dir(root: &Path, tool: &str, variant: Variant) -> PathBuf {
    root.join(tool).join(variant.as_str())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    require_exists(&a.manifest, "manifest")?;
    require_exists(&a.schema, "schema")?;
    let schema = KeypointSchema::load(&a.schema)?;
    let mut config = match &a.config {
        Some(p) => {
            require_exists(p, "training config")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let model_config = ModelConfig {
        input_size: a.input_size,
        ..ModelConfig::for_variant(a.variant, schema.num_channels())
    };
    model_config.validate()?;
    let source = match (&a.backbone_weights, a.random_backbone) {
        (Some(p), _) => {
            require_exists(p, "backbone weights")?;
            BackboneSource::Pretrained(p.clone())
        }
        (None, _) => BackboneSource::RandomInit { seed: config.seed as i64 },
    };

    let manifest = load_manifest(&a.manifest, &schema)?;
    let (train_manifest, val_manifest) = match &a.val_manifest {
        Some(p) => {
            require_exists(p, "validation manifest")?;
            (manifest, load_manifest(p, &schema)?)
        }
        None => split_dataset(&manifest, a.val_fraction, config.seed)?,
    };
    let train_set = load_samples(&train_manifest, a.input_size)?;
    let val_set = load_samples(&val_manifest, a.input_size)?;

    let mut model = build_model(&model_config, &source)?;
    if matches!(source, BackboneSource::RandomInit { .. }) {
        let images: Vec<&FloatImage> = train_set.iter().take(32).map(|s| &s.image).collect();
        model.calibrate_backbone(&images_to_batch(&images))?;
    }
    let out = checkpoint_dir(&a.out, &schema.tool_name, a.variant);
    let state = train(&mut model, &schema, &train_set, &val_set, &config, &out, None)?;
    print_json(&json!({
        "checkpoint": out,
        "epochs": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "stopped_early": state.stopped_early,
    }));
    Ok(())
}

fn load_checkpoint_checked(dir: &Path) -> Result<(crate::model::Model, KeypointSchema)> {
    require_exists(dir, "checkpoint directory")?;
    load_checkpoint(dir)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let grid = parse_alpha_grid(&a.alphas)?;
    let decode = DecodeConfig::with_threshold(a.threshold);
    decode.validate()?;
    let (model, schema) = load_checkpoint_checked(&a.checkpoint)?;
    require_exists(&a.manifest, "manifest")?;
    let manifest = load_manifest(&a.manifest, &schema)?;
    let images = manifest
        .samples
        .iter()
        .map(|s| FloatImage::load_rgb(&manifest.image_path(s)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FloatImage> = images.iter().collect();
    let detections = detect_all(&model, &refs, &schema, &decode, a.level, a.batch_size)?;
    let id = a.model_id.clone().unwrap_or_else(|| {
        let parts: Vec<String> = a
            .checkpoint
            .components()
            .rev()
            .take(2)
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        parts.into_iter().rev().collect::<Vec<_>>().join("/")
    });
    let report = EvalReport::build(id, &detections, &manifest.samples, &schema, &grid)?;
    report.save(&a.out)?;
    print_json(&json!({
        "report": a.out,
        "pck@0.1": report.pck_at_reference.pck,
        "mean_error_px": report.errors.overall.mean,
    }));
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let decode = DecodeConfig::with_threshold(a.threshold);
    decode.validate()?;
    let (model, schema) = load_checkpoint_checked(&a.checkpoint)?;
    require_exists(&a.image, "image")?;
    let image = FloatImage::load_rgb(&a.image)?;
    for d in detect(&model, &image, &schema, &decode, a.level)? {
        print_json(&json!({ "name": d.name, "x": d.x, "y": d.y, "confidence": d.confidence }));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let decode = DecodeConfig::with_threshold(a.threshold);
    decode.validate()?;
    if a.samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let (model, schema) = load_checkpoint_checked(&a.checkpoint)?;
    require_exists(&a.manifest, "manifest")?;
    let manifest = load_manifest(&a.manifest, &schema)?;
    let images = manifest
        .samples
        .iter()
        .take(a.samples)
        .map(|s| FloatImage::load_rgb(&manifest.image_path(s)))
        .collect::<Result<Vec<_>>>()?;
    let config = BenchConfig {
        warmup: a.warmup,
        samples: a.samples,
        level: a.level,
        decode,
    };
    let report = benchmark_latency(&model, &images, &schema, &config)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            require_exists(p, "report")?;
            EvalReport::load(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_reports(&reports)?;
    render_comparison_plot(&cmp, &a.out)?;
    let data_path = a.out.with_extension("json");
    std::fs::write(&data_path, serde_json::to_string_pretty(&cmp)?).map_err(|e| Error::io(&data_path, e))?;
    print!("{}", cmp.to_table());
    for (i, r) in cmp.table.iter().enumerate() {
        let [r_, g, b] = series_color(i);
        println!("colour #{r_:02x}{g:02x}{b:02x}: {}", r.model);
    }
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
