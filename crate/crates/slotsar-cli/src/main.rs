//! Command-line entry point: scene generation, two-stage training,
//! evaluation, and visualization, each leaving a reproducible manifest
//! in its output directory.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data error,
//! 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use slotsar::error::Error;
use slotsar::metrics::LabelMap;
use slotsar::model::{ForwardOptions, Model, ModelConfig};
use slotsar::numerics::{Precision, Tensor};
use slotsar::synthgen::{
    generate_batch, pgm_bytes, ppm_bytes, preset_configs, read_dataset, write_dataset,
    ClutterKind, Preset, SceneConfig, SceneSample, TargetShape,
};
use slotsar::trainer::{
    evaluate, load_checkpoint, train, EvalOptions, MaskSource, Stage, TrainConfig,
};

#[derive(Parser)]
#[command(name = "slotsar", version, about = "Object-centric target/clutter disentanglement on synthetic SAR-like scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model (pretrain or finetune stage).
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Render inputs, masks, and per-iteration attention heatmaps.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Dataset preset: stage1-simple or stage2-complex.
    #[arg(long)]
    preset: Option<String>,
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene side length in pixels.
    #[arg(long, default_value_t = 112)]
    size: usize,
    /// Requested SCR in dB (custom generation without a preset).
    #[arg(long)]
    scr_db: Option<f64>,
    /// Clutter kind: homogeneous, correlated-texture, bright-structures.
    #[arg(long)]
    clutter: Option<String>,
    /// Speckle looks (>= 1, or "inf" to disable).
    #[arg(long)]
    looks: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage: pretrain or finetune.
    #[arg(long)]
    stage: String,
    /// JSON pipeline config (model + train sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (containing dataset.ssar) or file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, loss curve, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Ablation: baseline, ms-only, fs-only, or full.
    #[arg(long)]
    ablation: Option<String>,
    /// Stage-1 checkpoint to initialize fine-tuning from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Allow fine-tuning without a stage-1 checkpoint.
    #[arg(long, default_value_t = false)]
    from_scratch: bool,
    /// Resume an interrupted run from the checkpoint in --out.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report file to write.
    #[arg(long)]
    out: PathBuf,
    /// Mask source: alpha or attention.
    #[arg(long, default_value = "alpha")]
    mask_source: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Identifier recorded in the report.
    #[arg(long)]
    config_id: Option<String>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sample indices.
    #[arg(long)]
    indices: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mask source for the predicted overlay.
    #[arg(long, default_value = "alpha")]
    mask_source: String,
}

/// Model + training sections of a run configuration file.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct PipelineConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(serde::Serialize)]
struct RunManifest {
    command_line: Vec<String>,
    config_hash: String,
    code_version: String,
    seed: u64,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn write_manifest(
    dir: &Path,
    config_json: &str,
    seed: u64,
    outputs: Vec<String>,
    started: u64,
) -> Result<(), Error> {
    let manifest = RunManifest {
        command_line: std::env::args().collect(),
        config_hash: sha256_hex(config_json.as_bytes()),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        outputs,
        started_unix: started,
        finished_unix: now_unix(),
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), config_json)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

fn load_pipeline_config(path: &Option<PathBuf>) -> Result<PipelineConfig, Error> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .map_err(|e| Error::Data(format!("cannot read config {}: {e}", p.display())))?;
            let cfg: PipelineConfig = serde_json::from_str(&raw)
                .map_err(|e| Error::Config(format!("bad config {}: {e}", p.display())))?;
            Ok(cfg)
        }
    }
}

fn dataset_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("dataset.ssar")
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(data: &Path) -> Result<Vec<SceneSample>, Error> {
    read_dataset(&dataset_path(data))
}

// ── gen ──────────────────────────────────────────────────────────────

fn cmd_gen(args: &GenArgs) -> Result<(), Error> {
    let started = now_unix();
    let configs: Vec<SceneConfig> = match &args.preset {
        Some(name) => {
            let preset = Preset::parse(name)?;
            preset_configs(preset, args.count, args.seed, args.size)
        }
        None => {
            let scr = args.scr_db.unwrap_or(10.0);
            let clutter = match args.clutter.as_deref() {
                None | Some("homogeneous") => ClutterKind::Homogeneous,
                Some("correlated-texture") => ClutterKind::CorrelatedTexture,
                Some("bright-structures") => ClutterKind::BrightStructures,
                Some(other) => {
                    return Err(Error::Config(format!("unknown clutter kind {other}")))
                }
            };
            let looks = match args.looks.as_deref() {
                None => 4.0,
                Some("inf") => f64::INFINITY,
                Some(v) => v
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad looks value: {e}")))?,
            };
            (0..args.count)
                .map(|idx| SceneConfig {
                    height: args.size,
                    width: args.size,
                    target_shapes: TargetShape::all(),
                    scr_db: scr,
                    clutter_kind: clutter,
                    looks,
                    seed: slotsar::seed::derive_seed_n(args.seed, "scene", idx as u64),
                })
                .collect()
        }
    };
    for c in &configs {
        c.validate()?;
    }
    let samples = generate_batch(&configs)?;
    std::fs::create_dir_all(&args.out)?;
    let out_file = args.out.join("dataset.ssar");
    write_dataset(&samples, &out_file)?;
    let hash = sha256_hex(&std::fs::read(&out_file)?);
    let gen_config = serde_json::json!({
        "preset": args.preset,
        "count": args.count,
        "seed": args.seed,
        "size": args.size,
        "scr_db": args.scr_db,
        "clutter": args.clutter,
        "looks": args.looks,
        "dataset_sha256": hash,
    });
    write_manifest(
        &args.out,
        &serde_json::to_string_pretty(&gen_config)?,
        args.seed,
        vec![out_file.display().to_string()],
        started,
    )?;
    println!("wrote {} scenes to {}", samples.len(), out_file.display());
    println!("dataset sha256 {hash}");
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let started = now_unix();
    let mut cfg = load_pipeline_config(&args.config)?;
    cfg.train.stage = match args.stage.as_str() {
        "pretrain" => Stage::Pretrain,
        "finetune" => Stage::Finetune,
        other => {
            return Err(Error::Config(format!(
                "unknown stage {other}; expected pretrain or finetune"
            )))
        }
    };
    if let Some(ablation) = &args.ablation {
        cfg.model.set_ablation(ablation)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if cfg.train.stage == Stage::Finetune && args.init.is_none() && !args.from_scratch && !args.resume
    {
        return Err(Error::Data(
            "fine-tuning requires --init <stage-1 checkpoint> (or explicit --from-scratch)"
                .to_string(),
        ));
    }
    let dataset = load_dataset(&args.data)?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(init) = &args.init {
        load_checkpoint(init, &mut model)?;
    }
    let config_json = serde_json::to_string_pretty(&cfg)?;
    let summary = train(&mut model, &dataset, &cfg.train, &args.out, args.resume)?;
    write_manifest(
        &args.out,
        &config_json,
        cfg.train.seed,
        vec![
            summary.checkpoint.display().to_string(),
            args.out.join("loss.csv").display().to_string(),
        ],
        started,
    )?;
    println!(
        "trained {} steps (final step {}), final loss {}",
        summary.steps_run, summary.final_step, summary.final_loss
    );
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let started = now_unix();
    let cfg = load_pipeline_config(&args.config)?;
    let mask_source = MaskSource::parse(&args.mask_source)?;
    let dataset = load_dataset(&args.data)?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    load_checkpoint(&args.checkpoint, &mut model)?;
    let config_id = args.config_id.clone().unwrap_or_else(|| {
        format!(
            "{}-{}-{}",
            cfg.model.ablation_tag(),
            mask_source.name(),
            cfg.train.seed
        )
    });
    let report = evaluate(
        &model,
        &dataset,
        &EvalOptions {
            mask_source,
            config_id,
            eval_seed: 12345,
            precision: Precision::F64,
        },
    )?;
    report.write(&args.out)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            write_manifest(
                dir,
                &serde_json::to_string_pretty(&cfg)?,
                cfg.train.seed,
                vec![args.out.display().to_string()],
                started,
            )?;
        }
    }
    println!(
        "ari {:.4} mbo {:.4} miou {:.4} over {} scenes -> {}",
        report.ari,
        report.mbo,
        report.miou,
        report.n_scenes,
        args.out.display()
    );
    Ok(())
}

// ── viz ──────────────────────────────────────────────────────────────

fn gray_of_image(image: &Tensor) -> Vec<u8> {
    let max = image.data().iter().cloned().fold(f64::MIN, f64::max);
    let min = image.data().iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-12);
    image
        .data()
        .iter()
        .map(|&v| (255.0 * (v - min) / span).round() as u8)
        .collect()
}

fn overlay(gray: &[u8], mask: &LabelMap, color: [u8; 3]) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(gray.len() * 3);
    for (k, &g) in gray.iter().enumerate() {
        if mask.labels[k] != 0 {
            rgb.push(((g as u16 + color[0] as u16) / 2) as u8);
            rgb.push(((g as u16 + color[1] as u16) / 2) as u8);
            rgb.push(((g as u16 + color[2] as u16) / 2) as u8);
        } else {
            rgb.push(g);
            rgb.push(g);
            rgb.push(g);
        }
    }
    rgb
}

fn heatmap_pgm(row: &[f64], side: usize, h: usize, w: usize) -> Vec<u8> {
    let up = slotsar::numerics::ops::bilinear_resize(row, side, side, h, w);
    let max = up.iter().cloned().fold(f64::MIN, f64::max);
    let min = up.iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-12);
    let gray: Vec<u8> = up
        .iter()
        .map(|&v| (255.0 * (v - min) / span).round() as u8)
        .collect();
    pgm_bytes(&gray, w, h)
}

fn cmd_viz(args: &VizArgs) -> Result<(), Error> {
    let started = now_unix();
    let cfg = load_pipeline_config(&args.config)?;
    let mask_source = MaskSource::parse(&args.mask_source)?;
    let dataset = load_dataset(&args.data)?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    load_checkpoint(&args.checkpoint, &mut model)?;
    let indices: Vec<usize> = args
        .indices
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad index {s}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    std::fs::create_dir_all(&args.out)?;
    let side = model.config.token_side();
    let n = model.config.tokens;
    let mut outputs = Vec::new();
    for &idx in &indices {
        let sample = dataset.get(idx).ok_or_else(|| {
            Error::Data(format!(
                "sample index {idx} out of range (dataset has {})",
                dataset.len()
            ))
        })?;
        let fwd = model.forward(
            &sample.image,
            &format!("{idx:06}"),
            &ForwardOptions {
                train: false,
                stage2: true,
                slot_seed: slotsar::seed::derive_seed_n(12345, "eval-slots", idx as u64),
                precision: Precision::F64,
            },
        )?;
        let (h, w) = (sample.image.rows(), sample.image.cols());
        let gray = gray_of_image(&sample.image);
        let mut emit = |name: String, bytes: Vec<u8>| -> Result<(), Error> {
            let path = args.out.join(&name);
            std::fs::write(&path, bytes)?;
            outputs.push(path.display().to_string());
            Ok(())
        };
        emit(format!("s{idx:04}_input.pgm"), pgm_bytes(&gray, w, h))?;
        emit(
            format!("s{idx:04}_gt_overlay.ppm"),
            ppm_bytes(&overlay(&gray, &sample.mask, [255, 0, 0]), w, h),
        )?;
        // predicted mask via the same code path the metrics use
        let map = match mask_source {
            MaskSource::Alpha => fwd.graph.value(fwd.alpha).clone(),
            MaskSource::Attention => fwd
                .graph
                .value(fwd.iters.last().expect("at least one iteration").a)
                .clone(),
        };
        let pred = match mask_source {
            MaskSource::Alpha => slotsar::metrics::masks_from_alpha(&map, h, w)?,
            MaskSource::Attention => slotsar::metrics::masks_from_attention(&map, h, w)?,
        };
        emit(
            format!("s{idx:04}_pred_overlay.ppm"),
            ppm_bytes(&overlay(&gray, &pred, [255, 255, 0]), w, h),
        )?;
        for (t, iter) in fwd.iters.iter().enumerate() {
            let a = fwd.graph.value(iter.a);
            for slot in 0..2 {
                let row = &a.data()[slot * n..(slot + 1) * n];
                emit(
                    format!("s{idx:04}_attn_t{}_slot{slot}.pgm", t + 1),
                    heatmap_pgm(row, side, h, w),
                )?;
            }
        }
    }
    write_manifest(
        &args.out,
        &serde_json::to_string_pretty(&cfg)?,
        cfg.train.seed,
        outputs,
        started,
    )?;
    println!("wrote visualizations for {} samples to {}", indices.len(), args.out.display());
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Param(_) => 2,
        Error::Data(_) | Error::Corrupt { .. } | Error::Io(_) | Error::Json(_) => 3,
        Error::Numeric(_) | Error::NonFinite { .. } | Error::Shape { .. } => 4,
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("SLOTSAR_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Viz(args) => cmd_viz(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
