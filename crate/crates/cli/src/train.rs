//! Model commands: train, evaluate, lr-find.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use footprint_core::config::RunConfig;
use footprint_core::dataset::load_dataset_index;
use footprint_core::dataset::stats::ClassStats;
use footprint_core::losses::{ClassWeights, WeightSource};
use footprint_core::models::{build_model, ModelConfig};
use footprint_core::pipeline::{load_split, SplitData};
use footprint_core::training::{self, load_checkpoint, Checkpoint, EvalOptions, FitOptions, ModelProbe};

use crate::data::prepare_and_record;
use crate::Ctx;

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run directory; defaults to runs/<config name>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Dataset-level class weights when the loss asks for them.
pub fn class_weights(cfg: &RunConfig, split: &SplitData) -> Result<Option<ClassWeights>> {
    Ok(match cfg.train.loss.weights {
        WeightSource::ClassStats { beta } => Some(ClassStats::from_counts(split.class_stats.pixel_count, beta)?.weights()),
        _ => None,
    })
}

/// Names every architectural field on which two model configurations
/// differ. Seeds and pretraining sources are ignored.
pub fn architecture_mismatch(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |name: &str, x: String, y: String| {
        if x != y {
            out.push(format!("{name}: {x} vs {y}"));
        }
    };
    check("variant", a.variant.name().into(), b.variant.name().into());
    check("base_channels", a.base_channels.to_string(), b.base_channels.to_string());
    check("encoder_depth", a.encoder_depth.to_string(), b.encoder_depth.to_string());
    check("block_counts", format!("{:?}", a.block_counts), format!("{:?}", b.block_counts));
    check("num_classes", a.num_classes.to_string(), b.num_classes.to_string());
    check("head", format!("{:?}", a.head), format!("{:?}", b.head));
    check("scse_reduction", a.scse_reduction.to_string(), b.scse_reduction.to_string());
    check("scse_combine", format!("{:?}", a.scse_combine), format!("{:?}", b.scse_combine));
    out
}

fn load_data(cfg: &RunConfig, ctx: &mut Ctx) -> Result<SplitData> {
    prepare_and_record(&cfg.data, ctx)?;
    let index = load_dataset_index(&cfg.data.root)?;
    Ok(load_split(&cfg.data, &index)?)
}

pub fn train(a: &TrainArgs, ctx: &mut Ctx) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let out = a.out.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    ctx.out = Some(out.clone());
    ctx.manifest.config_path = Some(a.config.clone());
    ctx.manifest.config["run"] = serde_json::to_value(&cfg)?;
    ctx.manifest.inputs.push(a.config.clone());
    ctx.manifest.inputs.push(cfg.data.root.clone());
    let resume = match &a.resume {
        Some(p) => {
            ctx.manifest.inputs.push(p.clone());
            let ck = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let diff = architecture_mismatch(&cfg.model, &ck.meta.model_config);
            if !diff.is_empty() {
                bail!("checkpoint {} does not match the configured model: {}", p.display(), diff.join(", "));
            }
            Some(ck)
        }
        None => None,
    };

    let split = load_data(&cfg, ctx)?;
    log::info!(
        "{} training items from {} scenes, {} validation items from {} scenes",
        split.train.len(),
        split.train_scenes.len(),
        split.val.len(),
        split.val_scenes.len()
    );
    std::fs::create_dir_all(&out)?;
    cfg.save(&out.join("config.json"))?;
    std::fs::write(
        out.join("split.json"),
        serde_json::to_string_pretty(&json!({
            "train_scenes": split.train_scenes,
            "val_scenes": split.val_scenes,
            "class_stats": split.class_stats,
        }))?,
    )?;
    let mut model = build_model(&cfg.model)?;
    log::info!("{} with {} parameters", cfg.model.variant.name(), model.num_parameters());
    let opts = FitOptions {
        run_dir: Some(&out),
        resume: resume.as_ref(),
        class_weights: class_weights(&cfg, &split)?,
        normalization: cfg.data.normalization,
        config_echo: serde_json::to_value(&cfg)?,
    };
    let outcome = training::fit(&mut model, &split.train, &split.val, &cfg.train, opts)?;
    let summary = json!({
        "monitor": outcome.monitor,
        "best_epoch": outcome.best_epoch,
        "best_metric": outcome.best_metric,
        "best_checkpoint": outcome.best_checkpoint,
        "checkpoints": outcome.checkpoints,
        "steps": outcome.steps,
        "stopped_early": outcome.stopped_early,
        "history": outcome.history,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    ctx.manifest.summary = summary;
    ctx.manifest.outputs_under(&out)?;
    match (&outcome.best_checkpoint, outcome.best_metric) {
        (Some(path), Some(m)) => println!("best {} {:.6} at {}", outcome.monitor, m, path.display()),
        _ => println!("no checkpoint written: {} never improved", outcome.monitor),
    }
    Ok(())
}

/// Configuration for a checkpoint: `--config` when given (checked for
/// architectural agreement), else the configuration stored inside it.
pub fn config_for(ck: &Checkpoint, path: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    match explicit {
        Some(p) => {
            let cfg = load_config(p)?;
            let diff = architecture_mismatch(&cfg.model, &ck.meta.model_config);
            if !diff.is_empty() {
                bail!("checkpoint {} does not match {}: {}", path.display(), p.display(), diff.join(", "));
            }
            Ok(cfg)
        }
        None => {
            let mut cfg: RunConfig = serde_json::from_value(ck.meta.config.clone())
                .with_context(|| format!("checkpoint {} carries no usable run configuration; pass --config", path.display()))?;
            cfg.model = ck.meta.model_config.clone();
            Ok(cfg)
        }
    }
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Overrides the configuration stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

pub fn evaluate(a: &EvaluateArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.out = Some(a.out.clone());
    ctx.manifest.inputs.push(a.checkpoint.clone());
    ctx.manifest.config_path = a.config.clone();
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let cfg = config_for(&ck, &a.checkpoint, a.config.as_deref())?;
    ctx.manifest.config["run"] = serde_json::to_value(&cfg)?;
    let model = ck.restore_model()?;
    let split = load_data(&cfg, ctx)?;
    let opts = EvalOptions {
        batch_size: a.batch_size,
        loss: Some(&cfg.train.loss),
        class_weights: class_weights(&cfg, &split)?,
        samples: 0,
        pr_thresholds: cfg.train.pr_thresholds,
    };
    let ev = training::evaluate(&model, &split.val, &opts)?;
    std::fs::create_dir_all(&a.out)?;
    let metrics = a.out.join("metrics.json");
    let body = json!({
        "checkpoint": a.checkpoint,
        "epoch": ck.meta.epoch,
        "val_scenes": split.val_scenes,
        "loss": ev.mean_loss,
        "report": ev.report,
    });
    std::fs::write(&metrics, serde_json::to_string_pretty(&body)?)?;
    ctx.manifest.output(&metrics)?;
    let pr = a.out.join("pr.csv");
    let mut text = String::from("threshold,precision,recall\n");
    for p in &ev.report.pr_points {
        text.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    std::fs::write(&pr, text)?;
    ctx.manifest.output(&pr)?;
    ctx.manifest.summary = json!({ "accuracy": ev.report.accuracy, "iou": ev.report.iou, "f1": ev.report.f1, "loss": ev.mean_loss });
    println!(
        "accuracy {:.4}  iou {:.4}  f1 {:.4}  loss {}",
        ev.report.accuracy,
        ev.report.iou,
        ev.report.f1,
        ev.mean_loss.map_or("-".into(), |l| format!("{l:.4}"))
    );
    Ok(())
}

#[derive(Args, Serialize)]
pub struct LrFindArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-7)]
    pub min_lr: f64,
    #[arg(long, default_value_t = 10.0)]
    pub max_lr: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
}

pub fn lr_find(a: &LrFindArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.out = Some(a.out.clone());
    ctx.manifest.config_path = Some(a.config.clone());
    let cfg = load_config(&a.config)?;
    ctx.manifest.config["run"] = serde_json::to_value(&cfg)?;
    let split = load_data(&cfg, ctx)?;
    let model = build_model(&cfg.model)?;
    let mut probe = ModelProbe::new(&model, &split.train, &cfg.train, class_weights(&cfg, &split)?)?;
    let result = training::lr_find(&mut probe, a.min_lr, a.max_lr, a.steps)?;
    std::fs::create_dir_all(&a.out)?;
    let json_path = a.out.join("lr_find.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&result)?)?;
    let svg = a.out.join("lr_find.svg");
    crate::report::plot_lr_find(&result, &svg)?;
    ctx.manifest.output(&json_path)?;
    ctx.manifest.output(&svg)?;
    ctx.manifest.summary = json!({ "suggestion": result.suggestion, "points": result.lrs.len(), "stopped_early": result.stopped_early });
    println!("suggested max lr {:.3e} ({} points)", result.suggestion, result.lrs.len());
    Ok(())
}
