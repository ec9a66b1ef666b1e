//! Data commands: synth, prepare, stats, fetch-map.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use footprint_core::config::RunConfig;
use footprint_core::dataset::staticmap::{MapRequest, StaticMapClient};
use footprint_core::dataset::stats::{count_pixels, ClassStats};
use footprint_core::dataset::synthetic::{generate_corpus, write_corpus, SyntheticConfig};
use footprint_core::dataset::{load_dataset_index, read_mask, write_rgb};
use footprint_core::pipeline::{self, DataConfig, SampleMode};

use crate::Ctx;

#[derive(Args, Serialize)]
pub struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Side length of each square scene.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Half-width of the uniform pixel noise.
    #[arg(long, default_value_t = 18.0)]
    pub noise: f32,
}

pub fn synth(a: &SynthArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.out = Some(a.out.clone());
    let cfg = SyntheticConfig { size: a.size, noise: a.noise, ..Default::default() };
    if cfg.size < cfg.max_side + 2 {
        bail!("scene size {} is too small for buildings up to {} px", cfg.size, cfg.max_side);
    }
    let corpus = generate_corpus(&cfg, a.count, a.seed)?;
    write_corpus(&a.out, &corpus)?;
    ctx.manifest.outputs_under(&a.out)?;
    ctx.manifest.summary = json!({ "scenes": corpus.len(), "synthetic": cfg });
    println!("wrote {} scenes to {}", corpus.len(), a.out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Patches,
    Tiles,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Patches => SampleMode::Patches,
            ModeArg::Tiles => SampleMode::Tiles,
        }
    }
}

/// Flags shared by commands that resolve a data configuration. Explicit
/// flags override the `data` section of `--config`.
#[derive(Args, Serialize)]
pub struct DataArgs {
    /// Run configuration whose `data` section is the starting point.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding images/ and gt/.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Patches per scene (patch mode).
    #[arg(long)]
    pub count: Option<usize>,
    /// Patch sampler seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub resize_to: Option<usize>,
    /// Side length of resized patches (patch mode).
    #[arg(long)]
    pub output_size: Option<usize>,
}

impl DataArgs {
    pub fn resolve(&self) -> Result<DataConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?.data,
            None => DataConfig::default(),
        };
        if let Some(v) = &self.root {
            cfg.root = v.clone();
        }
        if let Some(v) = &self.cache_dir {
            cfg.cache_dir = v.clone();
        }
        if let Some(v) = self.mode {
            cfg.mode = v.into();
        }
        if let Some(v) = self.count {
            cfg.patches_per_scene = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.tile_size {
            cfg.tile_size = v;
        }
        if let Some(v) = self.resize_to {
            cfg.resize_to = v;
        }
        if let Some(v) = self.output_size {
            cfg.sampler.output_size = v;
        }
        let problems = cfg.problems();
        if !problems.is_empty() {
            bail!("invalid data configuration:\n  - {}", problems.join("\n  - "));
        }
        Ok(cfg)
    }
}

#[derive(Args, Serialize)]
pub struct PrepareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
}

pub fn prepare(a: &PrepareArgs, ctx: &mut Ctx) -> Result<()> {
    let cfg = a.data.resolve()?;
    ctx.out = Some(cfg.cache_dir.clone());
    ctx.manifest.config_path = a.data.config.clone();
    ctx.manifest.config["data"] = serde_json::to_value(&cfg)?;
    ctx.manifest.inputs.push(cfg.root.clone());
    let report = prepare_and_record(&cfg, ctx)?;
    let path = cfg.cache_dir.join("prepare-report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&ctx.manifest.summary)?)?;
    ctx.manifest.output(&path)?;
    println!(
        "{} scenes, {} cache entries, {} new, {} failed",
        report.scenes,
        report.entries,
        report.new_entries,
        report.failed.len()
    );
    Ok(())
}

/// Runs cache preparation and records failed scenes in the manifest.
pub fn prepare_and_record(cfg: &DataConfig, ctx: &mut Ctx) -> Result<pipeline::PrepareReport> {
    let report = pipeline::prepare(cfg)?;
    for f in &report.failed {
        ctx.manifest.failures.push(format!("scene {}: {}", f.scene, f.reason));
    }
    ctx.manifest.summary = json!({
        "scenes": report.scenes,
        "entries": report.entries,
        "new_entries": report.new_entries,
        "failed": report.failed.iter().map(|f| json!({ "scene": f.scene, "reason": f.reason })).collect::<Vec<_>>(),
    });
    Ok(report)
}

#[derive(Args, Serialize)]
pub struct StatsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Effective-number beta; defaults to the configuration's class_beta.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn stats(a: &StatsArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.out = Some(a.out.clone());
    let cfg = a.data.resolve()?;
    ctx.manifest.config_path = a.data.config.clone();
    ctx.manifest.inputs.push(cfg.root.clone());
    let beta = a.beta.unwrap_or(cfg.class_beta);
    let index = load_dataset_index(&cfg.root)?;
    for r in &index.rejected {
        ctx.manifest.failures.push(format!("{}: {}", r.path.display(), r.reason));
    }
    let mut total = [0u64; 2];
    let mut per_scene = Vec::new();
    for d in &index.descriptors {
        let Some(mask_path) = &d.mask_path else { continue };
        let c = count_pixels(read_mask(mask_path)?.view());
        total[0] += c[0];
        total[1] += c[1];
        per_scene.push(json!({ "scene": d.scene_id, "city": d.city, "background": c[0], "building": c[1] }));
    }
    if per_scene.is_empty() {
        bail!("no labelled scenes under {}", cfg.root.display());
    }
    let stats = ClassStats::from_counts(total, beta)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("class_stats.json");
    let body = json!({ "stats": stats, "scenes": per_scene });
    std::fs::write(&path, serde_json::to_string_pretty(&body)?)?;
    ctx.manifest.output(&path)?;
    ctx.manifest.summary = json!(stats);
    println!(
        "background {} px ({:.4}), building {} px ({:.4}); effective numbers {:.3e} / {:.3e}; weights {:.4} / {:.4}",
        stats.pixel_count[0],
        stats.fraction[0],
        stats.pixel_count[1],
        stats.fraction[1],
        stats.effective_number[0],
        stats.effective_number[1],
        stats.weight[0],
        stats.weight[1]
    );
    Ok(())
}

#[derive(Args, Serialize)]
pub struct FetchMapArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub lat: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub lon: f64,
    #[arg(long, default_value_t = 18)]
    pub zoom: u8,
    #[arg(long, default_value_t = 640)]
    pub size: u32,
    /// Service endpoint; the key is read from STATICMAP_API_KEY.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn fetch_map(a: &FetchMapArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.out = Some(a.out.clone());
    let client = StaticMapClient::from_env(a.base_url.as_deref())?;
    let req = MapRequest { lat: a.lat, lon: a.lon, zoom: a.zoom, size: a.size };
    let image = client.fetch(&req).context("fetching static map")?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join(map_file_name(&req));
    write_rgb(&path, &image)?;
    ctx.manifest.output(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn map_file_name(r: &MapRequest) -> String {
    format!("map_{:.6}_{:.6}_z{}_{}.png", r.lat, r.lon, r.zoom, r.size)
}

/// Scene id of an image path: its file stem.
pub fn scene_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
