//! Inference commands: predict and ensemble.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use footprint_core::dataset::{read_rgb, write_mask};
use footprint_core::fusion::{
    classical_segment, confidence_threshold, ensemble_merge, polygonize, read_probability_mask, superpixel_fuse,
    write_probability_mask, ClassicalMethod, ProbabilityMask, DEFAULT_MIN_AREA,
};
use footprint_core::fusion::classical::markers_from_mask;
use footprint_core::pipeline::{predict_scene, PredictTiling};
use footprint_core::training::load_checkpoint;

use crate::data::scene_id;
use crate::train::config_for;
use crate::Ctx;

#[derive(Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene images; each yields `<scene>.f32` plus a `.json` sidecar.
    #[arg(long, num_args = 1.., required = true)]
    pub scene: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Checked against the checkpoint's architecture; supplies tiling and
    /// normalisation instead of the stored configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Identifier written to the sidecars; defaults to the run name.
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

pub fn predict(a: &PredictArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.out = Some(a.out.clone());
    ctx.manifest.config_path = a.config.clone();
    ctx.manifest.inputs.push(a.checkpoint.clone());
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let cfg = config_for(&ck, &a.checkpoint, a.config.as_deref())?;
    let model = ck.restore_model()?;
    let model_id = a.model_id.clone().unwrap_or_else(|| cfg.name.clone());
    let tiling = PredictTiling { batch_size: a.batch_size.max(1), ..PredictTiling::from_data(&cfg.data) };
    ctx.manifest.config["run"] = serde_json::to_value(&cfg)?;
    ctx.manifest.config["tiling"] = serde_json::to_value(tiling)?;
    std::fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    for path in &a.scene {
        ctx.manifest.inputs.push(path.clone());
        let id = scene_id(path);
        let result = read_rgb(path)
            .map_err(anyhow::Error::from)
            .and_then(|image| Ok(predict_scene(&model, image.view(), &tiling, &cfg.data.normalization)?));
        match result {
            Ok(mask) => {
                let raster = a.out.join(format!("{id}.f32"));
                let side = write_probability_mask(&raster, &mask, &model_id, &id)?;
                ctx.manifest.output(&raster)?;
                ctx.manifest.output(&raster.with_extension("json"))?;
                log::info!("{id}: {}x{} -> {}", side.height, side.width, raster.display());
                written.push(raster);
            }
            Err(e) => ctx.manifest.failures.push(format!("scene {}: {e:#}", path.display())),
        }
    }
    ctx.manifest.summary = json!({ "model_id": model_id, "rasters": written });
    println!("wrote {} of {} probability rasters to {}", written.len(), a.scene.len(), a.out.display());
    Ok(())
}

#[derive(Args, Serialize)]
pub struct EnsembleArgs {
    /// Probability rasters of one scene, one per model.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Minimum merged building probability for a building pixel.
    #[arg(long, default_value_t = 0.75)]
    pub threshold: f32,
    #[arg(long)]
    pub out: PathBuf,
    /// Accept a single input (merge is then the identity).
    #[arg(long)]
    pub allow_single: bool,
    /// Keep superpixels of `--image` that mostly overlap the mask.
    #[arg(long)]
    pub fuse_superpixels: bool,
    /// Scene image used by superpixel fusion.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Segmentation for fusion: otsu, watershed or slic.
    #[arg(long, default_value = "slic")]
    pub method: String,
    #[arg(long, default_value_t = 0.5)]
    pub overlap_tau: f64,
    /// Write building outlines as GeoJSON-style polygons.
    #[arg(long)]
    pub polygonize: bool,
    /// Douglas-Peucker tolerance in pixels.
    #[arg(long, default_value_t = 1.0)]
    pub simplify: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    pub min_area: usize,
}

pub fn ensemble(a: &EnsembleArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.out = Some(a.out.clone());
    ctx.manifest.inputs.extend(a.inputs.iter().cloned());
    if a.inputs.len() < 2 && !a.allow_single {
        bail!("an ensemble needs at least 2 inputs (pass --allow-single to threshold one raster)");
    }
    if a.fuse_superpixels && a.image.is_none() {
        bail!("--fuse-superpixels needs --image");
    }
    let method: ClassicalMethod = a.method.parse()?;
    let mut masks: Vec<ProbabilityMask> = Vec::new();
    let mut members = Vec::new();
    for path in &a.inputs {
        let (mask, side) = read_probability_mask(path).with_context(|| format!("reading {}", path.display()))?;
        if let Some(first) = masks.first() {
            if (mask.height(), mask.width()) != (first.height(), first.width()) {
                bail!(
                    "{} is {}x{} but {} is {}x{}",
                    path.display(),
                    mask.height(),
                    mask.width(),
                    a.inputs[0].display(),
                    first.height(),
                    first.width()
                );
            }
        }
        members.push(json!({ "path": path, "model_id": side.model_id, "scene_id": side.scene_id }));
        masks.push(mask);
    }
    let merged = ensemble_merge(&masks)?;
    let mut mask = confidence_threshold(&merged, a.threshold)?;
    std::fs::create_dir_all(&a.out)?;
    let scene = members[0]["scene_id"].as_str().unwrap_or_default().to_string();
    let merged_path = a.out.join("merged.f32");
    write_probability_mask(&merged_path, &merged, "ensemble", &scene)?;
    ctx.manifest.output(&merged_path)?;
    ctx.manifest.output(&merged_path.with_extension("json"))?;
    let mask_path = a.out.join("mask.png");
    write_mask(&mask_path, &mask)?;
    ctx.manifest.output(&mask_path)?;
    let thresholded_pixels = mask.iter().filter(|&&v| v == 1).count();

    let mut fused_pixels = None;
    if a.fuse_superpixels {
        let image_path = a.image.as_ref().expect("checked above");
        ctx.manifest.inputs.push(image_path.clone());
        let image = read_rgb(image_path)?;
        if image.dim().0 != mask.dim().0 || image.dim().1 != mask.dim().1 {
            bail!("{} does not match the raster size {:?}", image_path.display(), mask.dim());
        }
        let markers = matches!(method, ClassicalMethod::Watershed).then(|| markers_from_mask(mask.view()));
        let labels = classical_segment(image.view(), &method, markers.as_ref().map(|m| m.view()))?;
        mask = superpixel_fuse(mask.view(), labels.view(), a.overlap_tau)?;
        let path = a.out.join("fused.png");
        write_mask(&path, &mask)?;
        ctx.manifest.output(&path)?;
        fused_pixels = Some(mask.iter().filter(|&&v| v == 1).count());
    }

    let mut polygons = None;
    if a.polygonize {
        let set = polygonize(mask.view(), a.simplify, a.min_area)?;
        let path = a.out.join("polygons.geojson");
        std::fs::write(&path, serde_json::to_string_pretty(&set.to_geojson())?)?;
        ctx.manifest.output(&path)?;
        polygons = Some(set.len());
    }
    ctx.manifest.summary = json!({
        "members": members,
        "threshold": a.threshold,
        "building_pixels": thresholded_pixels,
        "fused_building_pixels": fused_pixels,
        "polygons": polygons,
    });
    println!(
        "{} members, {} building pixels at threshold {}{}",
        masks.len(),
        thresholded_pixels,
        a.threshold,
        polygons.map_or(String::new(), |n| format!(", {n} polygons"))
    );
    Ok(())
}
