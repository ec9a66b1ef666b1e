//! `footprint`: batch command-line surface for the building-footprint
//! pipeline. Every command writes one `manifest.json` into its output
//! directory and exits nonzero iff the manifest records failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod data;
mod infer;
mod manifest;
mod report;
mod train;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "footprint", version, about = "Building-footprint segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, serde::Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Write a synthetic corpus of rectangle scenes in the images/ + gt/ layout.
    Synth(data::SynthArgs),
    /// Populate the sample cache with patches or tiles.
    Prepare(data::PrepareArgs),
    /// Class pixel statistics and effective-number weights.
    Stats(data::StatsArgs),
    /// Train one model from a run configuration.
    Train(train::TrainArgs),
    /// Score a checkpoint on its validation split.
    Evaluate(train::EvaluateArgs),
    /// Learning-rate range test.
    LrFind(train::LrFindArgs),
    /// Tile, predict and stitch whole scenes into probability rasters.
    Predict(infer::PredictArgs),
    /// Merge probability rasters by maximum confidence and threshold.
    Ensemble(infer::EnsembleArgs),
    /// Metric tables and static plots from run directories.
    Report(report::ReportArgs),
    /// Download a satellite raster from a static-map service.
    FetchMap(data::FetchMapArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Prepare(_) => "prepare",
            Command::Stats(_) => "stats",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::LrFind(_) => "lr-find",
            Command::Predict(_) => "predict",
            Command::Ensemble(_) => "ensemble",
            Command::Report(_) => "report",
            Command::FetchMap(_) => "fetch-map",
        }
    }
}

/// State shared by a command and the manifest writer.
pub struct Ctx {
    pub manifest: RunManifest,
    /// Where the manifest goes; commands may set it once resolved.
    pub out: Option<PathBuf>,
}

fn run(command: &Command, ctx: &mut Ctx) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => data::synth(a, ctx),
        Command::Prepare(a) => data::prepare(a, ctx),
        Command::Stats(a) => data::stats(a, ctx),
        Command::Train(a) => train::train(a, ctx),
        Command::Evaluate(a) => train::evaluate(a, ctx),
        Command::LrFind(a) => train::lr_find(a, ctx),
        Command::Predict(a) => infer::predict(a, ctx),
        Command::Ensemble(a) => infer::ensemble(a, ctx),
        Command::Report(a) => report::report(a, ctx),
        Command::FetchMap(a) => data::fetch_map(a, ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut manifest = RunManifest::start(cli.command.name());
    manifest.config = serde_json::json!({ "args": &cli.command });
    let mut ctx = Ctx { manifest, out: None };
    if let Err(e) = run(&cli.command, &mut ctx) {
        eprintln!("error: {e:#}");
        ctx.manifest.failures.push(format!("{e:#}"));
    }
    for f in &ctx.manifest.failures {
        log::warn!("failure: {f}");
    }
    if let Some(out) = ctx.out.clone() {
        match ctx.manifest.write(&out) {
            Ok(path) => log::info!("manifest written to {}", path.display()),
            Err(e) => {
                eprintln!("error: could not write manifest: {e:#}");
                return ExitCode::FAILURE;
            }
        }
    }
    if ctx.manifest.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
