//! Metric tables and static SVG plots from training run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use plotters::prelude::*;
use serde::Serialize;
use serde_json::json;

use footprint_core::training::events::{read_events, series};
use footprint_core::training::{LrFindResult, Split};

use crate::Ctx;

#[derive(Args, Serialize)]
pub struct ReportArgs {
    /// A run directory, or a directory of run directories.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// One row of a run's `metrics.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PrRow {
    pub epoch: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

pub struct Run {
    pub name: String,
    pub dir: PathBuf,
    pub rows: Vec<EpochRow>,
    pub pr: Vec<PrRow>,
}

impl Run {
    pub fn curve(&self, split: &str, metric: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .filter_map(|r| r.values.get(metric).map(|&v| (r.epoch as f64, v)))
            .collect()
    }

    fn best(&self, split: &str, metric: &str) -> Option<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .filter_map(|r| r.values.get(metric).filter(|v| v.is_finite()).map(|&v| (r.epoch, v)))
            .fold(None, |acc, (e, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((e, v)),
            })
    }
}

fn read_table(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else { return Ok(Vec::new()) };
    let cols: Vec<&str> = header.split(',').collect();
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols.len() {
                bail!("{} line {}: expected {} fields, got {}", path.display(), i + 2, cols.len(), cells.len());
            }
            Ok(cols.iter().zip(cells).map(|(c, v)| (c.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<f64> {
    let v = row.get(key).with_context(|| format!("{}: missing column {key}", path.display()))?;
    v.parse().with_context(|| format!("{}: bad {key} value {v:?}", path.display()))
}

pub fn load_run(dir: &Path) -> Result<Run> {
    let metrics = dir.join("metrics.csv");
    let mut rows = Vec::new();
    for r in read_table(&metrics)? {
        let epoch = num(&r, "epoch", &metrics)? as usize;
        let split = r.get("split").cloned().unwrap_or_default();
        let mut values = BTreeMap::new();
        for (k, v) in &r {
            if k != "epoch" && k != "split" {
                if let Ok(x) = v.parse::<f64>() {
                    values.insert(k.clone(), x);
                }
            }
        }
        rows.push(EpochRow { epoch, split, values });
    }
    let pr_path = dir.join("pr.csv");
    let mut pr = Vec::new();
    if pr_path.exists() {
        for r in read_table(&pr_path)? {
            pr.push(PrRow {
                epoch: num(&r, "epoch", &pr_path)? as usize,
                threshold: num(&r, "threshold", &pr_path)?,
                precision: num(&r, "precision", &pr_path)?,
                recall: num(&r, "recall", &pr_path)?,
            });
        }
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    Ok(Run { name, dir: dir.to_path_buf(), rows, pr })
}

/// `dir` itself when it holds a `metrics.csv`, else its immediate
/// subdirectories that do, sorted by name.
pub fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("metrics.csv").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.join("metrics.csv").is_file() {
            found.push(p);
        }
    }
    found.sort();
    Ok(found)
}

const METRICS: [&str; 4] = ["loss", "accuracy", "iou", "f1"];

pub fn report(a: &ReportArgs, ctx: &mut Ctx) -> Result<()> {
    ctx.out = Some(a.out.clone());
    let dirs = discover_runs(&a.runs)?;
    if dirs.is_empty() {
        bail!("no runs (directories with metrics.csv) under {}", a.runs.display());
    }
    let mut runs = Vec::new();
    for d in &dirs {
        ctx.manifest.inputs.push(d.clone());
        match load_run(d) {
            Ok(r) if r.rows.is_empty() => ctx.manifest.failures.push(format!("{}: metrics.csv has no rows", d.display())),
            Ok(r) => runs.push(r),
            Err(e) => ctx.manifest.failures.push(format!("{e:#}")),
        }
    }
    if runs.is_empty() {
        bail!("no readable runs under {}", a.runs.display());
    }
    std::fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();

    let mut curves = String::from("run,epoch,split,loss,accuracy,iou,f1\n");
    let mut summary = String::from("run,epochs,final_train_loss,final_val_loss,best_val_accuracy,best_val_iou,best_val_f1,best_val_iou_epoch\n");
    let mut json_runs = Vec::new();
    for run in &runs {
        for r in &run.rows {
            let v = |k: &str| r.values.get(k).map_or(String::new(), |x| x.to_string());
            curves.push_str(&format!("{},{},{},{},{},{},{}\n", run.name, r.epoch, r.split, v("loss"), v("accuracy"), v("iou"), v("f1")));
        }
        let last = |split: &str, k: &str| run.curve(split, k).last().map_or(String::new(), |p| p.1.to_string());
        let best = |k: &str| run.best("val", k);
        let epochs = run.rows.iter().map(|r| r.epoch).max().unwrap_or(0);
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            run.name,
            epochs,
            last("train", "loss"),
            last("val", "loss"),
            best("accuracy").map_or(String::new(), |b| b.1.to_string()),
            best("iou").map_or(String::new(), |b| b.1.to_string()),
            best("f1").map_or(String::new(), |b| b.1.to_string()),
            best("iou").map_or(String::new(), |b| b.0.to_string()),
        ));
        json_runs.push(json!({
            "run": run.name,
            "dir": run.dir,
            "epochs": epochs,
            "best_val": METRICS.iter().filter_map(|m| best(m).map(|b| (m.to_string(), json!({"epoch": b.0, "value": b.1})))).collect::<serde_json::Map<_, _>>(),
            "rows": run.rows,
        }));

        let dir = a.out.join(&run.name);
        std::fs::create_dir_all(&dir)?;
        for m in METRICS {
            let s: Vec<(String, Vec<(f64, f64)>)> =
                ["train", "val"].iter().map(|sp| (sp.to_string(), run.curve(sp, m))).filter(|(_, c)| !c.is_empty()).collect();
            if s.is_empty() {
                continue;
            }
            let path = dir.join(format!("{m}.svg"));
            line_chart(&path, &format!("{} {m}", run.name), "epoch", m, &s, true)?;
            outputs.push(path);
        }
        if let Some(last_epoch) = run.pr.iter().map(|p| p.epoch).max() {
            let pts: Vec<(f64, f64)> = run.pr.iter().filter(|p| p.epoch == last_epoch).map(|p| (p.recall, p.precision)).collect();
            let path = dir.join("pr.svg");
            line_chart(&path, &format!("{} validation PR, epoch {last_epoch}", run.name), "recall", "precision", &[(format!("epoch {last_epoch}"), pts)], false)?;
            outputs.push(path);
        }
        let events = run.dir.join("events.csv");
        if events.is_file() {
            let ev = read_events(&events)?;
            let s: Vec<(f64, f64)> = series(&ev, Split::Train, "batch_loss").into_iter().map(|(x, y)| (x as f64, y)).collect();
            if !s.is_empty() {
                let path = dir.join("batch_loss.svg");
                line_chart(&path, &format!("{} batch loss", run.name), "step", "loss", &[("train".into(), s)], false)?;
                outputs.push(path);
            }
        }
        let lr = run.dir.join("lr_find.json");
        if lr.is_file() {
            let result: LrFindResult = serde_json::from_str(&std::fs::read_to_string(&lr)?)?;
            let path = dir.join("lr_find.svg");
            plot_lr_find(&result, &path)?;
            outputs.push(path);
        }
    }
    if runs.len() > 1 {
        for m in METRICS {
            let s: Vec<(String, Vec<(f64, f64)>)> = runs.iter().map(|r| (r.name.clone(), r.curve("val", m))).filter(|(_, c)| !c.is_empty()).collect();
            if s.is_empty() {
                continue;
            }
            let path = a.out.join(format!("compare_val_{m}.svg"));
            line_chart(&path, &format!("validation {m}"), "epoch", m, &s, true)?;
            outputs.push(path);
        }
    }
    for (name, body) in [("curves.csv", curves), ("summary.csv", summary)] {
        let path = a.out.join(name);
        std::fs::write(&path, body)?;
        outputs.push(path);
    }
    let path = a.out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json_runs)?)?;
    outputs.push(path);
    for p in &outputs {
        ctx.manifest.output(p)?;
    }
    ctx.manifest.summary = json!({ "runs": runs.iter().map(|r| &r.name).collect::<Vec<_>>(), "files": outputs.len() });
    println!("{} runs, {} files written to {}", runs.len(), outputs.len(), a.out.display());
    Ok(())
}

pub fn plot_lr_find(result: &LrFindResult, path: &Path) -> Result<()> {
    let pts = |ys: &[f64]| -> Vec<(f64, f64)> { result.lrs.iter().zip(ys).map(|(l, &y)| (l.log10(), y)).collect() };
    line_chart(
        path,
        &format!("learning-rate finder (suggestion {:.2e})", result.suggestion),
        "log10 learning rate",
        "loss",
        &[("raw".into(), pts(&result.raw_losses)), ("smoothed".into(), pts(&result.smoothed))],
        false,
    )
}

/// Renders named `(x, y)` series into an SVG file. Non-finite points are
/// skipped.
pub fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[(String, Vec<(f64, f64)>)], markers: bool) -> Result<()> {
    let finite: Vec<Vec<(f64, f64)>> =
        series.iter().map(|(_, s)| s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect()).collect();
    let all = finite.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        bail!("nothing to plot for {title}");
    }
    if x1 <= x0 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
    for (i, ((name, _), pts)) in series.iter().zip(&finite).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        if markers {
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}
