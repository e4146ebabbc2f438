use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::persist::{latest_checkpoint, RunCheckpoint, RunSummary, Stat};
use crate::error::{Error, Result};
use crate::taskstream::Dataset;

const HIST_BINS: usize = 20;

/// Seed directories (`seed<k>`) under a config result directory, by seed.
pub fn seed_dirs(dir: &Path) -> Result<BTreeMap<u64, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix("seed").and_then(|s| s.parse().ok()) {
            if e.path().is_dir() {
                out.insert(seed, e.path());
            }
        }
    }
    Ok(out)
}

pub fn load_summary(seed_dir: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(seed_dir.join("summary.json"))?)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub lower: f64,
    pub upper: f64,
    pub clean: usize,
    pub noisy: usize,
}

/// Equal-width histogram of scores split by the noisy flag.
pub fn density_histogram(scores: &[f64], noisy: &[bool], bins: usize) -> Vec<HistogramRow> {
    if scores.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut rows: Vec<HistogramRow> = (0..bins)
        .map(|b| HistogramRow {
            lower: lo + b as f64 * width,
            upper: lo + (b + 1) as f64 * width,
            ..Default::default()
        })
        .collect();
    for (&s, &n) in scores.iter().zip(noisy) {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        if n {
            rows[b].noisy += 1;
        } else {
            rows[b].clean += 1;
        }
    }
    rows
}

fn read_density_csv(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut scores, mut noisy) = (Vec::new(), Vec::new());
    for row in r.records() {
        let row = row?;
        let parse = |i: usize| -> Result<&str> {
            row.get(i).ok_or_else(|| Error::Format(format!("{}: short row", path.display())))
        };
        scores.push(
            parse(1)?
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad score", path.display())))?,
        );
        noisy.push(parse(3)? == "1");
    }
    Ok((scores, noisy))
}

/// Top-`k` principal axes of the rows of `x` (centred), by power iteration
/// with deflation on the covariance matrix.
pub fn principal_axes(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    let c = x - &mean;
    let mut cov = c.t().dot(&c) / (x.nrows().max(2) - 1) as f64;
    let mut axes = Array2::zeros((k.min(d), d));
    for j in 0..k.min(d) {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + (i + j) as f64 * 0.01);
        for _ in 0..500 {
            let w = cov.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w / norm;
        }
        let lambda = v.dot(&cov.dot(&v));
        let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        cov = cov - outer * lambda;
        axes.row_mut(j).assign(&v);
    }
    axes
}

/// Renders the report for a config result directory and writes
/// `report_metrics.csv`, `density_hist_task<t>.csv` and, when the dataset is
/// available, `projection_task<t>.csv` into every seed directory.
pub fn report(dir: &Path) -> Result<String> {
    let seeds = seed_dirs(dir)?;
    if seeds.is_empty() {
        return Err(Error::Config(format!("{} holds no seed directories", dir.display())));
    }
    let mut text = String::new();
    let mut w = csv::Writer::from_path(dir.join("report_metrics.csv"))?;
    w.write_record(["seed", "a1", "a2", "f", "s"])?;
    let _ = writeln!(text, "{:>8} {:>8} {:>8} {:>8} {:>8}", "seed", "A1", "A2", "F", "S");
    let mut cols: [Vec<f64>; 4] = Default::default();
    for (&seed, sdir) in &seeds {
        let Ok(summary) = load_summary(sdir) else {
            let _ = writeln!(text, "{seed:>8} (incomplete)");
            continue;
        };
        let m = &summary.metrics;
        for (c, v) in cols.iter_mut().zip([m.a1, m.a2, m.f, m.s]) {
            c.push(v);
        }
        w.write_record([seed.to_string(), m.a1.to_string(), m.a2.to_string(), m.f.to_string(), m.s.to_string()])?;
        let _ = writeln!(text, "{seed:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2}", m.a1, m.a2, m.f, m.s);
        write_seed_artifacts(sdir, &summary)?;
    }
    w.flush()?;
    if !cols[0].is_empty() {
        let stats: Vec<Stat> = cols.iter().map(|c| Stat::of(c)).collect();
        let _ = writeln!(
            text,
            "{:>8} {}",
            "mean",
            stats
                .iter()
                .map(|s| format!("{:>5.2}±{:<4.2}", s.mean, s.std))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    Ok(text)
}

fn write_seed_artifacts(sdir: &Path, summary: &RunSummary) -> Result<()> {
    for rec in &summary.tasks {
        let t = rec.task_id;
        let density = sdir.join(format!("density_task{t}.csv"));
        if density.exists() {
            let (scores, noisy) = read_density_csv(&density)?;
            let mut w = csv::Writer::from_path(sdir.join(format!("density_hist_task{t}.csv")))?;
            for row in density_histogram(&scores, &noisy, HIST_BINS) {
                w.serialize(row)?;
            }
            w.flush()?;
        }
    }
    let Some(ckpt_path) = latest_checkpoint(sdir) else { return Ok(()) };
    let ckpt = RunCheckpoint::load(&ckpt_path)?;
    let Ok(dataset) = Dataset::load(ckpt.config.dataset, &ckpt.config.data_dir) else {
        log::warn!("dataset unavailable, skipping projections for {}", sdir.display());
        return Ok(());
    };
    let completed = ckpt.completed;
    let state = ckpt.into_state(&dataset)?;
    for task in state.tasks.iter().take(completed) {
        let feats = state.model.features(task.test.all_inputs().view())?;
        let axes = principal_axes(&feats, 2);
        let proj = feats.dot(&axes.t());
        let mut w = csv::Writer::from_path(sdir.join(format!("projection_task{}.csv", task.task_id)))?;
        w.write_record(["x", "y", "label"])?;
        for (i, row) in proj.rows().into_iter().enumerate() {
            let y = row.get(1).copied().unwrap_or(0.0);
            w.write_record([row[0].to_string(), y.to_string(), task.test.true_labels[i].to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub seed: u64,
    pub a1: f64,
    pub a2: f64,
    pub f: f64,
    pub s: f64,
}

/// Paired per-seed differences `B − A` over the seeds present in both directories.
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<(Vec<DeltaRow>, String)> {
    let a = seed_dirs(dir_a)?;
    let b = seed_dirs(dir_b)?;
    let mut rows = Vec::new();
    for (seed, pa) in &a {
        let Some(pb) = b.get(seed) else { continue };
        let (Ok(sa), Ok(sb)) = (load_summary(pa), load_summary(pb)) else { continue };
        let (ma, mb) = (&sa.metrics, &sb.metrics);
        rows.push(DeltaRow {
            seed: *seed,
            a1: mb.a1 - ma.a1,
            a2: mb.a2 - ma.a2,
            f: mb.f - ma.f,
            s: mb.s - ma.s,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config("no seeds completed in both directories".into()));
    }
    let mut text = format!("{:>8} {:>8} {:>8} {:>8} {:>8}\n", "seed", "ΔA1", "ΔA2", "ΔF", "ΔS");
    for r in &rows {
        let _ = writeln!(text, "{:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2}", r.seed, r.a1, r.a2, r.f, r.s);
    }
    let mean = |f: fn(&DeltaRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let _ = writeln!(
        text,
        "{:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
        "mean",
        mean(|r| r.a1),
        mean(|r| r.a2),
        mean(|r| r.f),
        mean(|r| r.s)
    );
    Ok((rows, text))
}
