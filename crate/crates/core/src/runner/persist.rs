use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::seeds::SeedPlan;
use super::train::{prepare_tasks, run_task, RunState, TaskRecord};
use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::evaluation::{compute_summary, AccuracyMatrix, MetricsSummary};
use crate::flowdensity::{FlowModel, FlowSnapshot};
use crate::objectives::ClPluginState;
use crate::taskstream::{Dataset, TaskManifest};

pub const RUN_CHECKPOINT_SCHEMA: &str = "eraser.run/1";

/// Full run state after `completed` tasks, enough to resume or evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub schema: String,
    pub config: ExperimentConfig,
    pub seeds: SeedPlan,
    pub completed: usize,
    pub model: BackboneModel,
    pub flow: Option<FlowModel>,
    pub flow_snapshot: Option<FlowSnapshot>,
    pub cl: ClPluginState,
    pub matrix: AccuracyMatrix,
    pub records: Vec<TaskRecord>,
}

impl RunCheckpoint {
    pub fn capture(state: &RunState) -> Self {
        Self {
            schema: RUN_CHECKPOINT_SCHEMA.into(),
            config: state.config.clone(),
            seeds: state.seeds,
            completed: state.completed(),
            model: state.model.clone(),
            flow: state.flow.clone(),
            flow_snapshot: state.flow_snapshot.clone(),
            cl: state.cl.clone(),
            matrix: state.matrix.clone(),
            records: state.records.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.schema != RUN_CHECKPOINT_SCHEMA {
            return Err(Error::Format(format!("unknown checkpoint schema `{}`", ckpt.schema)));
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file and a rename, so a reader never sees a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    /// Rebuilds the live state; the task sequence is regenerated from the seeds.
    pub fn into_state(self, dataset: &Dataset) -> Result<RunState> {
        let tasks = prepare_tasks(&self.config, dataset, &self.seeds)?;
        Ok(RunState {
            config: self.config,
            seeds: self.seeds,
            tasks: std::sync::Arc::new(tasks),
            model: self.model,
            flow: self.flow,
            flow_snapshot: self.flow_snapshot,
            cl: self.cl,
            matrix: self.matrix,
            records: self.records,
        })
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Contents of `summary.json` for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub seeds: SeedPlan,
    pub metrics: MetricsSummary,
    pub tasks: Vec<TaskRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub task_id: usize,
    pub error: String,
    pub completed: usize,
}

/// Result directory of a config: `<output_dir>/<hash>`.
pub fn config_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join(config.hash())
}

pub fn seed_dir(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config_dir(config).join(format!("seed{seed}"))
}

pub fn checkpoint_path(dir: &Path, completed: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("task{completed}.json"))
}

/// Most advanced checkpoint in a seed directory.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k: usize = name.strip_prefix("task")?.strip_suffix(".json")?.parse().ok()?;
            Some((k, e.path()))
        })
        .max_by_key(|(k, _)| *k)
        .map(|(_, p)| p)
}

fn write_task_files(dir: &Path, state: &RunState, record: &TaskRecord) -> Result<()> {
    let t = record.task_id;
    let task = &state.tasks[t - 1];
    if let Some(density) = &record.density {
        density.write_csv(
            &dir.join(format!("density_task{t}.csv")),
            &task.train.noise_mask(),
            &task.train.observed_labels,
        )?;
    }
    if let Some(erasure) = &record.erasure {
        erasure.write_json(&dir.join(format!("erasure_task{t}.json")))?;
        erasure.write_activations_csv(&dir.join(format!("activations_task{t}.csv")))?;
    }
    state.matrix.write_csv(&dir.join("matrix.csv"))
}

/// Runs (or resumes) the full task sequence for one seed, writing the seed's
/// result bundle. A failing task leaves the state of the last finished task
/// on disk together with `failure.json`.
pub fn run_seed(config: &ExperimentConfig, dataset: &Dataset, seed: u64, resume: bool) -> Result<RunSummary> {
    let dir = seed_dir(config, seed);
    fs::create_dir_all(dir.join("checkpoints"))?;
    let mut state = match latest_checkpoint(&dir).filter(|_| resume) {
        Some(path) => {
            let ckpt = RunCheckpoint::load(&path)?;
            if ckpt.config.hash() != config.hash() {
                return Err(Error::Config(format!("{} belongs to a different config", path.display())));
            }
            info!("resuming seed {seed} after task {}", ckpt.completed);
            ckpt.into_state(dataset)?
        }
        None => RunState::new(config.clone(), dataset, seed)?,
    };
    let manifest = TaskManifest::new(dataset.id, state.seeds.data, config.split, &state.tasks);
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("seeds.json"), &state.seeds)?;
    if config.checkpoints && state.completed() == 0 {
        RunCheckpoint::capture(&state).save(&checkpoint_path(&dir, 0))?;
    }
    let _ = fs::remove_file(dir.join("failure.json"));
    for t in state.completed() + 1..=state.tasks.len() {
        let backup = state.clone();
        if let Err(e) = run_task(&mut state, t) {
            error!("seed {seed}, task {t} failed: {e}; rolling back");
            state = backup;
            state.matrix.write_csv(&dir.join("matrix.csv"))?;
            write_json(
                &dir.join("failure.json"),
                &FailureReport {
                    task_id: t,
                    error: e.to_string(),
                    completed: state.completed(),
                },
            )?;
            return Err(e);
        }
        let record = state.records.last().expect("task recorded").clone();
        write_task_files(&dir, &state, &record)?;
        if config.checkpoints {
            RunCheckpoint::capture(&state).save(&checkpoint_path(&dir, t))?;
        }
    }
    let summary = RunSummary {
        config_hash: config.hash(),
        seed,
        seeds: state.seeds,
        metrics: compute_summary(&state.matrix)?,
        tasks: state.records.clone(),
    };
    state.matrix.write_csv(&dir.join("matrix.csv"))?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub a1: Stat,
    pub a2: Stat,
    pub f: Stat,
    pub s: Stat,
}

impl Aggregate {
    pub fn from_summaries(summaries: &[RunSummary]) -> Option<Self> {
        let first = summaries.first()?;
        let pick = |f: fn(&MetricsSummary) -> f64| Stat::of(&summaries.iter().map(|s| f(&s.metrics)).collect::<Vec<_>>());
        Some(Self {
            config_hash: first.config_hash.clone(),
            seeds: summaries.iter().map(|s| s.seed).collect(),
            a1: pick(|m| m.a1),
            a2: pick(|m| m.a2),
            f: pick(|m| m.f),
            s: pick(|m| m.s),
        })
    }
}

/// Runs every configured seed. Seeds that fail are reported and skipped; the
/// first failure is returned after the remaining seeds have run.
pub fn run_experiment(config: &ExperimentConfig, resume: bool) -> Result<(Vec<RunSummary>, Option<Aggregate>)> {
    config.validate()?;
    let dataset = Dataset::load(config.dataset, &config.data_dir)?;
    let dir = config_dir(config);
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), config)?;
    let mut summaries = Vec::new();
    let mut first_err = None;
    for &seed in &config.seeds {
        match run_seed(config, &dataset, seed, resume) {
            Ok(s) => {
                info!("seed {seed}: A1 {:.2} A2 {:.2} F {:.2} S {:.2}", s.metrics.a1, s.metrics.a2, s.metrics.f, s.metrics.s);
                summaries.push(s);
            }
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let aggregate = Aggregate::from_summaries(&summaries);
    if let Some(a) = &aggregate {
        write_json(&dir.join("aggregate.json"), a)?;
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok((summaries, aggregate)),
    }
}
