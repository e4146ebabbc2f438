use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Alternation, ExperimentConfig};
use super::seeds::{derive_seed, SeedPlan};
use crate::backbone::BackboneModel;
use crate::erase::{erase, unchanged_report, verify_erasure, ErasureReport, ErasureVerdict, EvalSet};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, AccuracyMatrix};
use crate::flowdensity::{FlowModel, FlowSnapshot};
use crate::identify::{quantile, score_dataset, select_representative, select_representative_per_class, DensityReport};
use crate::nn::{Adam, AdamConfig, CrossEntropy, Grads};
use crate::objectives::{distribution_guidance_loss, ClPluginState, LatentStats};
use crate::taskstream::{build_task_sequence_with, default_mapping, inject_asymmetric_noise, Dataset, NoiseSpec, TaskDataset};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub train: f64,
    pub identify: f64,
    pub erase: f64,
    pub evaluate: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.train + self.identify + self.erase + self.evaluate
    }
}

/// Everything recorded while running one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub class_set: Vec<usize>,
    pub noisy_count: usize,
    pub train_size: usize,
    pub phases: PhaseTimes,
    /// Mean classifier loss per epoch.
    pub train_loss: Vec<f64>,
    /// Mean current-batch flow NLL per epoch.
    pub flow_nll: Vec<f64>,
    #[serde(skip)]
    pub density: Option<DensityReport>,
    pub selected_count: Option<usize>,
    pub noise_precision: Option<f64>,
    #[serde(skip)]
    pub erasure: Option<ErasureReport>,
    pub erasure_verdict: Option<ErasureVerdict>,
    /// Test-feature NLL of each earlier task under the flow after this task.
    pub old_task_flow_nll: Vec<(usize, f64)>,
}

impl TaskRecord {
    /// Fraction of noisy examples among those of mapped source classes.
    pub fn base_noise_rate(&self) -> f64 {
        if self.train_size == 0 {
            0.0
        } else {
            self.noisy_count as f64 / self.train_size as f64
        }
    }
}

/// Mutable state of one seeded run over the task sequence.
#[derive(Clone, Debug)]
pub struct RunState {
    pub config: ExperimentConfig,
    pub seeds: SeedPlan,
    pub tasks: Arc<Vec<TaskDataset>>,
    pub model: BackboneModel,
    pub flow: Option<FlowModel>,
    pub flow_snapshot: Option<FlowSnapshot>,
    pub cl: ClPluginState,
    pub matrix: AccuracyMatrix,
    pub records: Vec<TaskRecord>,
}

/// Builds the task sequence for a run, with the configured noise schedule applied.
pub fn prepare_tasks(config: &ExperimentConfig, dataset: &Dataset, seeds: &SeedPlan) -> Result<Vec<TaskDataset>> {
    let mut tasks = build_task_sequence_with(dataset, config.num_tasks, seeds.data, &config.split)?;
    for task in tasks.iter_mut() {
        if !config.noise.applies_to(task.task_id) {
            continue;
        }
        let mapping = match config.noise.mappings.get(&task.task_id) {
            Some(m) => m.clone(),
            None => default_mapping(dataset.id, &task.class_set, dataset.coarse.as_deref()),
        };
        let spec = NoiseSpec {
            mapping,
            rate: config.noise.rate,
            seed: derive_seed(seeds.noise, &format!("task{}", task.task_id)),
        };
        *task = inject_asymmetric_noise(task, &spec)?;
    }
    Ok(tasks)
}

impl RunState {
    pub fn new(config: ExperimentConfig, dataset: &Dataset, run_seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedPlan::new(run_seed, config.class_order_seed);
        let tasks = prepare_tasks(&config, dataset, &seeds)?;
        let mut init = SeedPlan::rng(seeds.init);
        let model = BackboneModel::new(dataset.shape, config.backbone, &mut init)?;
        let flow = if config.eraser.enabled {
            Some(FlowModel::new(
                config.backbone.feature_dim,
                dataset.id.num_classes(),
                config.flow,
                &mut init,
            )?)
        } else {
            None
        };
        let mut cl = ClPluginState::new(config.cl.clone());
        cl.omega = config.omega;
        Ok(Self {
            matrix: AccuracyMatrix::new(tasks.len()),
            config,
            seeds,
            tasks: Arc::new(tasks),
            model,
            flow,
            flow_snapshot: None,
            cl,
            records: Vec::new(),
        })
    }

    pub fn completed(&self) -> usize {
        self.records.len()
    }
}

fn batch_labels(task: &TaskDataset, idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let global: Vec<usize> = idx.iter().map(|&i| task.train.observed_labels[i]).collect();
    let local = task.local_labels(&global);
    (local, global)
}

fn fail(task: usize, reason: impl Into<String>) -> Error {
    Error::Training {
        task,
        reason: reason.into(),
    }
}

/// Classifier steps over one epoch, optionally interleaved with flow steps.
struct EpochOutcome {
    loss: f64,
    flow_nll: f64,
    latents: Vec<Array2<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn train_epoch(
    state: &mut RunState,
    task: &TaskDataset,
    opt: &mut Adam,
    flow_opt: &mut Adam,
    stats: Option<&LatentStats>,
    shuffle: &mut rand_chacha::ChaCha8Rng,
    sampling: &mut rand_chacha::ChaCha8Rng,
) -> Result<EpochOutcome> {
    let t = task.task_id;
    let cfg = state.config.clone();
    let b = cfg.optimizer.batch_size;
    let n = task.train.len();
    let trainable = state.model.task_params(t)?;
    let interleave_flow = cfg.eraser.enabled && cfg.eraser.alternation == Alternation::PerBatch;
    let replay_count = if cfg.eraser.flow_replay && state.flow_snapshot.is_some() { b } else { 0 };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(shuffle);
    let (mut loss_sum, mut nll_sum, mut batches) = (0.0, 0.0, 0usize);
    let mut latents = Vec::new();
    for idx in order.chunks(b) {
        let x = task.train.gather(idx);
        let (local, global) = batch_labels(task, idx);
        let trunk = state.model.trunk_forward(x.view())?;
        if interleave_flow {
            let flow = state.flow.as_mut().expect("eraser enabled");
            flow.observe(trunk.feat_b.view());
            let (u, _) = flow.flow_forward(trunk.feat_b.view(), &global)?;
            latents.push(u);
            let mut fg = Grads::for_store(flow.params());
            let (_, current, _) = flow.incremental_nll_backward(
                trunk.feat_b.view(),
                &global,
                state.flow_snapshot.as_ref(),
                replay_count,
                sampling,
                &mut fg,
            )?;
            if !current.is_finite() || !fg.is_finite() {
                return Err(fail(t, "flow objective became non-finite"));
            }
            let ids = flow.param_ids();
            flow_opt.step(flow.params_mut(), &fg, &ids);
            nll_sum += current;
        }
        let tail = state.model.tail_forward(trunk.feat_b.view(), t)?;
        let ce = CrossEntropy::new(tail.logits.view(), &local);
        let mut grads = Grads::for_store(state.model.params());
        let mut d_feat = state.model.tail_backward(&tail, t, ce.grad_mean(&local).view(), &mut grads)?;
        let mut loss = ce.mean();
        if let (true, Some(stats), Some(flow)) = (cfg.eraser.guidance, stats, state.flow.as_ref()) {
            let count = cfg.eraser.guidance_samples.unwrap_or(b);
            let g = distribution_guidance_loss(&state.model, flow, stats, t, count, &task.class_set, sampling)?;
            loss += g.value;
            grads.merge(g.grads);
        }
        loss += state
            .cl
            .penalty_backward(&state.model, t, x.view(), &trunk, &mut d_feat, &mut grads, sampling)?;
        state.model.trunk_backward(&trunk, d_feat.view(), &mut grads);
        grads.retain(&trainable);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(fail(t, "classifier objective became non-finite"));
        }
        opt.step(state.model.params_mut(), &grads, &trainable);
        loss_sum += loss;
        batches += 1;
    }
    Ok(EpochOutcome {
        loss: loss_sum / batches.max(1) as f64,
        flow_nll: nll_sum / batches.max(1) as f64,
        latents,
    })
}

/// One full pass of flow steps over freshly computed features.
fn flow_epoch(
    state: &mut RunState,
    task: &TaskDataset,
    flow_opt: &mut Adam,
    shuffle: &mut rand_chacha::ChaCha8Rng,
    sampling: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let t = task.task_id;
    let b = state.config.optimizer.batch_size;
    let feats = state.model.features(task.train.all_inputs().view())?;
    let replay_count = if state.config.eraser.flow_replay && state.flow_snapshot.is_some() { b } else { 0 };
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(shuffle);
    let flow = state.flow.as_mut().expect("eraser enabled");
    let (mut sum, mut batches) = (0.0, 0usize);
    let mut latents = Vec::new();
    for idx in order.chunks(b) {
        let f = feats.select(Axis(0), idx);
        let (_, global) = batch_labels(task, idx);
        flow.observe(f.view());
        latents.push(flow.flow_forward(f.view(), &global)?.0);
        let mut fg = Grads::for_store(flow.params());
        let (_, current, _) =
            flow.incremental_nll_backward(f.view(), &global, state.flow_snapshot.as_ref(), replay_count, sampling, &mut fg)?;
        if !current.is_finite() || !fg.is_finite() {
            return Err(fail(t, "flow objective became non-finite"));
        }
        let ids = flow.param_ids();
        flow_opt.step(flow.params_mut(), &fg, &ids);
        sum += current;
        batches += 1;
    }
    Ok((sum / batches.max(1) as f64, latents))
}

/// Runs task `t` (1-based): joint training,
/// identification, erasure, anchor updates and evaluation of tasks `1..=t`.
/// Numeric failures surface as [`Error::Training`].
pub fn run_task(state: &mut RunState, t: usize) -> Result<()> {
    run_task_inner(state, t).map_err(|e| match e {
        Error::NonFinite(_) | Error::NonFiniteScore { .. } => fail(t, e.to_string()),
        other => other,
    })
}

fn run_task_inner(state: &mut RunState, t: usize) -> Result<()> {
    if t != state.completed() + 1 || t > state.tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "task {t} cannot run after {} completed tasks",
            state.completed()
        )));
    }
    let tasks = Arc::clone(&state.tasks);
    let task = &tasks[t - 1];
    let cfg = state.config.clone();
    let seeds = state.seeds;
    let mut phases = PhaseTimes::default();

    let mut head_rng = SeedPlan::task_rng(seeds.init, t);
    state.model.add_head(t, &task.class_set, &mut head_rng)?;
    if let Some(flow) = state.flow.as_mut() {
        flow.register_labels(&task.class_set)?;
    }
    let mut shuffle = SeedPlan::task_rng(seeds.shuffle, t);
    let mut sampling = SeedPlan::task_rng(seeds.flow_sampling, t);
    let mut opt = Adam::new(AdamConfig::new(cfg.optimizer.learning_rate, cfg.optimizer.weight_decay));
    let mut flow_opt = Adam::new(AdamConfig::new(cfg.optimizer.flow_learning_rate, 0.0));

    let started = Instant::now();
    let mut stats: Option<LatentStats> = None;
    let (mut train_loss, mut flow_nll) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.optimizer.epochs {
        let mut latents = Vec::new();
        if cfg.eraser.enabled && cfg.eraser.alternation == Alternation::PerEpoch {
            let (nll, l) = flow_epoch(state, task, &mut flow_opt, &mut shuffle, &mut sampling)?;
            flow_nll.push(nll);
            latents = l;
        }
        let out = train_epoch(state, task, &mut opt, &mut flow_opt, stats.as_ref(), &mut shuffle, &mut sampling)?;
        if cfg.eraser.alternation == Alternation::PerBatch && cfg.eraser.enabled {
            flow_nll.push(out.flow_nll);
            latents = out.latents;
        }
        train_loss.push(out.loss);
        if cfg.eraser.enabled && !latents.is_empty() {
            let views: Vec<_> = latents.iter().map(|u| u.view()).collect();
            let u = concatenate(Axis(0), &views).expect("equal widths");
            stats = Some(LatentStats::fit_with_floor(u.view(), cfg.eraser.var_floor)?);
        }
        debug!(
            "task {t} epoch {}: loss {:.4} flow nll {:.3}",
            epoch + 1,
            out.loss,
            flow_nll.last().copied().unwrap_or(f64::NAN)
        );
    }
    phases.train = started.elapsed().as_secs_f64();

    let mut record = TaskRecord {
        task_id: t,
        class_set: task.class_set.clone(),
        noisy_count: task.train.noisy_count(),
        train_size: task.train.len(),
        phases,
        train_loss,
        flow_nll,
        density: None,
        selected_count: None,
        noise_precision: None,
        erasure: None,
        erasure_verdict: None,
        old_task_flow_nll: Vec::new(),
    };

    if let Some(flow) = state.flow.as_ref() {
        let started = Instant::now();
        let scores = score_dataset(&state.model, flow, &task.train)?;
        let report = if cfg.eraser.per_class {
            select_representative_per_class(&scores, &task.train.observed_labels, cfg.eraser.percentile)?
        } else {
            select_representative(&scores, cfg.eraser.percentile)?
        };
        record.noise_precision = Some(report.noise_precision(&task.train.noise_mask()));
        record.selected_count = Some(report.selected_indices.len());
        let retained = retained_subset(&state.model, flow, task, cfg.eraser.percentile)?;
        record.phases.identify = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let idx = &report.selected_indices;
        let selected = EvalSet {
            inputs: task.train.gather(idx),
            labels: batch_labels(task, idx).0,
        };
        let erasure = if cfg.eraser.erase {
            let mut rng = SeedPlan::task_rng(seeds.erasure, t);
            erase(&mut state.model, t, &selected, &retained, &cfg.erasure, &mut rng)?
        } else {
            unchanged_report(&state.model, t, &selected, &retained)?
        };
        record.erasure_verdict = Some(verify_erasure(&erasure));
        record.erasure = Some(erasure);
        record.density = Some(report);
        record.phases.erase = started.elapsed().as_secs_f64();
        info!(
            "task {t}: selected {} (precision {:.2}), erasure drop {:.2}",
            record.selected_count.unwrap_or(0),
            record.noise_precision.unwrap_or(0.0),
            record.erasure_verdict.map(|v| v.relative_prob_drop).unwrap_or(0.0)
        );
    }
    if let Some(flow) = state.flow.as_ref() {
        state.flow_snapshot = Some(flow.snapshot());
    }
    let mut anchor_rng = SeedPlan::task_rng(seeds.shuffle ^ 0x5eed, t);
    state.cl.end_task(&state.model, task, &mut anchor_rng)?;

    let started = Instant::now();
    for k in 1..=t {
        let tk = &tasks[k - 1];
        let labels = tk.local_labels(&tk.test.true_labels);
        let acc = accuracy(&state.model, k, tk.test.all_inputs().view(), &labels)?;
        state.matrix.record(k, t, acc)?;
        if let (Some(flow), true) = (state.flow.as_ref(), k < t) {
            let feats = state.model.features(tk.test.all_inputs().view())?;
            record.old_task_flow_nll.push((k, flow.nll_loss(feats.view(), &tk.test.true_labels)?));
        }
    }
    record.phases.evaluate = started.elapsed().as_secs_f64();
    info!(
        "task {t} done in {:.1}s; accuracies {:?}",
        record.phases.total(),
        (1..=t).map(|k| state.matrix.get(k, t).unwrap_or(f64::NAN)).collect::<Vec<_>>()
    );
    state.records.push(record);
    Ok(())
}

/// Validation examples whose density is at or above the `percentile` quantile.
fn retained_subset(model: &BackboneModel, flow: &FlowModel, task: &TaskDataset, percentile: f64) -> Result<EvalSet> {
    let all: Vec<usize> = (0..task.valid.len()).collect();
    if all.is_empty() {
        return Ok(EvalSet {
            inputs: Array2::zeros((0, task.shape.len())),
            labels: Vec::new(),
        });
    }
    let scores = score_dataset(model, flow, &task.valid)?;
    let cut = quantile(&scores, percentile);
    let keep: Vec<usize> = all.into_iter().filter(|&i| scores[i] >= cut).collect();
    Ok(EvalSet {
        inputs: task.valid.gather(&keep),
        labels: task.local_labels(&keep.iter().map(|&i| task.valid.observed_labels[i]).collect::<Vec<_>>()),
    })
}
