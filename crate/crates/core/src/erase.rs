//! Pseudo-class erasure: expand the task head, fine-tune the selected samples
//! toward the new neuron, then prune it.

use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ActivationRecord, BackboneModel};
use crate::error::{Error, Result};
use crate::evaluation::accuracy;
use crate::nn::{softmax, Adam, AdamConfig, CrossEntropy, Grads};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneScope {
    Head,
    HeadAndStageC,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub scope: FineTuneScope,
    /// Global gradient-norm bound; always applied for full-model fine-tuning.
    pub clip_norm: Option<f64>,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 16,
            scope: FineTuneScope::HeadAndStageC,
            clip_norm: None,
        }
    }
}

const FULL_SCOPE_CLIP: f64 = 5.0;

/// Inputs with local (head-index) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub task_id: usize,
    pub selected_count: usize,
    pub pseudo_index: Option<usize>,
    /// Mean probability of each sample's observed label on the selected set.
    pub pre_original_prob: f64,
    /// Same quantity on the fine-tuned, still expanded model.
    pub finetuned_original_prob: f64,
    /// Same quantity after pruning the pseudo neuron.
    pub post_original_prob: f64,
    pub pre_retained_accuracy: f64,
    pub post_retained_accuracy: f64,
    pub retained_count: usize,
    /// Mean pseudo-class probability on the selected set after each epoch.
    pub pseudo_prob_trajectory: Vec<f64>,
    pub activations: Vec<ActivationRecord>,
    pub parameter_count_before: usize,
    pub parameter_count_after: usize,
    pub steps: usize,
    pub skipped: bool,
}

impl ErasureReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_activations_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "mean", "min", "max"])?;
        for a in &self.activations {
            w.write_record([a.step.to_string(), a.mean.to_string(), a.min.to_string(), a.max.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_prob(logits: ArrayView2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let p = softmax(logits);
    labels.iter().enumerate().map(|(i, &y)| p[[i, y]]).sum::<f64>() / labels.len() as f64
}

/// Report for a model that is left untouched (no erasure performed).
pub fn unchanged_report(model: &BackboneModel, task_id: usize, selected: &EvalSet, retained: &EvalSet) -> Result<ErasureReport> {
    let prob = if selected.is_empty() {
        0.0
    } else {
        mean_prob(model.forward(selected.inputs.view(), task_id)?.logits.view(), &selected.labels)
    };
    let acc = accuracy(model, task_id, retained.inputs.view(), &retained.labels)?;
    Ok(ErasureReport {
        task_id,
        selected_count: selected.len(),
        pseudo_index: None,
        pre_original_prob: prob,
        finetuned_original_prob: prob,
        post_original_prob: prob,
        pre_retained_accuracy: acc,
        post_retained_accuracy: acc,
        retained_count: retained.len(),
        pseudo_prob_trajectory: Vec::new(),
        activations: Vec::new(),
        parameter_count_before: model.parameter_count(),
        parameter_count_after: model.parameter_count(),
        steps: 0,
        skipped: true,
    })
}

/// Expands the head of `task_id`, fine-tunes `selected` toward the pseudo
/// class, and prunes it again. On divergence the model is restored to its
/// pre-erasure state and an error is returned.
pub fn erase<R: Rng + ?Sized>(
    model: &mut BackboneModel,
    task_id: usize,
    selected: &EvalSet,
    retained: &EvalSet,
    config: &ErasureConfig,
    rng: &mut R,
) -> Result<ErasureReport> {
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("erasure needs at least one fine-tuning epoch".into()));
    }
    if config.batch_size == 0 || !config.learning_rate.is_finite() || config.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument("erasure batch size and learning rate must be positive".into()));
    }
    if model.is_expanded(task_id) {
        return Err(Error::AlreadyExpanded(task_id));
    }
    if selected.is_empty() {
        warn!("task {task_id}: empty selection, erasure skipped");
        return unchanged_report(model, task_id, selected, retained);
    }
    let saved = model.clone();
    match fine_tune(model, task_id, selected, retained, config, rng) {
        Ok(report) => Ok(report),
        Err(e) => {
            *model = saved;
            Err(e)
        }
    }
}

fn fine_tune<R: Rng + ?Sized>(
    model: &mut BackboneModel,
    task_id: usize,
    selected: &EvalSet,
    retained: &EvalSet,
    config: &ErasureConfig,
    rng: &mut R,
) -> Result<ErasureReport> {
    let before = unchanged_report(model, task_id, selected, retained)?;
    let pseudo = model.expand_head(task_id)?;
    let mut trainable = model.head_params(task_id)?;
    match config.scope {
        FineTuneScope::Head => {}
        FineTuneScope::HeadAndStageC => trainable.extend(model.stage_c_params()),
        FineTuneScope::Full => trainable.extend(model.shared_params()),
    }
    let clip = match config.scope {
        FineTuneScope::Full => Some(config.clip_norm.unwrap_or(FULL_SCOPE_CLIP)),
        _ => config.clip_norm,
    };
    let frozen_trunk = config.scope != FineTuneScope::Full;
    let cached_feats = if frozen_trunk {
        Some(model.features(selected.inputs.view())?)
    } else {
        None
    };
    let mut opt = Adam::new(AdamConfig::new(config.learning_rate, 0.0));
    let n = selected.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trajectory = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let target = vec![pseudo; chunk.len()];
            let mut grads = Grads::for_store(model.params());
            let (tail, trunk) = match &cached_feats {
                Some(f) => (model.tail_forward(f.select(ndarray::Axis(0), chunk).view(), task_id)?, None),
                None => {
                    let x = selected.inputs.select(ndarray::Axis(0), chunk);
                    let trunk = model.trunk_forward(x.view())?;
                    (model.tail_forward(trunk.feat_b.view(), task_id)?, Some(trunk))
                }
            };
            model.record_pseudo_activation(task_id, tail.logits.view())?;
            let ce = CrossEntropy::new(tail.logits.view(), &target);
            if !ce.mean().is_finite() {
                return Err(Error::ErasureDiverged { step });
            }
            let d_feat = model.tail_backward(&tail, task_id, ce.grad_mean(&target).view(), &mut grads)?;
            if let Some(trunk) = &trunk {
                model.trunk_backward(trunk, d_feat.view(), &mut grads);
            }
            grads.retain(&trainable);
            if !grads.is_finite() {
                return Err(Error::ErasureDiverged { step });
            }
            if let Some(c) = clip {
                grads.clip_norm(c);
            }
            opt.step(model.params_mut(), &grads, &trainable);
            step += 1;
        }
        let logits = match &cached_feats {
            Some(f) => model.logits_from_features(f.view(), task_id)?,
            None => model.forward(selected.inputs.view(), task_id)?.logits,
        };
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::ErasureDiverged { step });
        }
        trajectory.push(mean_prob(logits.view(), &vec![pseudo; n]));
    }
    let finetuned = mean_prob(model.forward(selected.inputs.view(), task_id)?.logits.view(), &selected.labels);
    let activations = model.prune_head(task_id, pseudo)?;
    let after = unchanged_report(model, task_id, selected, retained)?;
    Ok(ErasureReport {
        task_id,
        selected_count: n,
        pseudo_index: Some(pseudo),
        pre_original_prob: before.pre_original_prob,
        finetuned_original_prob: finetuned,
        post_original_prob: after.pre_original_prob,
        pre_retained_accuracy: before.pre_retained_accuracy,
        post_retained_accuracy: after.pre_retained_accuracy,
        retained_count: retained.len(),
        pseudo_prob_trajectory: trajectory,
        activations,
        parameter_count_before: before.parameter_count_before,
        parameter_count_after: model.parameter_count(),
        steps: step,
        skipped: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureVerdict {
    pub pass: bool,
    /// `1 − finetuned/pre` for the observed-label probability on the selected set.
    pub relative_prob_drop: f64,
    /// `1 − post/pre` after pruning.
    pub pruned_relative_prob_drop: f64,
    /// Retained-set accuracy loss in percentage points.
    pub accuracy_drop: f64,
    pub forgot: bool,
    pub retained: bool,
}

pub const MIN_RELATIVE_DROP: f64 = 0.5;
pub const MAX_ACCURACY_DROP: f64 = 2.0;

/// Forgetting holds when the observed-label probability on the selected set
/// falls by at least half; retention holds when retained-set accuracy drops by
/// at most two points. An empty selection passes vacuously.
pub fn verify_erasure(report: &ErasureReport) -> ErasureVerdict {
    let drop = |after: f64| {
        if report.pre_original_prob > 0.0 {
            1.0 - after / report.pre_original_prob
        } else {
            0.0
        }
    };
    let relative_prob_drop = drop(report.finetuned_original_prob);
    let accuracy_drop = report.pre_retained_accuracy - report.post_retained_accuracy;
    if report.selected_count == 0 {
        return ErasureVerdict {
            pass: true,
            relative_prob_drop: 0.0,
            pruned_relative_prob_drop: 0.0,
            accuracy_drop,
            forgot: true,
            retained: true,
        };
    }
    let forgot = relative_prob_drop >= MIN_RELATIVE_DROP;
    let retained = accuracy_drop <= MAX_ACCURACY_DROP;
    ErasureVerdict {
        pass: forgot && retained,
        relative_prob_drop,
        pruned_relative_prob_drop: drop(report.post_original_prob),
        accuracy_drop,
        forgot,
        retained,
    }
}
