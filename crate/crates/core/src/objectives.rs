//! Training objective `L = L_ce + L_ge + L_cl` and the continual-learning plugins.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, TrunkCache};
use crate::error::{Error, Result};
use crate::flowdensity::FlowModel;
use crate::nn::loss::distillation;
use crate::nn::{CrossEntropy, Grads, ParamId};
use crate::taskstream::TaskDataset;

pub const DEFAULT_VAR_FLOOR: f64 = 1e-4;

/// Mean softmax cross-entropy.
pub fn classification_loss(logits: ArrayView2<f64>, labels: &[usize]) -> f64 {
    CrossEntropy::new(logits, labels).mean()
}

/// Mean and diagonal variance of a task's latent codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mu: Array1<f64>,
    pub sigma_diag: Array1<f64>,
    pub count: usize,
}

impl LatentStats {
    pub fn fit(u: ArrayView2<f64>) -> Result<Self> {
        Self::fit_with_floor(u, DEFAULT_VAR_FLOOR)
    }

    pub fn fit_with_floor(u: ArrayView2<f64>, floor: f64) -> Result<Self> {
        if u.nrows() < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 latents, got {}", u.nrows())));
        }
        let mu = u.mean_axis(Axis(0)).expect("non-empty");
        let sigma_diag = u.var_axis(Axis(0), 0.0).mapv(|v| v.max(floor));
        Ok(Self {
            mu,
            sigma_diag,
            count: u.nrows(),
        })
    }

    /// `log q(u)` under `N(mu, diag(sigma_diag))`.
    pub fn log_density(&self, u: ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for ((&x, &m), &v) in u.iter().zip(&self.mu).zip(&self.sigma_diag) {
            acc += -0.5 * (x - m) * (x - m) / v - 0.5 * (2.0 * PI * v).ln();
        }
        acc
    }
}

pub fn fit_latent_stats(u: ArrayView2<f64>) -> Result<LatentStats> {
    LatentStats::fit(u)
}

/// Diagonal-covariance normal density `q(u′)`.
pub fn gaussian_weight(u: ArrayView1<f64>, stats: &LatentStats) -> f64 {
    stats.log_density(u).exp()
}

/// Value and `stage_c`/head gradients of the density-weighted guidance loss.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub value: f64,
    pub weights: Array1<f64>,
    pub grads: Grads,
}

/// `mean_i q(u′_i) · CE(head(stage_c(f⁻¹(u′_i | y′_i))), y′_i)` for explicit
/// latents and global conditioning labels. Gradients reach `stage_c` and the
/// head of `task_id` only; the flow is treated as fixed.
pub fn guidance_from_latents(
    model: &BackboneModel,
    flow: &FlowModel,
    stats: &LatentStats,
    task_id: usize,
    u: ArrayView2<f64>,
    labels: &[usize],
) -> Result<Guidance> {
    guidance_with_weights(model, flow, task_id, u, labels, |row| gaussian_weight(row, stats))
}

pub(crate) fn guidance_with_weights(
    model: &BackboneModel,
    flow: &FlowModel,
    task_id: usize,
    u: ArrayView2<f64>,
    labels: &[usize],
    weight: impl Fn(ArrayView1<f64>) -> f64,
) -> Result<Guidance> {
    let n = u.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("guidance sample count must be at least 1".into()));
    }
    let classes = model.head_classes(task_id)?;
    let local: Vec<usize> = labels
        .iter()
        .map(|g| {
            classes
                .iter()
                .position(|c| c == g)
                .ok_or_else(|| Error::InvalidArgument(format!("label {g} is not a class of task {task_id}")))
        })
        .collect::<Result<_>>()?;
    let q: Array1<f64> = u.rows().into_iter().map(&weight).collect();
    let feats = flow.flow_inverse(u, labels)?;
    let tail = model.tail_forward(feats.view(), task_id)?;
    let ce = CrossEntropy::new(tail.logits.view(), &local);
    let value = (&q * &ce.losses).sum() / n as f64;
    let mut grads = Grads::for_store(model.params());
    let w: Vec<f64> = q.iter().map(|&v| v / n as f64).collect();
    if w.iter().any(|&v| v != 0.0) {
        model.tail_backward(&tail, task_id, ce.grad_weighted(&local, &w).view(), &mut grads)?;
    }
    Ok(Guidance {
        value,
        weights: q,
        grads,
    })
}

/// Draws `count` latents `u′ ~ N(0, I)` with labels uniform over `labels_pool`
/// and evaluates [`guidance_from_latents`].
#[allow(clippy::too_many_arguments)]
pub fn distribution_guidance_loss<R: Rng + ?Sized>(
    model: &BackboneModel,
    flow: &FlowModel,
    stats: &LatentStats,
    task_id: usize,
    count: usize,
    labels_pool: &[usize],
    rng: &mut R,
) -> Result<Guidance> {
    if labels_pool.is_empty() {
        return Err(Error::InvalidArgument("empty label pool".into()));
    }
    let u = flow.sample_latent(count, rng)?;
    let labels: Vec<usize> = (0..count).map(|_| labels_pool[rng.random_range(0..labels_pool.len())]).collect();
    guidance_from_latents(model, flow, stats, task_id, u.view(), &labels)
}

/// Unweighted sum of the three objective terms.
pub fn total_loss(ce: f64, ge: f64, cl: f64) -> f64 {
    ce + ge + cl
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClStrategy {
    None,
    Ewc {
        lambda: f64,
        #[serde(default)]
        fisher: bool,
    },
    Lwf {
        temperature: f64,
        weight: f64,
    },
    Replay {
        per_task: usize,
        weight: f64,
    },
}

impl ClStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            ClStrategy::None => "none",
            ClStrategy::Ewc { .. } => "ewc",
            ClStrategy::Lwf { .. } => "lwf",
            ClStrategy::Replay { .. } => "replay",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcAnchor {
    pub task_id: usize,
    pub omega: f64,
    pub params: Vec<(ParamId, ArrayD<f64>)>,
    /// Per-parameter importance; `None` means unit importance.
    pub importance: Option<Vec<ArrayD<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub task_id: usize,
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Anchors and buffers accumulated over finished tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClPluginState {
    pub strategy: ClStrategy,
    pub ewc: Vec<EwcAnchor>,
    pub teacher: Option<BackboneModel>,
    pub replay: Vec<ReplayBuffer>,
    /// Task ids finished so far, in order.
    pub finished: Vec<usize>,
    /// Importance weight `Ω_k` given to new anchors.
    pub omega: f64,
}

impl ClPluginState {
    pub fn new(strategy: ClStrategy) -> Self {
        Self {
            strategy,
            ewc: Vec::new(),
            teacher: None,
            replay: Vec::new(),
            finished: Vec::new(),
            omega: 1.0,
        }
    }

    fn check_anchors(&self) -> Result<()> {
        match &self.strategy {
            ClStrategy::Ewc { .. } => {
                for &t in &self.finished {
                    if !self.ewc.iter().any(|a| a.task_id == t) {
                        return Err(Error::MissingAnchor(t));
                    }
                }
            }
            ClStrategy::Lwf { .. } => {
                if let Some(&t) = self.finished.last() {
                    if self.teacher.is_none() {
                        return Err(Error::MissingAnchor(t));
                    }
                }
            }
            ClStrategy::Replay { .. } => {
                for &t in &self.finished {
                    if !self.replay.iter().any(|b| b.task_id == t) {
                        return Err(Error::MissingAnchor(t));
                    }
                }
            }
            ClStrategy::None => {}
        }
        Ok(())
    }

    /// Penalty value for training task `task_id` on `batch`. Replay uses its full buffer.
    pub fn penalty(&self, model: &BackboneModel, task_id: usize, batch: ArrayView2<f64>) -> Result<f64> {
        self.check_anchors()?;
        match &self.strategy {
            ClStrategy::None => Ok(0.0),
            ClStrategy::Ewc { lambda, .. } => Ok(ewc_penalty(&self.ewc, model, *lambda, None)),
            ClStrategy::Lwf { temperature, weight } => {
                let Some(teacher) = &self.teacher else { return Ok(0.0) };
                let feats = model.features(batch)?;
                let tfeats = teacher.features(batch)?;
                let mut total = 0.0;
                for &k in self.finished.iter().filter(|&&k| k != task_id) {
                    let s = model.logits_from_features(feats.view(), k)?;
                    let t = teacher.logits_from_features(tfeats.view(), k)?;
                    total += distillation(s.view(), t.view(), *temperature).0;
                }
                Ok(weight * total)
            }
            ClStrategy::Replay { weight, .. } => {
                let mut total = 0.0;
                for b in self.replay.iter().filter(|b| b.task_id != task_id) {
                    let logits = model.forward(b.inputs.view(), b.task_id)?.logits;
                    total += classification_loss(logits.view(), &b.labels);
                }
                Ok(weight * total)
            }
        }
    }

    /// Accumulates the penalty gradient into `grads`. Distillation gradients
    /// are routed through `d_feat_b`, which the caller back-propagates through
    /// the trunk together with its own feature gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn penalty_backward<R: Rng + ?Sized>(
        &self,
        model: &BackboneModel,
        task_id: usize,
        batch: ArrayView2<f64>,
        trunk: &TrunkCache,
        d_feat_b: &mut Array2<f64>,
        grads: &mut Grads,
        rng: &mut R,
    ) -> Result<f64> {
        self.check_anchors()?;
        match &self.strategy {
            ClStrategy::None => Ok(0.0),
            ClStrategy::Ewc { lambda, .. } => Ok(ewc_penalty(&self.ewc, model, *lambda, Some(grads))),
            ClStrategy::Lwf { temperature, weight } => {
                let Some(teacher) = &self.teacher else { return Ok(0.0) };
                let tfeats = teacher.features(batch)?;
                let mut total = 0.0;
                for &k in self.finished.iter().filter(|&&k| k != task_id) {
                    let tail = model.tail_forward(trunk.feat_b.view(), k)?;
                    let t = teacher.logits_from_features(tfeats.view(), k)?;
                    let (v, g) = distillation(tail.logits.view(), t.view(), *temperature);
                    total += weight * v;
                    let mut local = Grads::for_store(model.params());
                    let d = model.tail_backward(&tail, k, (g * *weight).view(), &mut local)?;
                    // Old heads stay frozen; only the shared path receives gradient.
                    local.retain(&model.shared_params());
                    grads.merge(local);
                    *d_feat_b += &d;
                }
                Ok(total)
            }
            ClStrategy::Replay { weight, .. } => {
                let mut total = 0.0;
                let m = batch.nrows().max(1);
                for b in self.replay.iter().filter(|b| b.task_id != task_id) {
                    let pick = index::sample(rng, b.labels.len(), m.min(b.labels.len())).into_vec();
                    let x = b.inputs.select(Axis(0), &pick);
                    let y: Vec<usize> = pick.iter().map(|&i| b.labels[i]).collect();
                    let cache = model.trunk_forward(x.view())?;
                    let tail = model.tail_forward(cache.feat_b.view(), b.task_id)?;
                    let ce = CrossEntropy::new(tail.logits.view(), &y);
                    total += weight * ce.mean();
                    let mut local = Grads::for_store(model.params());
                    let dl = ce.grad_mean(&y) * *weight;
                    let d = model.tail_backward(&tail, b.task_id, dl.view(), &mut local)?;
                    model.trunk_backward(&cache, d.view(), &mut local);
                    local.retain(&model.shared_params());
                    grads.merge(local);
                }
                Ok(total)
            }
        }
    }

    /// Records anchors for a finished task.
    pub fn end_task<R: Rng + ?Sized>(&mut self, model: &BackboneModel, task: &TaskDataset, rng: &mut R) -> Result<()> {
        match self.strategy.clone() {
            ClStrategy::None => {}
            ClStrategy::Ewc { fisher, .. } => {
                let ids = model.shared_params();
                let params = ids.iter().map(|&id| (id, model.params().get(id).clone())).collect();
                let importance = if fisher {
                    Some(fisher_diagonal(model, task, &ids)?)
                } else {
                    None
                };
                self.ewc.push(EwcAnchor {
                    task_id: task.task_id,
                    omega: self.omega,
                    params,
                    importance,
                });
            }
            ClStrategy::Lwf { .. } => self.teacher = Some(model.clone()),
            ClStrategy::Replay { per_task, .. } => {
                let n = task.train.len();
                let pick = index::sample(rng, n, per_task.min(n)).into_vec();
                let labels = pick
                    .iter()
                    .map(|&i| task.local_label(task.train.observed_labels[i]).expect("task label"))
                    .collect();
                self.replay.push(ReplayBuffer {
                    task_id: task.task_id,
                    inputs: task.train.gather(&pick),
                    labels,
                });
            }
        }
        self.finished.push(task.task_id);
        Ok(())
    }
}

/// `Σ_k Ω_k (λ/2) Σ_j F_j (θ_j − θ_j^k)²`, optionally accumulating its gradient.
pub fn ewc_penalty(anchors: &[EwcAnchor], model: &BackboneModel, lambda: f64, mut grads: Option<&mut Grads>) -> f64 {
    let mut total = 0.0;
    for a in anchors {
        for (j, (id, anchor)) in a.params.iter().enumerate() {
            let theta = model.params().get(*id);
            if theta.shape() != anchor.shape() {
                continue;
            }
            let diff = theta - anchor;
            let weighted = match &a.importance {
                Some(f) => &diff * &f[j],
                None => diff.clone(),
            };
            total += a.omega * 0.5 * lambda * (&weighted * &diff).sum();
            if let Some(g) = grads.as_deref_mut() {
                g.add(*id, weighted * (a.omega * lambda));
            }
        }
    }
    total
}

/// Empirical Fisher diagonal from squared mini-batch gradients of the
/// observed-label cross-entropy.
fn fisher_diagonal(model: &BackboneModel, task: &TaskDataset, ids: &[ParamId]) -> Result<Vec<ArrayD<f64>>> {
    const BATCH: usize = 32;
    let mut acc: Vec<ArrayD<f64>> = ids.iter().map(|&id| ArrayD::zeros(model.params().get(id).raw_dim())).collect();
    let n = task.train.len();
    let mut batches = 0usize;
    for start in (0..n).step_by(BATCH) {
        let idx: Vec<usize> = (start..(start + BATCH).min(n)).collect();
        let x = task.train.gather(&idx);
        let y = task.local_labels(&idx.iter().map(|&i| task.train.observed_labels[i]).collect::<Vec<_>>());
        let trunk = model.trunk_forward(x.view())?;
        let tail = model.tail_forward(trunk.feat_b.view(), task.task_id)?;
        let ce = CrossEntropy::new(tail.logits.view(), &y);
        let mut g = Grads::for_store(model.params());
        let d = model.tail_backward(&tail, task.task_id, ce.grad_mean(&y).view(), &mut g)?;
        model.trunk_backward(&trunk, d.view(), &mut g);
        for (a, &id) in acc.iter_mut().zip(ids) {
            if let Some(gi) = g.get(id) {
                *a += &gi.mapv(|v| v * v);
            }
        }
        batches += 1;
    }
    let scale = 1.0 / batches.max(1) as f64;
    Ok(acc.into_iter().map(|a| a * scale).collect())
}
