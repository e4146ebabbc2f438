//! Task-incremental classifier: `stage_a` (conv or dense stem) → `stage_b`
//! (d-dimensional feature) → `stage_c` (shared layer) → one linear head per task.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    self, conv2d_backward, conv2d_forward, linear_backward, linear_forward, maxpool2_backward, maxpool2_forward,
    relu, relu_backward, ConvCache, ConvShape, PoolCache, PoolShape,
};
use crate::nn::{Grads, ParamId, ParamStore};
use crate::taskstream::InputShape;

pub const CHECKPOINT_SCHEMA: &str = "eraser.backbone/1";

/// Rows per chunk for cache-free inference over large splits.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Stem {
    /// Two conv5x5 → ReLU → maxpool2 blocks.
    Conv { channels1: usize, channels2: usize, kernel: usize },
    /// One dense layer with ReLU, for vector inputs.
    Dense { hidden: usize },
}

impl Default for Stem {
    fn default() -> Self {
        Stem::Conv {
            channels1: 8,
            channels2: 16,
            kernel: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    #[serde(default)]
    pub stem: Stem,
    pub feature_dim: usize,
    pub shared_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem: Stem::default(),
            feature_dim: 16,
            shared_width: 64,
        }
    }
}

/// Self-describing architecture record stored with every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputShape,
    pub config: BackboneConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Stage {
    A,
    B,
    C,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StemIds {
    w1: ParamId,
    b1: ParamId,
    w2: Option<ParamId>,
    b2: Option<ParamId>,
}

/// One per-task step of pseudo-neuron activation during erasure fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub step: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Expansion {
    pseudo_index: usize,
    parameter_count: usize,
    log: Vec<ActivationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Head {
    classes: Vec<usize>,
    w: ParamId,
    b: ParamId,
    expansion: Option<Expansion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneModel {
    arch: Architecture,
    params: ParamStore,
    stem: StemIds,
    b_w: ParamId,
    b_b: ParamId,
    c_w: ParamId,
    c_b: ParamId,
    heads: BTreeMap<usize, Head>,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub feat_b: Array2<f64>,
    pub logits: Array2<f64>,
}

#[allow(clippy::large_enum_variant)]
enum StemCache {
    Conv {
        conv1: ConvCache,
        pool1: PoolCache,
        conv2: ConvCache,
        pool2: PoolCache,
    },
    Dense {
        pre: Array2<f64>,
    },
}

/// Activations of `stage_a` and `stage_b` kept for the backward pass.
pub struct TrunkCache {
    input: Array2<f64>,
    stem: StemCache,
    stem_out: Array2<f64>,
    pub feat_b: Array2<f64>,
}

/// Activations of `stage_c` and a head kept for the backward pass.
pub struct TailCache {
    feat_b: Array2<f64>,
    c_pre: Array2<f64>,
    c_out: Array2<f64>,
    pub logits: Array2<f64>,
}

struct ConvGeometry {
    conv1: ConvShape,
    pool1: PoolShape,
    conv2: ConvShape,
    pool2: PoolShape,
}

impl Architecture {
    fn conv_geometry(&self) -> Option<ConvGeometry> {
        let Stem::Conv {
            channels1,
            channels2,
            kernel,
        } = self.config.stem
        else {
            return None;
        };
        let conv1 = ConvShape {
            in_channels: self.input.channels,
            height: self.input.height,
            width: self.input.width,
            out_channels: channels1,
            kernel,
        };
        let pool1 = PoolShape {
            channels: channels1,
            height: conv1.out_height(),
            width: conv1.out_width(),
        };
        let conv2 = ConvShape {
            in_channels: channels1,
            height: pool1.out_height(),
            width: pool1.out_width(),
            out_channels: channels2,
            kernel,
        };
        let pool2 = PoolShape {
            channels: channels2,
            height: conv2.out_height(),
            width: conv2.out_width(),
        };
        Some(ConvGeometry {
            conv1,
            pool1,
            conv2,
            pool2,
        })
    }

    /// Width of the flattened `stage_a` output.
    pub fn stem_width(&self) -> usize {
        match self.config.stem {
            Stem::Conv { .. } => self.conv_geometry().expect("conv stem").pool2.out_len(),
            Stem::Dense { hidden } => hidden,
        }
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.feature_dim == 0 || c.shared_width == 0 || self.input.is_empty() {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if let Stem::Conv { kernel, channels1, channels2 } = c.stem {
            if kernel == 0 || channels1 == 0 || channels2 == 0 {
                return Err(Error::Config("conv stem sizes must be positive".into()));
            }
            let side = self.input.height.min(self.input.width);
            let pooled1 = (side + 1).saturating_sub(kernel) / 2;
            if (pooled1 + 1).saturating_sub(kernel) / 2 == 0 {
                return Err(Error::Config(format!(
                    "input {}x{} is too small for two {kernel}x{kernel} conv/pool blocks",
                    self.input.height, self.input.width
                )));
            }
        }
        Ok(())
    }
}

impl BackboneModel {
    pub fn new<R: Rng + ?Sized>(input: InputShape, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let arch = Architecture { input, config };
        arch.validate()?;
        let mut params = ParamStore::new();
        let stem = match arch.conv_geometry() {
            Some(g) => {
                let (p1, p2) = (g.conv1.patch_len(), g.conv2.patch_len());
                StemIds {
                    w1: params.add("stage_a.conv1.weight", layers::uniform_fan_in(rng, g.conv1.out_channels, p1, p1)),
                    b1: params.add("stage_a.conv1.bias", layers::uniform_fan_in_vec(rng, g.conv1.out_channels, p1)),
                    w2: Some(params.add("stage_a.conv2.weight", layers::uniform_fan_in(rng, g.conv2.out_channels, p2, p2))),
                    b2: Some(params.add("stage_a.conv2.bias", layers::uniform_fan_in_vec(rng, g.conv2.out_channels, p2))),
                }
            }
            None => {
                let (h, n) = (arch.stem_width(), input.len());
                StemIds {
                    w1: params.add("stage_a.dense.weight", layers::uniform_fan_in(rng, h, n, n)),
                    b1: params.add("stage_a.dense.bias", layers::uniform_fan_in_vec(rng, h, n)),
                    w2: None,
                    b2: None,
                }
            }
        };
        let (sw, d, c) = (arch.stem_width(), config.feature_dim, config.shared_width);
        let b_w = params.add("stage_b.weight", layers::uniform_fan_in(rng, d, sw, sw));
        let b_b = params.add("stage_b.bias", layers::uniform_fan_in_vec(rng, d, sw));
        let c_w = params.add("stage_c.weight", layers::uniform_fan_in(rng, c, d, d));
        let c_b = params.add("stage_c.bias", layers::uniform_fan_in_vec(rng, c, d));
        Ok(Self {
            arch,
            params,
            stem,
            b_w,
            b_b,
            c_w,
            c_b,
            heads: BTreeMap::new(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.config.feature_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Registers a fresh head for `task_id` over `classes`.
    pub fn add_head<R: Rng + ?Sized>(&mut self, task_id: usize, classes: &[usize], rng: &mut R) -> Result<()> {
        if self.heads.contains_key(&task_id) {
            return Err(Error::InvalidArgument(format!("task {task_id} already has a head")));
        }
        if classes.len() < 2 {
            return Err(Error::InvalidArgument("a head needs at least two classes".into()));
        }
        let c = self.arch.config.shared_width;
        let w = self.params.add(format!("head.{task_id}.weight"), layers::uniform_fan_in(rng, classes.len(), c, c));
        let b = self.params.add(format!("head.{task_id}.bias"), layers::uniform_fan_in_vec(rng, classes.len(), c));
        self.heads.insert(
            task_id,
            Head {
                classes: classes.to_vec(),
                w,
                b,
                expansion: None,
            },
        );
        Ok(())
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.heads.keys().copied()
    }

    fn head(&self, task_id: usize) -> Result<&Head> {
        self.heads.get(&task_id).ok_or(Error::UnknownTask(task_id))
    }

    pub fn head_classes(&self, task_id: usize) -> Result<&[usize]> {
        Ok(&self.head(task_id)?.classes)
    }

    /// Current output width of the head (including a pseudo neuron if expanded).
    pub fn head_width(&self, task_id: usize) -> Result<usize> {
        Ok(self.params.get(self.head(task_id)?.w).shape()[0])
    }

    pub fn is_expanded(&self, task_id: usize) -> bool {
        self.heads.get(&task_id).is_some_and(|h| h.expansion.is_some())
    }

    fn stage_params(&self, stage: Stage) -> Vec<ParamId> {
        match stage {
            Stage::A => [Some(self.stem.w1), Some(self.stem.b1), self.stem.w2, self.stem.b2]
                .into_iter()
                .flatten()
                .collect(),
            Stage::B => vec![self.b_w, self.b_b],
            Stage::C => vec![self.c_w, self.c_b],
        }
    }

    pub fn stage_a_params(&self) -> Vec<ParamId> {
        self.stage_params(Stage::A)
    }

    pub fn stage_b_params(&self) -> Vec<ParamId> {
        self.stage_params(Stage::B)
    }

    pub fn stage_c_params(&self) -> Vec<ParamId> {
        self.stage_params(Stage::C)
    }

    /// `stage_a`, `stage_b` and `stage_c` parameters.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut v = self.stage_params(Stage::A);
        v.extend(self.stage_params(Stage::B));
        v.extend(self.stage_params(Stage::C));
        v
    }

    pub fn head_params(&self, task_id: usize) -> Result<Vec<ParamId>> {
        let h = self.head(task_id)?;
        Ok(vec![h.w, h.b])
    }

    /// Shared stages plus the head of `task_id`; every other head stays frozen.
    pub fn task_params(&self, task_id: usize) -> Result<Vec<ParamId>> {
        let mut v = self.shared_params();
        v.extend(self.head_params(task_id)?);
        Ok(v)
    }

    pub fn trunk_forward(&self, x: ArrayView2<f64>) -> Result<TrunkCache> {
        if x.ncols() != self.arch.input.len() {
            return Err(Error::InvalidArgument(format!(
                "input width {} does not match architecture ({})",
                x.ncols(),
                self.arch.input.len()
            )));
        }
        let p = &self.params;
        let (stem, stem_out) = match self.arch.conv_geometry() {
            Some(g) => {
                let conv1 = conv2d_forward(&g.conv1, x, p.mat(self.stem.w1), p.vector(self.stem.b1));
                let pool1 = maxpool2_forward(&g.pool1, relu(&conv1.out).view());
                let w2 = self.stem.w2.expect("conv stem");
                let b2 = self.stem.b2.expect("conv stem");
                let conv2 = conv2d_forward(&g.conv2, pool1.out.view(), p.mat(w2), p.vector(b2));
                let pool2 = maxpool2_forward(&g.pool2, relu(&conv2.out).view());
                let out = pool2.out.clone();
                (
                    StemCache::Conv {
                        conv1,
                        pool1,
                        conv2,
                        pool2,
                    },
                    out,
                )
            }
            None => {
                let pre = linear_forward(x, p.mat(self.stem.w1), p.vector(self.stem.b1));
                let out = relu(&pre);
                (StemCache::Dense { pre }, out)
            }
        };
        let feat_b = linear_forward(stem_out.view(), p.mat(self.b_w), p.vector(self.b_b));
        Ok(TrunkCache {
            input: x.to_owned(),
            stem,
            stem_out,
            feat_b,
        })
    }

    /// Accumulates `stage_a`/`stage_b` gradients for `d_feat_b` into `grads`.
    pub fn trunk_backward(&self, cache: &TrunkCache, d_feat_b: ArrayView2<f64>, grads: &mut Grads) {
        let p = &self.params;
        let gb = linear_backward(cache.stem_out.view(), p.mat(self.b_w), d_feat_b);
        grads.add(self.b_w, gb.dw);
        grads.add(self.b_b, gb.db);
        match (&cache.stem, self.arch.conv_geometry()) {
            (
                StemCache::Conv {
                    conv1,
                    pool1,
                    conv2,
                    pool2,
                },
                Some(g),
            ) => {
                let d_relu2 = maxpool2_backward(&g.pool2, pool2, gb.dx.view());
                let d_conv2 = relu_backward(&conv2.out, &d_relu2);
                let w2 = self.stem.w2.expect("conv stem");
                let g2 = conv2d_backward(&g.conv2, conv2, p.mat(w2), d_conv2.view(), true);
                grads.add(w2, g2.dw);
                grads.add(self.stem.b2.expect("conv stem"), g2.db);
                let d_pool1 = g2.dx.expect("requested dx");
                let d_relu1 = maxpool2_backward(&g.pool1, pool1, d_pool1.view());
                let d_conv1 = relu_backward(&conv1.out, &d_relu1);
                let g1 = conv2d_backward(&g.conv1, conv1, p.mat(self.stem.w1), d_conv1.view(), false);
                grads.add(self.stem.w1, g1.dw);
                grads.add(self.stem.b1, g1.db);
            }
            (StemCache::Dense { pre }, _) => {
                let d_pre = relu_backward(pre, &gb.dx);
                let g1 = linear_backward(cache.input.view(), p.mat(self.stem.w1), d_pre.view());
                grads.add(self.stem.w1, g1.dw);
                grads.add(self.stem.b1, g1.db);
            }
            _ => unreachable!("cache built by a different architecture"),
        }
    }

    /// `stage_c` and the head of `task_id` applied to `feat_b`.
    pub fn tail_forward(&self, feat_b: ArrayView2<f64>, task_id: usize) -> Result<TailCache> {
        let head = self.head(task_id)?;
        if feat_b.ncols() != self.feature_dim() {
            return Err(Error::InvalidArgument(format!(
                "feature width {} does not match d = {}",
                feat_b.ncols(),
                self.feature_dim()
            )));
        }
        let p = &self.params;
        let c_pre = linear_forward(relu(&feat_b.to_owned()).view(), p.mat(self.c_w), p.vector(self.c_b));
        let c_out = relu(&c_pre);
        let logits = linear_forward(c_out.view(), p.mat(head.w), p.vector(head.b));
        Ok(TailCache {
            feat_b: feat_b.to_owned(),
            c_pre,
            c_out,
            logits,
        })
    }

    /// Accumulates head and `stage_c` gradients; returns the gradient with
    /// respect to `feat_b`.
    pub fn tail_backward(
        &self,
        cache: &TailCache,
        task_id: usize,
        d_logits: ArrayView2<f64>,
        grads: &mut Grads,
    ) -> Result<Array2<f64>> {
        let head = self.head(task_id)?;
        let p = &self.params;
        let gh = linear_backward(cache.c_out.view(), p.mat(head.w), d_logits);
        grads.add(head.w, gh.dw);
        grads.add(head.b, gh.db);
        let d_c_pre = relu_backward(&cache.c_pre, &gh.dx);
        let h = relu(&cache.feat_b);
        let gc = linear_backward(h.view(), p.mat(self.c_w), d_c_pre.view());
        grads.add(self.c_w, gc.dw);
        grads.add(self.c_b, gc.db);
        Ok(relu_backward(&cache.feat_b, &gc.dx))
    }

    pub fn forward(&self, x: ArrayView2<f64>, task_id: usize) -> Result<ForwardResult> {
        self.head(task_id)?;
        let feat_b = self.features(x)?;
        let logits = self.logits_from_features(feat_b.view(), task_id)?;
        Ok(ForwardResult { feat_b, logits })
    }

    /// `stage_b` features, computed in fixed-size chunks without keeping caches.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = x.nrows();
        let mut out = Array2::zeros((n, self.feature_dim()));
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let cache = self.trunk_forward(x.slice(s![start..end, ..]))?;
            out.slice_mut(s![start..end, ..]).assign(&cache.feat_b);
        }
        Ok(out)
    }

    pub fn logits_from_features(&self, feat_b: ArrayView2<f64>, task_id: usize) -> Result<Array2<f64>> {
        Ok(self.tail_forward(feat_b, task_id)?.logits)
    }

    /// Local argmax predictions.
    pub fn predict(&self, x: ArrayView2<f64>, task_id: usize) -> Result<Vec<usize>> {
        let logits = self.forward(x, task_id)?.logits;
        Ok(argmax_rows(logits.view()))
    }

    /// Adds a zero-initialised output neuron to the head of `task_id` and
    /// returns its index.
    pub fn expand_head(&mut self, task_id: usize) -> Result<usize> {
        let count = self.parameter_count();
        let head = self.heads.get(&task_id).ok_or(Error::UnknownTask(task_id))?;
        if head.expansion.is_some() {
            return Err(Error::AlreadyExpanded(task_id));
        }
        let (w_id, b_id) = (head.w, head.b);
        let w = self.params.mat(w_id).to_owned();
        let b = self.params.vector(b_id).to_owned();
        let pseudo = w.nrows();
        let mut w2 = Array2::zeros((pseudo + 1, w.ncols()));
        w2.slice_mut(s![..pseudo, ..]).assign(&w);
        let mut b2 = Array1::zeros(pseudo + 1);
        b2.slice_mut(s![..pseudo]).assign(&b);
        self.params.set(w_id, w2);
        self.params.set(b_id, b2);
        self.heads.get_mut(&task_id).expect("checked").expansion = Some(Expansion {
            pseudo_index: pseudo,
            parameter_count: count,
            log: Vec::new(),
        });
        Ok(pseudo)
    }

    /// Appends one fine-tuning step's pseudo-neuron activation statistics.
    pub fn record_pseudo_activation(&mut self, task_id: usize, logits: ArrayView2<f64>) -> Result<ActivationRecord> {
        let exp = self
            .heads
            .get_mut(&task_id)
            .ok_or(Error::UnknownTask(task_id))?
            .expansion
            .as_mut()
            .ok_or(Error::NotExpanded(task_id))?;
        let col = logits.column(exp.pseudo_index);
        let rec = ActivationRecord {
            step: exp.log.len(),
            mean: col.mean().unwrap_or(0.0),
            min: col.fold(f64::INFINITY, |m, &v| m.min(v)),
            max: col.fold(f64::NEG_INFINITY, |m, &v| m.max(v)),
        };
        exp.log.push(rec);
        Ok(rec)
    }

    /// Removes the pseudo neuron and returns the activation log gathered
    /// while the head was expanded.
    pub fn prune_head(&mut self, task_id: usize, pseudo_index: usize) -> Result<Vec<ActivationRecord>> {
        let head = self.heads.get(&task_id).ok_or(Error::UnknownTask(task_id))?;
        let exp = head.expansion.as_ref().ok_or(Error::NotExpanded(task_id))?;
        if exp.pseudo_index != pseudo_index {
            return Err(Error::InvalidArgument(format!(
                "pseudo index {pseudo_index} does not match expanded neuron {}",
                exp.pseudo_index
            )));
        }
        let (w_id, b_id) = (head.w, head.b);
        let w = self.params.mat(w_id).to_owned();
        let b = self.params.vector(b_id).to_owned();
        let keep: Vec<usize> = (0..w.nrows()).filter(|&r| r != pseudo_index).collect();
        self.params.set(w_id, w.select(Axis(0), &keep));
        self.params.set(b_id, b.select(Axis(0), &keep));
        let exp = self.heads.get_mut(&task_id).expect("checked").expansion.take().expect("checked");
        debug_assert_eq!(self.parameter_count(), exp.parameter_count);
        Ok(exp.log)
    }

    pub fn snapshot_parameters(&self) -> BackboneSnapshot {
        BackboneSnapshot {
            schema: CHECKPOINT_SCHEMA.to_string(),
            arch: self.arch,
            params: self.params.clone(),
            heads: self
                .heads
                .iter()
                .map(|(&t, h)| HeadRecord {
                    task_id: t,
                    classes: h.classes.clone(),
                    width: self.params.get(h.w).shape()[0],
                })
                .collect(),
        }
    }

    /// Restores parameters from a snapshot taken from an identical architecture
    /// and head layout.
    pub fn restore_parameters(&mut self, snap: &BackboneSnapshot) -> Result<()> {
        if snap.schema != CHECKPOINT_SCHEMA {
            return Err(Error::ArchitectureMismatch(format!("unknown schema `{}`", snap.schema)));
        }
        if snap.arch != self.arch {
            return Err(Error::ArchitectureMismatch("architecture descriptor differs".into()));
        }
        let current = self.snapshot_parameters().heads;
        if current != snap.heads {
            return Err(Error::ArchitectureMismatch("head registry or head widths differ".into()));
        }
        if !self.params.same_layout(&snap.params) {
            return Err(Error::ArchitectureMismatch("parameter layout differs".into()));
        }
        self.params = snap.params.clone();
        Ok(())
    }

    /// Serialises the full model (architecture, parameters, heads) as JSON.
    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            model: self.clone(),
        })?)
    }

    pub fn from_checkpoint(json: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::ArchitectureMismatch(format!("unknown schema `{}`", ck.schema)));
        }
        Ok(ck.model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    model: BackboneModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSnapshot {
    pub schema: String,
    pub arch: Architecture,
    pub params: ParamStore,
    pub heads: Vec<HeadRecord>,
}

pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
