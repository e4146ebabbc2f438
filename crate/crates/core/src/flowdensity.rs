//! Class-conditional affine coupling flow over `stage_b` features.
//!
//! Each coupling keeps the masked coordinates fixed and transforms the rest as
//! `x ↦ x·exp(s) + t`, where `(s, t)` come from an MLP over the masked
//! coordinates concatenated with a learned label embedding. The scale is
//! bounded as `S·tanh(raw/S)`. Inputs pass through a running standardizer
//! before the first coupling.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{linear_backward, linear_forward, uniform_fan_in, uniform_fan_in_vec};
use crate::nn::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Number of coupling layers (K).
    pub layers: usize,
    pub hidden: usize,
    pub embedding: usize,
    /// Bound `S` on the log-scale, `s = S·tanh(raw/S)`.
    pub scale_bound: f64,
    /// EMA momentum of the input standardizer.
    pub momentum: f64,
    /// Added to batch standard deviations.
    pub std_floor: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            embedding: 8,
            scale_bound: 2.0,
            momentum: 0.1,
            std_floor: 1e-3,
        }
    }
}

/// Running per-dimension mean/std applied before the couplings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub initialized: bool,
}

impl Standardizer {
    fn identity(d: usize) -> Self {
        Self {
            mean: Array1::zeros(d),
            std: Array1::ones(d),
            initialized: false,
        }
    }

    fn observe(&mut self, x: ArrayView2<f64>, momentum: f64, floor: f64) {
        if x.nrows() == 0 {
            return;
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.var_axis(Axis(0), 0.0).mapv(|v| v.sqrt() + floor);
        if self.initialized {
            self.mean = &self.mean * (1.0 - momentum) + &mean * momentum;
            self.std = &self.std * (1.0 - momentum) + &std * momentum;
        } else {
            self.mean = mean;
            self.std = std;
            self.initialized = true;
        }
    }

    fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CouplingIds {
    emb: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    config: FlowConfig,
    dim: usize,
    num_labels: usize,
    params: ParamStore,
    layers: Vec<CouplingIds>,
    standardizer: Standardizer,
    registered: BTreeSet<usize>,
}

struct LayerCache {
    x: Array2<f64>,
    inp: Array2<f64>,
    h: Array2<f64>,
    tanh_raw: Array2<f64>,
    exp_s: Array2<f64>,
}

/// Mask with ones on the conditioning coordinates of layer `k`.
pub fn coupling_mask(dim: usize, k: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |j| if j % 2 == k % 2 { 1.0 } else { 0.0 })
}

fn std_normal_log_density(u: ArrayView2<f64>) -> Array1<f64> {
    let d = u.ncols() as f64;
    u.rows()
        .into_iter()
        .map(|r| -0.5 * r.dot(&r) - 0.5 * d * (2.0 * PI).ln())
        .collect()
}

impl FlowModel {
    /// A fresh flow is the identity map: every coupling's output layer is zero.
    pub fn new<R: Rng + ?Sized>(dim: usize, num_labels: usize, config: FlowConfig, rng: &mut R) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("flow dimension must be at least 2".into()));
        }
        if config.layers == 0 || config.hidden == 0 || config.embedding == 0 || num_labels == 0 {
            return Err(Error::Config("flow sizes must be positive".into()));
        }
        if !config.scale_bound.is_finite() || config.scale_bound <= 0.0 {
            return Err(Error::Config("flow scale bound must be positive".into()));
        }
        let (h, e) = (config.hidden, config.embedding);
        let mut params = ParamStore::new();
        let layers = (0..config.layers)
            .map(|k| {
                let fan = dim + e;
                CouplingIds {
                    emb: params.add(
                        format!("flow.{k}.embedding"),
                        Array2::from_shape_fn((num_labels, e), |_| rng.sample::<f64, _>(StandardNormal)),
                    ),
                    w1: params.add(format!("flow.{k}.hidden.weight"), uniform_fan_in(rng, h, fan, fan)),
                    b1: params.add(format!("flow.{k}.hidden.bias"), uniform_fan_in_vec(rng, h, fan)),
                    w2: params.add(format!("flow.{k}.out.weight"), Array2::<f64>::zeros((2 * dim, h))),
                    b2: params.add(format!("flow.{k}.out.bias"), Array1::<f64>::zeros(2 * dim)),
                }
            })
            .collect();
        Ok(Self {
            config,
            dim,
            num_labels,
            params,
            layers,
            standardizer: Standardizer::identity(dim),
            registered: BTreeSet::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Makes `labels` valid conditioning values.
    pub fn register_labels(&mut self, labels: &[usize]) -> Result<()> {
        for &l in labels {
            if l >= self.num_labels {
                return Err(Error::InvalidArgument(format!(
                    "label {l} exceeds the embedding table ({} labels)",
                    self.num_labels
                )));
            }
        }
        self.registered.extend(labels.iter().copied());
        Ok(())
    }

    pub fn registered_labels(&self) -> Vec<usize> {
        self.registered.iter().copied().collect()
    }

    /// Folds a batch of raw features into the running standardizer.
    pub fn observe(&mut self, feat: ArrayView2<f64>) {
        self.standardizer
            .observe(feat, self.config.momentum, self.config.std_floor);
    }

    fn check(&self, x: ArrayView2<f64>, labels: &[usize], what: &str) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::InvalidArgument(format!("{what} width {} != flow dim {}", x.ncols(), self.dim)));
        }
        if x.nrows() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} rows but {} labels", x.nrows(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|l| !self.registered.contains(l)) {
            return Err(Error::UnregisteredLabel(l));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    fn conditioner(&self, k: usize, xm: &Array2<f64>, labels: &[usize]) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let ids = &self.layers[k];
        let emb = self.params.mat(ids.emb);
        let e = emb.select(Axis(0), labels);
        let inp = concatenate(Axis(1), &[xm.view(), e.view()]).expect("row counts match");
        let h = linear_forward(inp.view(), self.params.mat(ids.w1), self.params.vector(ids.b1)).mapv(f64::tanh);
        let o = linear_forward(h.view(), self.params.mat(ids.w2), self.params.vector(ids.b2));
        let bound = self.config.scale_bound;
        let tanh_raw = o.slice(s![.., ..self.dim]).mapv(|r| (r / bound).tanh());
        (inp, h, tanh_raw, o.slice(s![.., self.dim..]).to_owned())
    }

    fn layer_st(&self, k: usize, x: &Array2<f64>, labels: &[usize]) -> (LayerParts, Array2<f64>, Array2<f64>) {
        let m = coupling_mask(self.dim, k);
        let xm = x * &m;
        let (inp, h, tanh_raw, t_raw) = self.conditioner(k, &xm, labels);
        let free = m.mapv(|v| 1.0 - v);
        let s_val = &tanh_raw * self.config.scale_bound * &free;
        let t_val = &t_raw * &free;
        (LayerParts { m, free, inp, h, tanh_raw }, s_val, t_val)
    }

    fn forward_cached(&self, feat: ArrayView2<f64>, labels: &[usize]) -> (Array2<f64>, Array1<f64>, Vec<LayerCache>) {
        let st = &self.standardizer;
        let mut x = (&feat - &st.mean) / &st.std;
        let mut log_det = Array1::from_elem(feat.nrows(), st.log_det());
        let mut caches = Vec::with_capacity(self.layers.len());
        for k in 0..self.layers.len() {
            let (parts, s_val, t_val) = self.layer_st(k, &x, labels);
            let exp_s = s_val.mapv(f64::exp);
            let y = &x * &parts.m + &((&x * &exp_s + &t_val) * &parts.free);
            log_det += &s_val.sum_axis(Axis(1));
            caches.push(LayerCache {
                x,
                inp: parts.inp,
                h: parts.h,
                tanh_raw: parts.tanh_raw,
                exp_s,
            });
            x = y;
        }
        (x, log_det, caches)
    }

    /// `u = f(feat | label)` and `log |det ∂u/∂feat|` per row.
    pub fn flow_forward(&self, feat: ArrayView2<f64>, labels: &[usize]) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(feat, labels, "flow input")?;
        let (u, ld, _) = self.forward_cached(feat, labels);
        Ok((u, ld))
    }

    /// `feat = f⁻¹(u | label)`.
    pub fn flow_inverse(&self, u: ArrayView2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
        self.check(u, labels, "latent")?;
        let mut x = u.to_owned();
        for k in (0..self.layers.len()).rev() {
            let (parts, s_val, t_val) = self.layer_st(k, &x, labels);
            x = &x * &parts.m + &((&x - &t_val) * &s_val.mapv(|v| (-v).exp()) * &parts.free);
        }
        let st = &self.standardizer;
        Ok(x * &st.std + &st.mean)
    }

    pub fn log_prob(&self, feat: ArrayView2<f64>, labels: &[usize]) -> Result<Array1<f64>> {
        let (u, ld) = self.flow_forward(feat, labels)?;
        Ok(std_normal_log_density(u.view()) + ld)
    }

    /// Mean negative log-likelihood of the batch.
    pub fn nll_loss(&self, feat: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        Ok(-self.log_prob(feat, labels)?.mean().unwrap_or(0.0))
    }

    /// `weight · nll_loss` and its gradient with respect to the flow parameters,
    /// accumulated into `grads`.
    pub fn nll_backward(&self, feat: ArrayView2<f64>, labels: &[usize], weight: f64, grads: &mut Grads) -> Result<f64> {
        self.check(feat, labels, "flow input")?;
        let n = feat.nrows();
        if n == 0 {
            return Ok(0.0);
        }
        let (u, ld, caches) = self.forward_cached(feat, labels);
        let logp = std_normal_log_density(u.view()) + &ld;
        let loss = -weight * logp.mean().expect("non-empty");
        let scale = weight / n as f64;
        // d(loss)/du = u·scale ; d(loss)/d(log_det) = -scale per row.
        let mut dy = u * scale;
        let d_ld = -scale;
        for k in (0..self.layers.len()).rev() {
            let c = &caches[k];
            let ids = &self.layers[k];
            let m = coupling_mask(self.dim, k);
            let free = m.mapv(|v| 1.0 - v);
            let dy_free = &dy * &free;
            let mut dx = &dy * &m + &(&dy_free * &c.exp_s);
            let mut ds = &dy_free * &c.x * &c.exp_s;
            ds += &(free.clone() * d_ld).broadcast(ds.raw_dim()).expect("row broadcast");
            let d_raw = &ds * &c.tanh_raw.mapv(|t| 1.0 - t * t) * &free;
            let d_o = concatenate(Axis(1), &[d_raw.view(), dy_free.view()]).expect("same rows");
            let g2 = linear_backward(c.h.view(), self.params.mat(ids.w2), d_o.view());
            grads.add(ids.w2, g2.dw);
            grads.add(ids.b2, g2.db);
            let mut da = g2.dx;
            Zip::from(&mut da).and(&c.h).for_each(|g, &h| *g *= 1.0 - h * h);
            let g1 = linear_backward(c.inp.view(), self.params.mat(ids.w1), da.view());
            grads.add(ids.w1, g1.dw);
            grads.add(ids.b1, g1.db);
            dx += &(&g1.dx.slice(s![.., ..self.dim]) * &m);
            let mut demb = Array2::zeros((self.num_labels, self.config.embedding));
            for (r, &l) in labels.iter().enumerate() {
                let mut row = demb.row_mut(l);
                row += &g1.dx.slice(s![r, self.dim..]);
            }
            grads.add(ids.emb, demb);
            dy = dx;
        }
        Ok(loss)
    }

    /// Draws `count` features from `f⁻¹(u | label)` with `u ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, label: usize, count: usize, rng: &mut R) -> Result<Array2<f64>> {
        self.sample_labels(&vec![label; count], rng)
    }

    /// One draw per entry of `labels`.
    pub fn sample_labels<R: Rng + ?Sized>(&self, labels: &[usize], rng: &mut R) -> Result<Array2<f64>> {
        let u = self.sample_latent(labels.len(), rng)?;
        self.flow_inverse(u.view(), labels)
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Array2<f64>> {
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        Ok(Array2::from_shape_fn((count, self.dim), |_| rng.sample(StandardNormal)))
    }

    pub fn snapshot(&self) -> FlowSnapshot {
        FlowSnapshot { model: self.clone() }
    }

    /// Current-batch NLL plus, when `replay` is given, the NLL under this flow of
    /// `replay_count` features generated by the snapshot for its own labels.
    /// Returns `(total, current, replayed)`.
    pub fn incremental_nll_loss<R: Rng + ?Sized>(
        &self,
        feat: ArrayView2<f64>,
        labels: &[usize],
        replay: Option<&FlowSnapshot>,
        replay_count: usize,
        rng: &mut R,
    ) -> Result<(f64, f64, f64)> {
        let current = self.nll_loss(feat, labels)?;
        let replayed = match self.replay_batch(replay, replay_count, rng)? {
            Some((x, y)) => self.nll_loss(x.view(), &y)?,
            None => 0.0,
        };
        Ok((current + replayed, current, replayed))
    }

    /// Gradient version of [`Self::incremental_nll_loss`].
    pub fn incremental_nll_backward<R: Rng + ?Sized>(
        &self,
        feat: ArrayView2<f64>,
        labels: &[usize],
        replay: Option<&FlowSnapshot>,
        replay_count: usize,
        rng: &mut R,
        grads: &mut Grads,
    ) -> Result<(f64, f64, f64)> {
        let current = self.nll_backward(feat, labels, 1.0, grads)?;
        let replayed = match self.replay_batch(replay, replay_count, rng)? {
            Some((x, y)) => self.nll_backward(x.view(), &y, 1.0, grads)?,
            None => 0.0,
        };
        Ok((current + replayed, current, replayed))
    }

    fn replay_batch<R: Rng + ?Sized>(
        &self,
        replay: Option<&FlowSnapshot>,
        replay_count: usize,
        rng: &mut R,
    ) -> Result<Option<(Array2<f64>, Vec<usize>)>> {
        if replay_count == 0 {
            return Ok(None);
        }
        let snap = replay.ok_or(Error::MissingSnapshot)?;
        let old = snap.labels();
        if old.is_empty() {
            return Err(Error::MissingSnapshot);
        }
        let y: Vec<usize> = (0..replay_count).map(|_| old[rng.random_range(0..old.len())]).collect();
        let x = snap.model.sample_labels(&y, rng)?;
        Ok(Some((x, y)))
    }
}

struct LayerParts {
    m: Array1<f64>,
    free: Array1<f64>,
    inp: Array2<f64>,
    h: Array2<f64>,
    tanh_raw: Array2<f64>,
}

/// Frozen copy of a flow and the labels it had been trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSnapshot {
    model: FlowModel,
}

impl FlowSnapshot {
    pub fn labels(&self) -> Vec<usize> {
        self.model.registered_labels()
    }

    pub fn log_prob(&self, feat: ArrayView2<f64>, labels: &[usize]) -> Result<Array1<f64>> {
        self.model.log_prob(feat, labels)
    }

    pub fn sample<R: Rng + ?Sized>(&self, label: usize, count: usize, rng: &mut R) -> Result<Array2<f64>> {
        self.model.sample(label, count, rng)
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flow(d: usize) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = FlowModel::new(d, 3, FlowConfig::default(), &mut rng).unwrap();
        f.register_labels(&[0, 1]).unwrap();
        f
    }

    fn randomize(f: &mut FlowModel, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in f.param_ids() {
            f.params_mut()
                .get_mut(id)
                .mapv_inplace(|v| v + scale * rng.sample::<f64, _>(StandardNormal));
        }
        f.standardizer.mean = Array1::from_shape_fn(f.dim, |j| 0.3 * j as f64);
        f.standardizer.std = Array1::from_shape_fn(f.dim, |j| 0.5 + 0.25 * j as f64);
    }

    #[test]
    fn identity_at_init() {
        let f = flow(2);
        let x = arr2(&[[0.3, -1.2], [2.0, 0.5]]);
        let (u, ld) = f.flow_forward(x.view(), &[0, 1]).unwrap();
        assert_eq!(u, x);
        assert!(ld.iter().all(|&v| v == 0.0));
        let lp = f.log_prob(arr2(&[[0.0, 0.0]]).view(), &[0]).unwrap();
        assert!((lp[0] + (2.0 * PI).ln()).abs() < 1e-12);
        assert!(matches!(f.log_prob(x.view(), &[0, 2]), Err(Error::UnregisteredLabel(2))));
        assert!(matches!(
            f.log_prob(arr2(&[[f64::NAN, 0.0]]).view(), &[0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn roundtrip_after_randomization() {
        let mut f = flow(5);
        randomize(&mut f, 3, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((64, 5), |_| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let (u, _) = f.flow_forward(x.view(), &labels).unwrap();
        let back = f.flow_inverse(u.view(), &labels).unwrap();
        let err = (&back - &x).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut f = flow(3);
        randomize(&mut f, 4, 0.2);
        let x = arr2(&[[0.5, -1.0, 0.2], [1.5, 0.3, -0.7], [-0.4, 0.8, 1.1]]);
        let labels = [0, 1, 1];
        let mut grads = Grads::for_store(f.params());
        f.nll_backward(x.view(), &labels, 1.0, &mut grads).unwrap();
        let h = 1e-6;
        for id in f.param_ids() {
            let g = grads.get(id).unwrap().as_standard_layout().into_owned();
            for k in 0..g.len() {
                let orig = f.params.get(id).as_slice().unwrap()[k];
                f.params.get_mut(id).as_slice_mut().unwrap()[k] = orig + h;
                let lp = f.nll_loss(x.view(), &labels).unwrap();
                f.params.get_mut(id).as_slice_mut().unwrap()[k] = orig - h;
                let lm = f.nll_loss(x.view(), &labels).unwrap();
                f.params.get_mut(id).as_slice_mut().unwrap()[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.as_slice().unwrap()[k];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-2),
                    "{} [{k}]: fd {fd} vs {an}",
                    f.params.name(id)
                );
            }
        }
    }

    #[test]
    fn replay_without_snapshot_is_rejected() {
        let f = flow(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = arr2(&[[0.0, 0.0]]);
        assert!(matches!(
            f.incremental_nll_loss(x.view(), &[0], None, 4, &mut rng),
            Err(Error::MissingSnapshot)
        ));
        let (total, cur, rep) = f.incremental_nll_loss(x.view(), &[0], None, 0, &mut rng).unwrap();
        assert_eq!((total, rep), (cur, 0.0));
    }
}
