use std::collections::HashMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    step: i32,
}

/// Adam with coupled L2 weight decay (the decay term is added to the gradient).
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    state: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Updates the tensors listed in `trainable` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, trainable: &[ParamId]) {
        let c = self.config;
        for &id in trainable {
            let Some(g) = grads.get(id) else { continue };
            let value = store.get_mut(id);
            let mut g = g.clone();
            if c.weight_decay != 0.0 {
                g.zip_mut_with(value, |gi, &p| *gi += c.weight_decay * p);
            }
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: ArrayD::zeros(value.raw_dim()),
                v: ArrayD::zeros(value.raw_dim()),
                step: 0,
            });
            if st.m.shape() != value.shape() {
                // Tensor was resized (head expansion or pruning); restart its moments.
                *st = Moments {
                    m: ArrayD::zeros(value.raw_dim()),
                    v: ArrayD::zeros(value.raw_dim()),
                    step: 0,
                };
            }
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step);
            let bc2 = 1.0 - c.beta2.powi(st.step);
            ndarray::Zip::from(value)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(&g)
                .for_each(|p, m, v, &gi| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= c.learning_rate * mh / (vh.sqrt() + c.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", arr1(&[5.0, -3.0]));
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0));
        for _ in 0..500 {
            let mut g = Grads::for_store(&store);
            g.add(id, store.get(id).mapv(|v| 2.0 * v));
            opt.step(&mut store, &g, &[id]);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn untouched_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", arr1(&[1.0]));
        let b = store.add("b", arr1(&[1.0]));
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.5));
        let mut g = Grads::for_store(&store);
        g.add(a, arr1(&[1.0]));
        opt.step(&mut store, &g, &[a, b]);
        assert_eq!(store.get(b)[0], 1.0);
        assert!(store.get(a)[0] < 1.0);
    }
}
