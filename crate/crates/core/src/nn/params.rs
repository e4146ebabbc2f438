use ndarray::{ArrayD, ArrayView1, ArrayView2, Dimension, Ix1, Ix2};
use serde::{Deserialize, Serialize};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// Flat, index-addressed collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<D: Dimension>(&mut self, name: impl Into<String>, value: ndarray::Array<f64, D>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: value.into_dyn(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn set<D: Dimension>(&mut self, id: ParamId, value: ndarray::Array<f64, D>) {
        self.params[id.0].value = value.into_dyn();
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter is not a matrix")
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, f64> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("parameter is not a vector")
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// Euclidean distance between two stores with the same layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (&a.value - &b.value).mapv(|v| v * v).sum())
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient slots aligned with a [`ParamStore`]; `None` means no gradient reached the tensor.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn add<D: Dimension>(&mut self, id: ParamId, g: ndarray::Array<f64, D>) {
        if id.0 >= self.slots.len() {
            self.slots.resize(id.0 + 1, None);
        }
        let g = g.into_dyn();
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn retain(&mut self, keep: &[ParamId]) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !keep.contains(&ParamId(i)) {
                *slot = None;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn grads_accumulate_and_clip() {
        let mut store = ParamStore::new();
        let a = store.add("a", arr1(&[1.0, 2.0]));
        let b = store.add("b", arr2(&[[1.0]]));
        let mut g = Grads::for_store(&store);
        g.add(a, arr1(&[3.0, 0.0]));
        g.add(a, arr1(&[0.0, 4.0]));
        assert!(g.get(b).is_none());
        assert_eq!(g.norm(), 5.0);
        g.clip_norm(1.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
        assert_eq!(store.parameter_count(), 3);
        assert_eq!(store.find("b"), Some(b));
    }
}
