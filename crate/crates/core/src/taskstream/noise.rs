use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetId, TaskDataset};
use crate::error::{Error, Result};

/// Asymmetric flip specification: each `(source, target)` pair relabels a
/// `rate` fraction of the source class's training examples as `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mapping: Vec<(usize, usize)>,
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self, class_set: &[usize]) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) || !self.rate.is_finite() {
            return Err(Error::Noise(format!("rate {} outside [0, 1]", self.rate)));
        }
        let mut sources = BTreeSet::new();
        for &(s, t) in &self.mapping {
            if s == t {
                return Err(Error::Noise(format!("class {s} maps to itself")));
            }
            if !sources.insert(s) {
                return Err(Error::Noise(format!("class {s} is mapped more than once")));
            }
            for c in [s, t] {
                if !class_set.contains(&c) {
                    return Err(Error::Noise(format!("class {c} is not in the task's class set {class_set:?}")));
                }
            }
        }
        Ok(())
    }
}

/// `round(rate * count)` with halves rounded up.
pub fn flip_count(rate: f64, count: usize) -> usize {
    (rate * count as f64 + 0.5 + 1e-9).floor() as usize
}

const MNIST_PAIRS: [(usize, usize); 4] = [(2, 7), (3, 8), (5, 6), (7, 1)];
// truck→automobile, bird→airplane, deer→horse, cat→dog
const CIFAR10_PAIRS: [(usize, usize); 4] = [(9, 1), (2, 0), (4, 7), (3, 5)];

/// Similar-class mapping restricted to one task's class set.
///
/// MNIST and CIFAR-10 use the published pairs that fall inside the task; when
/// none do, the task's first class is mapped onto its second. CIFAR-100 maps
/// every class to the next class of the same superclass present in the task,
/// cyclically. `synthetic2d` always uses the first→second fallback.
pub fn default_mapping(dataset: DatasetId, class_set: &[usize], coarse: Option<&[usize]>) -> Vec<(usize, usize)> {
    let within = |pairs: &[(usize, usize)]| -> Vec<(usize, usize)> {
        pairs
            .iter()
            .copied()
            .filter(|(s, t)| class_set.contains(s) && class_set.contains(t))
            .collect()
    };
    let mut mapping = match (dataset, coarse) {
        (DatasetId::Mnist, _) => within(&MNIST_PAIRS),
        (DatasetId::Cifar10, _) => within(&CIFAR10_PAIRS),
        (DatasetId::Cifar100, Some(coarse)) => {
            let mut sorted = class_set.to_vec();
            sorted.sort_unstable();
            let mut out = Vec::new();
            for &c in &sorted {
                let group: Vec<usize> = sorted.iter().copied().filter(|&o| coarse[o] == coarse[c]).collect();
                if group.len() > 1 {
                    let pos = group.iter().position(|&o| o == c).unwrap();
                    out.push((c, group[(pos + 1) % group.len()]));
                }
            }
            out
        }
        _ => Vec::new(),
    };
    if mapping.is_empty() && class_set.len() >= 2 {
        mapping.push((class_set[0], class_set[1]));
    }
    mapping
}

/// Flips exactly `flip_count(rate, n_source)` training labels per source class.
/// Validation and test splits are never touched.
pub fn inject_asymmetric_noise(task: &TaskDataset, spec: &NoiseSpec) -> Result<TaskDataset> {
    spec.validate(&task.class_set)?;
    let mut out = task.clone();
    out.noise_rate = spec.rate;
    out.noise = Some(spec.clone());
    if spec.rate == 0.0 {
        return Ok(out);
    }
    let train = &mut out.train;
    for &(source, target) in &spec.mapping {
        let class_count = train.true_labels.iter().filter(|&&y| y == source).count();
        let mut candidates: Vec<usize> = (0..train.len())
            .filter(|&i| train.true_labels[i] == source && train.observed_labels[i] == source)
            .collect();
        let k = flip_count(spec.rate, class_count).min(candidates.len());
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(source as u64);
        candidates.shuffle(&mut rng);
        for &i in &candidates[..k] {
            train.observed_labels[i] = target;
        }
    }
    Ok(out)
}
