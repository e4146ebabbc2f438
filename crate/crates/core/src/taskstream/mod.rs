//! Dataset ingestion, class-partitioned task construction and label-noise injection.

pub mod formats;
mod noise;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use noise::{default_mapping, flip_count, inject_asymmetric_noise, NoiseSpec};

use crate::error::{Error, Result};
use formats::ImagePool;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Cifar10,
    Cifar100,
    Synthetic2d,
}

impl DatasetId {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetId::Mnist | DatasetId::Cifar10 => 10,
            DatasetId::Cifar100 => 100,
            DatasetId::Synthetic2d => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Synthetic2d => "synthetic2d",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            "cifar100" => Ok(DatasetId::Cifar100),
            "synthetic2d" => Ok(DatasetId::Synthetic2d),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }
}

/// Per-example input layout (channels × height × width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A fully loaded dataset before task partitioning.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: DatasetId,
    pub shape: InputShape,
    pub train: ImagePool,
    pub test: ImagePool,
    /// Fine→coarse class table (CIFAR-100 only).
    pub coarse: Option<Vec<usize>>,
}

pub const BLOB_MEANS: [[f64; 2]; 4] = [[-3.0, -3.0], [3.0, -3.0], [-3.0, 3.0], [3.0, 3.0]];
pub const BLOB_STD: f64 = 0.5;

impl Dataset {
    /// Loads `id` from `root`. MNIST is read from `root/mnist`, CIFAR-10 from
    /// `root/cifar-10-batches-bin`, CIFAR-100 from `root/cifar-100-binary`.
    /// `synthetic2d` ignores `root`.
    pub fn load(id: DatasetId, root: &Path) -> Result<Self> {
        match id {
            DatasetId::Mnist => {
                let (train, test) = formats::read_mnist(&root.join("mnist"))?;
                Ok(Self {
                    id,
                    shape: InputShape {
                        channels: 1,
                        height: 28,
                        width: 28,
                    },
                    train,
                    test,
                    coarse: None,
                })
            }
            DatasetId::Cifar10 => {
                let (train, test) = formats::read_cifar10(&root.join("cifar-10-batches-bin"))?;
                Ok(Self::cifar(id, train, test, None))
            }
            DatasetId::Cifar100 => {
                let (train, test, coarse) = formats::read_cifar100(&root.join("cifar-100-binary"))?;
                Ok(Self::cifar(id, train, test, Some(coarse)))
            }
            DatasetId::Synthetic2d => Ok(Self::synthetic2d(500, 100, 0)),
        }
    }

    fn cifar(id: DatasetId, train: ImagePool, test: ImagePool, coarse: Option<Vec<usize>>) -> Self {
        Self {
            id,
            shape: InputShape {
                channels: 3,
                height: 32,
                width: 32,
            },
            train,
            test,
            coarse,
        }
    }

    /// Four isotropic Gaussian blobs centred on `BLOB_MEANS` with std `BLOB_STD`.
    pub fn synthetic2d(train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, BLOB_STD).expect("valid std");
        let mut make = |per_class: usize| {
            let n = per_class * BLOB_MEANS.len();
            let mut inputs = Array2::<f32>::zeros((n, 2));
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % BLOB_MEANS.len();
                for j in 0..2 {
                    inputs[[i, j]] = (BLOB_MEANS[c][j] + noise.sample(&mut rng)) as f32;
                }
                labels.push(c);
            }
            ImagePool { inputs, labels }
        };
        let train = make(train_per_class);
        let test = make(test_per_class);
        Self {
            id: DatasetId::Synthetic2d,
            shape: InputShape {
                channels: 1,
                height: 1,
                width: 2,
            },
            train,
            test,
            coarse: None,
        }
    }
}

/// Borrowed view of a single labelled example.
#[derive(Clone, Copy, Debug)]
pub struct LabeledExample<'a> {
    pub input: ArrayView1<'a, f32>,
    pub true_label: usize,
    pub observed_label: usize,
    pub noisy: bool,
}

/// Struct-of-arrays storage for one split; labels are global class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Array2<f32>,
    pub true_labels: Vec<usize>,
    pub observed_labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn is_noisy(&self, i: usize) -> bool {
        self.true_labels[i] != self.observed_labels[i]
    }

    pub fn noise_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_noisy(i)).collect()
    }

    pub fn noisy_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_noisy(i)).count()
    }

    pub fn example(&self, i: usize) -> LabeledExample<'_> {
        LabeledExample {
            input: self.inputs.row(i),
            true_label: self.true_labels[i],
            observed_label: self.observed_labels[i],
            noisy: self.is_noisy(i),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = LabeledExample<'_>> {
        (0..self.len()).map(|i| self.example(i))
    }

    /// Inputs for `indices` as an `f64` batch.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        let width = self.inputs.ncols();
        let mut out = Array2::zeros((indices.len(), width));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).zip_mut_with(&self.inputs.row(i), |d, &s| *d = s as f64);
        }
        out
    }

    pub fn all_inputs(&self) -> Array2<f64> {
        self.inputs.mapv(|v| v as f64)
    }

    pub fn subset(&self, indices: &[usize]) -> Split {
        Split {
            inputs: self.inputs.select(Axis(0), indices),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            observed_labels: indices.iter().map(|&i| self.observed_labels[i]).collect(),
        }
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.len() as u64).to_le_bytes());
        for v in self.inputs.iter() {
            h.update(v.to_le_bytes());
        }
        for (&t, &o) in self.true_labels.iter().zip(&self.observed_labels) {
            h.update((t as u64).to_le_bytes());
            h.update((o as u64).to_le_bytes());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    /// 1-based task index.
    pub task_id: usize,
    pub class_set: Vec<usize>,
    pub shape: InputShape,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    pub noise_rate: f64,
    pub noise: Option<NoiseSpec>,
}

impl TaskDataset {
    pub fn num_classes(&self) -> usize {
        self.class_set.len()
    }

    /// Position of a global class id within this task's head.
    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.class_set.iter().position(|&c| c == global)
    }

    pub fn local_labels(&self, globals: &[usize]) -> Vec<usize> {
        globals
            .iter()
            .map(|&g| self.local_label(g).expect("label outside task class set"))
            .collect()
    }

    /// SHA-256 over class set and all three splits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.task_id as u64).to_le_bytes());
        for &c in &self.class_set {
            h.update((c as u64).to_le_bytes());
        }
        self.train.hash_into(&mut h);
        self.valid.hash_into(&mut h);
        self.test.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// How each class's training pool is divided between train and validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Fraction of each class's training pool held out for validation.
    pub valid_fraction: f64,
    /// Optional cap on training-pool examples per class (applied before the holdout).
    pub max_train_per_class: Option<usize>,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            valid_fraction: 0.125,
            max_train_per_class: None,
        }
    }
}

/// Seeded class permutation cut into `num_tasks` contiguous groups.
pub fn partition_classes(num_classes: usize, num_tasks: usize, class_order_seed: u64) -> Result<Vec<Vec<usize>>> {
    if num_tasks == 0 || !num_classes.is_multiple_of(num_tasks) {
        return Err(Error::Partition(format!(
            "{num_classes} classes cannot be split evenly into {num_tasks} tasks"
        )));
    }
    let per_task = num_classes / num_tasks;
    if per_task < 2 {
        return Err(Error::Partition(format!(
            "{num_tasks} tasks would leave {per_task} class per task; each task needs at least two classes"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(class_order_seed));
    Ok(order.chunks(per_task).map(<[usize]>::to_vec).collect())
}

pub fn build_task_sequence(dataset: &Dataset, num_tasks: usize, class_order_seed: u64) -> Result<Vec<TaskDataset>> {
    build_task_sequence_with(dataset, num_tasks, class_order_seed, &SplitOptions::default())
}

pub fn build_task_sequence_with(
    dataset: &Dataset,
    num_tasks: usize,
    class_order_seed: u64,
    options: &SplitOptions,
) -> Result<Vec<TaskDataset>> {
    if !(0.0..1.0).contains(&options.valid_fraction) {
        return Err(Error::Partition(format!("valid_fraction {} outside [0, 1)", options.valid_fraction)));
    }
    let groups = partition_classes(dataset.id.num_classes(), num_tasks, class_order_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(class_order_seed);
    rng.set_stream(1);
    let mut tasks = Vec::with_capacity(groups.len());
    for (t, class_set) in groups.into_iter().enumerate() {
        let mut train_idx = Vec::new();
        let mut valid_idx = Vec::new();
        for &c in &class_set {
            let mut pool: Vec<usize> = (0..dataset.train.len()).filter(|&i| dataset.train.labels[i] == c).collect();
            if pool.len() < 2 {
                return Err(Error::Partition(format!("class {c} has {} training examples", pool.len())));
            }
            pool.shuffle(&mut rng);
            if let Some(cap) = options.max_train_per_class {
                pool.truncate(cap.max(2));
            }
            let n_valid = (pool.len() as f64 * options.valid_fraction).floor() as usize;
            valid_idx.extend_from_slice(&pool[..n_valid]);
            train_idx.extend_from_slice(&pool[n_valid..]);
        }
        train_idx.sort_unstable();
        valid_idx.sort_unstable();
        let test_idx: Vec<usize> = (0..dataset.test.len())
            .filter(|&i| class_set.contains(&dataset.test.labels[i]))
            .collect();
        tasks.push(TaskDataset {
            task_id: t + 1,
            shape: dataset.shape,
            train: split_from(&dataset.train, &train_idx),
            valid: split_from(&dataset.train, &valid_idx),
            test: split_from(&dataset.test, &test_idx),
            class_set,
            noise_rate: 0.0,
            noise: None,
        });
    }
    Ok(tasks)
}

fn split_from(pool: &ImagePool, indices: &[usize]) -> Split {
    let labels: Vec<usize> = indices.iter().map(|&i| pool.labels[i]).collect();
    Split {
        inputs: pool.inputs.select(Axis(0), indices),
        true_labels: labels.clone(),
        observed_labels: labels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifestEntry {
    pub task_id: usize,
    pub class_set: Vec<usize>,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub noise: Option<NoiseSpec>,
    pub noisy_count: usize,
    pub noisy_per_class: Vec<(usize, usize)>,
    pub fingerprint: String,
}

/// Provenance record of a task sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub dataset: DatasetId,
    pub num_tasks: usize,
    pub class_order_seed: u64,
    pub split: SplitOptions,
    pub tasks: Vec<TaskManifestEntry>,
}

impl TaskManifest {
    pub fn new(dataset: DatasetId, class_order_seed: u64, split: SplitOptions, tasks: &[TaskDataset]) -> Self {
        let entries = tasks
            .iter()
            .map(|t| TaskManifestEntry {
                task_id: t.task_id,
                class_set: t.class_set.clone(),
                train_size: t.train.len(),
                valid_size: t.valid.len(),
                test_size: t.test.len(),
                noise: t.noise.clone(),
                noisy_count: t.train.noisy_count(),
                noisy_per_class: t
                    .class_set
                    .iter()
                    .map(|&c| {
                        let n = (0..t.train.len())
                            .filter(|&i| t.train.true_labels[i] == c && t.train.is_noisy(i))
                            .count();
                        (c, n)
                    })
                    .collect(),
                fingerprint: t.fingerprint(),
            })
            .collect();
        Self {
            dataset,
            num_tasks: tasks.len(),
            class_order_seed,
            split,
            tasks: entries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Dataset {
        Dataset::synthetic2d(50, 10, 3)
    }

    #[test]
    fn partition_rules() {
        assert_eq!(partition_classes(10, 5, 0).unwrap().len(), 5);
        assert_eq!(partition_classes(100, 5, 0).unwrap()[0].len(), 20);
        assert!(partition_classes(10, 10, 0).is_err());
        assert!(partition_classes(10, 3, 0).is_err());
        assert!(partition_classes(10, 0, 0).is_err());
        let groups = partition_classes(10, 5, 9).unwrap();
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_tasks_are_disjoint_and_deterministic() {
        let ds = blobs();
        let a = build_task_sequence(&ds, 2, 4).unwrap();
        let b = build_task_sequence(&ds, 2, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for t in &a {
            assert_eq!(t.class_set.len(), 2);
            assert_eq!(t.train.len() + t.valid.len(), 100);
            assert_eq!(t.test.len(), 20);
            assert!(t.train.true_labels.iter().all(|y| t.class_set.contains(y)));
        }
    }

    #[test]
    fn parse_dataset_id() {
        assert_eq!("MNIST".parse::<DatasetId>().unwrap(), DatasetId::Mnist);
        assert!(matches!("imagenet".parse::<DatasetId>(), Err(Error::UnknownDataset(_))));
        assert_eq!(serde_json::to_string(&DatasetId::Synthetic2d).unwrap(), "\"synthetic2d\"");
    }
}
