use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Named seeds derived from one run seed. Every random draw of a run comes
/// from one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub run: u64,
    pub data: u64,
    pub init: u64,
    pub noise: u64,
    pub shuffle: u64,
    pub flow_sampling: u64,
    pub erasure: u64,
}

pub fn derive_seed(run: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl SeedPlan {
    /// `class_order_seed` pins the data seed when the config fixes it.
    pub fn new(run: u64, class_order_seed: Option<u64>) -> Self {
        Self {
            run,
            data: class_order_seed.unwrap_or_else(|| derive_seed(run, "data")),
            init: derive_seed(run, "init"),
            noise: derive_seed(run, "noise"),
            shuffle: derive_seed(run, "shuffle"),
            flow_sampling: derive_seed(run, "flow_sampling"),
            erasure: derive_seed(run, "erasure"),
        }
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent stream of `seed` for task `task_id`.
    pub fn task_rng(seed: u64, task_id: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(task_id as u64);
        r
    }
}
