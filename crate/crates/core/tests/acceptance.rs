//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported but do not fail `cargo test` unless
//! `ACCEPTANCE_STRICT=1` is set.

use std::path::PathBuf;
use std::time::Instant;

use eraser_core::backbone::{BackboneConfig, BackboneModel, Stem};
use eraser_core::erase::{verify_erasure, ErasureConfig, EvalSet};
use eraser_core::evaluation::{composite_score, compute_summary, AccuracyMatrix};
use eraser_core::flowdensity::{FlowConfig, FlowModel};
use eraser_core::identify::auroc;
use eraser_core::nn::{Adam, AdamConfig, Grads};
use eraser_core::runner::{run_task, ExperimentConfig, RunState, TaskRecord};
use eraser_core::taskstream::{Dataset, DatasetId, InputShape};
use ndarray::{s, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: Option<bool>,
    detail: String,
}

fn line(o: &Outcome) -> String {
    let tag = match o.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    format!("{tag} criterion {} [{}]: {}", o.id, o.name, o.detail)
}

fn data_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data"))
}

// ---------------------------------------------------------------- criterion 1

/// Published (S, A1, A2, F) rows for n = 5.
const TABLE: &[(&str, f64, f64, f64, f64)] = &[
    ("MNIST EWC normal", 81.72, 98.25, 98.63, 1.46),
    ("CIFAR-10 EWC normal", 57.90, 71.15, 74.88, 14.51),
    ("CIFAR-100 EWC normal", 26.93, 32.50, 32.97, 1.56),
    ("MNIST LwF normal", 78.96, 95.14, 98.29, 5.56),
    ("CIFAR-10 EWC noisy", 53.28, 65.12, 69.49, 12.07),
    ("MNIST EWC noisy", 71.84, 87.87, 90.99, 13.65),
    ("MNIST MAS noisy", 69.57, 84.33, 87.95, 8.97),
    ("MNIST EWC+plugin noisy", 74.26, 90.26, 93.87, 10.84),
    ("CIFAR-10 EWC+plugin noisy", 64.78, 78.30, 78.31, 3.42),
    ("MNIST LwF+plugin noisy", 80.52, 96.93, 97.12, 1.98),
];

/// A 5×5 accuracy matrix with exactly the given A1, A2 and F, or `None` when
/// the construction leaves [0, 100].
///
/// Diagonal cells are A1, intermediate cells copy the final column, and
/// `a_kk − a_kn = α + β(n − k)` for k < n with α, β solving the two linear
/// constraints for the A2 and F sums.
fn matrix_with(a1: f64, a2: f64, f: f64) -> Option<AccuracyMatrix> {
    let n = 5usize;
    let nf = n as f64;
    let m_sum: f64 = (1..n).map(|m| m as f64).sum();
    let h: f64 = (1..n).map(|m| 1.0 / m as f64).sum();
    // α(n−1) + β Σm = n(A1 − A2);  α H + β(n−1) = n F
    let (p, q) = ((nf - 1.0, m_sum, nf * (a1 - a2)), (h, nf - 1.0, nf * f));
    let det = p.0 * q.1 - p.1 * q.0;
    let alpha = (p.2 * q.1 - p.1 * q.2) / det;
    let beta = (p.0 * q.2 - p.2 * q.0) / det;
    let mut mat = AccuracyMatrix::new(n);
    for k in 1..=n {
        let last = if k == n { a1 } else { a1 - (alpha + beta * (n - k) as f64) };
        if !(0.0..=100.0).contains(&last) {
            return None;
        }
        mat.record(k, k, a1).ok()?;
        for j in k + 1..=n {
            mat.record(k, j, last).ok()?;
        }
    }
    Some(mat)
}

fn criterion_1() -> Outcome {
    let mut within = 0;
    let mut worst: f64 = 0.0;
    let mut via_matrix = 0;
    let mut bad = Vec::new();
    for &(name, s, a1, a2, f) in TABLE {
        let err = (composite_score(a1, a2, f, 5) - s).abs();
        worst = worst.max(err);
        if err <= 0.05 {
            within += 1;
        } else {
            bad.push(name);
        }
        if let Some(m) = matrix_with(a1, a2, f) {
            let sum = compute_summary(&m).expect("complete matrix");
            let consistent = (sum.a1 - a1).abs() < 1e-9 && (sum.a2 - a2).abs() < 1e-9 && (sum.f - f).abs() < 1e-9;
            if !consistent || (sum.s - s).abs() > 0.05 {
                bad.push(name);
            }
            via_matrix += 1;
        }
    }
    Outcome {
        id: 1,
        name: "metric oracle",
        pass: Some(within >= 5 && bad.is_empty()),
        detail: format!(
            "{within}/{} published rows within ±0.05, max |ΔS| = {worst:.4}; {via_matrix} also rebuilt as full matrices; mismatches {bad:?}",
            TABLE.len()
        ),
    }
}

// ------------------------------------------------------------ flow helpers

fn fit_flow(x: &Array2<f64>, labels: &[usize], num_labels: usize, steps: usize, seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = FlowModel::new(x.ncols(), num_labels, FlowConfig::default(), &mut rng).unwrap();
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    flow.register_labels(&present).unwrap();
    let mut opt = Adam::new(AdamConfig::new(5e-3, 0.0));
    for _ in 0..steps {
        let idx = index::sample(&mut rng, x.nrows(), 128.min(x.nrows())).into_vec();
        let xb = x.select(Axis(0), &idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        flow.observe(xb.view());
        let mut g = Grads::for_store(flow.params());
        flow.nll_backward(xb.view(), &yb, 1.0, &mut g).unwrap();
        let ids = flow.param_ids();
        opt.step(flow.params_mut(), &g, &ids);
    }
    flow
}

fn synthetic_xy(ds: &Dataset) -> (Array2<f64>, Vec<usize>) {
    (ds.train.inputs.mapv(f64::from), ds.train.labels.clone())
}

fn log_abs_det(mut a: Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs())).unwrap();
        if p != c {
            for k in 0..n {
                a.swap([p, k], [c, k]);
            }
        }
        let piv = a[[c, c]];
        acc += piv.abs().ln();
        for r in c + 1..n {
            let factor = a[[r, c]] / piv;
            for k in c..n {
                a[[r, k]] -= factor * a[[c, k]];
            }
        }
    }
    acc
}

fn perturbed_flow(dim: usize, seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = FlowModel::new(dim, 3, FlowConfig::default(), &mut rng).unwrap();
    flow.register_labels(&[0, 1, 2]).unwrap();
    let noise = Normal::new(0.0, 0.3).unwrap();
    let ids = flow.param_ids();
    for id in ids {
        flow.params_mut().get_mut(id).mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    let warm = Array2::from_shape_fn((64, dim), |_| 2.0 * noise.sample(&mut rng) + 1.0);
    flow.observe(warm.view());
    flow
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let ds = Dataset::synthetic2d(500, 100, 7);
    let (x, y) = synthetic_xy(&ds);
    let flow = fit_flow(&x, &y, 4, 1500, 11);

    let (lo, hi, cells) = (-9.0, 9.0, 360usize);
    let step = (hi - lo) / cells as f64;
    let grid = Array2::from_shape_fn((cells * cells, 2), |(i, j)| {
        let c = if j == 0 { i / cells } else { i % cells };
        lo + (c as f64 + 0.5) * step
    });
    let mut masses = Vec::new();
    for label in 0..4 {
        let lp = flow.log_prob(grid.view(), &vec![label; grid.nrows()]).unwrap();
        masses.push(lp.mapv(f64::exp).sum() * step * step);
    }
    let mass_ok = masses.iter().all(|m| (m - 1.0).abs() <= 0.02);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_det: f64 = 0.0;
    let mut worst_trip: f64 = 0.0;
    for dim in 2..=4 {
        let flow = perturbed_flow(dim, 100 + dim as u64);
        for _ in 0..8 {
            let label = rng.random_range(0..3);
            let x0 = Array2::from_shape_fn((1, dim), |_| rng.random_range(-3.0..3.0));
            let (u0, ld) = flow.flow_forward(x0.view(), &[label]).unwrap();
            let h = 1e-5;
            let mut jac = Array2::zeros((dim, dim));
            for j in 0..dim {
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp[[0, j]] += h;
                xm[[0, j]] -= h;
                let up = flow.flow_forward(xp.view(), &[label]).unwrap().0;
                let um = flow.flow_forward(xm.view(), &[label]).unwrap().0;
                for i in 0..dim {
                    jac[[i, j]] = (up[[0, i]] - um[[0, i]]) / (2.0 * h);
                }
            }
            worst_det = worst_det.max((log_abs_det(jac) - ld[0]).abs());
            let back = flow.flow_inverse(u0.view(), &[label]).unwrap();
            worst_trip = worst_trip.max((&back - &x0).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        }
    }
    let pass = mass_ok && worst_det <= 1e-3 && worst_trip < 1e-5;
    Outcome {
        id: 2,
        name: "flow correctness",
        pass: Some(pass),
        detail: format!(
            "grid mass per label {:?} (1 ± 0.02); max |log-det − FD| = {worst_det:.2e} (≤ 1e-3); max round-trip error = {worst_trip:.2e} (< 1e-5)",
            masses.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()
        ),
    }
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let ds = Dataset::synthetic2d(500, 100, 3);
    let (mut x, mut y) = synthetic_xy(&ds);
    let n_out = x.nrows() * 5 / 95;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut rows = Vec::new();
    for _ in 0..n_out {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let radius = rng.random_range(10.0..14.0);
        rows.push([radius * angle.cos(), radius * angle.sin()]);
        y.push(rng.random_range(0..4));
    }
    let outliers = Array2::from_shape_fn((n_out, 2), |(i, j)| rows[i][j]);
    x = ndarray::concatenate(Axis(0), &[x.view(), outliers.view()]).unwrap();
    let flags: Vec<bool> = (0..x.nrows()).map(|i| i >= x.nrows() - n_out).collect();
    let flow = fit_flow(&x, &y, 4, 1500, 13);
    let lp = flow.log_prob(x.view(), &y).unwrap();
    let neg: Vec<f64> = lp.iter().map(|v| -v).collect();
    let a = auroc(&neg, &flags);
    Outcome {
        id: 3,
        name: "outlier detection",
        pass: Some(a >= 0.95),
        detail: format!(
            "AUROC {a:.4} (≥ 0.95) with {n_out} planted outliers among {} points",
            x.nrows()
        ),
    }
}

// ------------------------------------------------------------ MNIST helpers

fn mnist_config(noise: f64, noisy_tasks: Option<Vec<usize>>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::mnist_default();
    cfg.data_dir = data_dir();
    cfg.noise.rate = noise;
    cfg.noise.tasks = noisy_tasks;
    cfg
}

fn run_tasks(state: &mut RunState, upto: usize) -> f64 {
    let start = Instant::now();
    for t in state.completed() + 1..=upto {
        run_task(state, t).expect("task runs");
    }
    start.elapsed().as_secs_f64()
}

// ------------------------------------------------------------ criteria 4, 6

fn criteria_4_and_6(mnist: &Dataset) -> (Outcome, Outcome) {
    let cfg = mnist_config(0.3, Some(vec![1]));
    let mut precisions = Vec::new();
    let mut verdicts = Vec::new();
    for seed in 0..5u64 {
        let mut state = RunState::new(cfg.clone(), mnist, seed).unwrap();
        run_tasks(&mut state, 1);
        let rec: &TaskRecord = &state.records[0];
        precisions.push(rec.noise_precision.unwrap());
        let report = rec.erasure.as_ref().unwrap();
        let v = verify_erasure(report);
        verdicts.push((v.pass, v.relative_prob_drop, v.accuracy_drop));
    }
    let hits = precisions.iter().filter(|&&p| p >= 0.6).count();
    let c4 = Outcome {
        id: 4,
        name: "noise identification precision",
        pass: Some(hits >= 4),
        detail: format!(
            "precision per seed {:?}; {hits}/5 seeds ≥ 0.60 (need 4)",
            precisions.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>()
        ),
    };
    let passes = verdicts.iter().filter(|v| v.0).count();
    let c6 = Outcome {
        id: 6,
        name: "erasure safety",
        pass: Some(passes >= 4),
        detail: format!(
            "(relative drop, accuracy drop) per seed {:?}; {passes}/5 seeds pass (need 4)",
            verdicts
                .iter()
                .map(|v| format!("({:.3}, {:.2})", v.1, v.2))
                .collect::<Vec<_>>()
        ),
    };
    (c4, c6)
}

// ------------------------------------------------------------ criteria 5, 8, 9

fn criteria_5_8_9(mnist: &Dataset) -> (Outcome, Outcome, Outcome) {
    let plugin_cfg = mnist_config(0.5, None);
    let mut base_cfg = plugin_cfg.clone();
    base_cfg.eraser.enabled = false;

    let (mut s_plugin, mut s_base) = (Vec::new(), Vec::new());
    let mut replay_pairs = Vec::new();
    let mut ratios = Vec::new();
    let mut phase_ok = true;
    for seed in 0..3u64 {
        let mut base = RunState::new(base_cfg.clone(), mnist, seed).unwrap();
        let t_base = run_tasks(&mut base, 5);
        s_base.push(compute_summary(&base.matrix).unwrap().s);

        let mut plugin = RunState::new(plugin_cfg.clone(), mnist, seed).unwrap();
        run_tasks(&mut plugin, 1);
        let mut ablation = plugin.clone();
        ablation.config.eraser.flow_replay = false;
        run_tasks(&mut ablation, 2);
        let start = Instant::now();
        run_tasks(&mut plugin, 5);
        let t_plugin = plugin.records[0].phases.total() + start.elapsed().as_secs_f64();
        s_plugin.push(compute_summary(&plugin.matrix).unwrap().s);

        let nll = |st: &RunState| st.records[1].old_task_flow_nll.iter().find(|(k, _)| *k == 1).unwrap().1;
        replay_pairs.push((nll(&plugin), nll(&ablation)));

        let per_task = |st: &RunState| st.records.iter().map(|r| r.phases.total()).sum::<f64>() / 5.0;
        ratios.push((per_task(&plugin) / per_task(&base), t_plugin / t_base));
        phase_ok &= plugin.records.iter().all(|r| r.phases.identify + r.phases.erase <= r.phases.train);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gain = mean(&s_plugin) - mean(&s_base);
    let c5 = Outcome {
        id: 5,
        name: "end-to-end direction",
        pass: Some(gain >= 1.0),
        detail: format!(
            "mean S EWC+plugin {:.2} vs EWC {:.2}, gain {gain:.2} (≥ 1.00); per-seed plugin {:?} base {:?}",
            mean(&s_plugin),
            mean(&s_base),
            s_plugin.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>(),
            s_base.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>()
        ),
    };
    let lower = replay_pairs.iter().filter(|(r, a)| r < a).count();
    let c8 = Outcome {
        id: 8,
        name: "incremental flow replay",
        pass: Some(lower == 3),
        detail: format!(
            "task-1 held-out NLL after task 2 (replay, no replay) {:?}; lower with replay on {lower}/3 seeds",
            replay_pairs
                .iter()
                .map(|(r, a)| format!("({r:.2}, {a:.2})"))
                .collect::<Vec<_>>()
        ),
    };
    let worst = ratios.iter().map(|r| r.0).fold(0.0, f64::max);
    let c9 = Outcome {
        id: 9,
        name: "overhead",
        pass: Some(worst <= 2.0 && phase_ok),
        detail: format!(
            "per-task wall-time ratio plugin/EWC per seed {:?} (≤ 2.0; wall clock {:?}); identify+erase ≤ train on every task: {phase_ok}",
            ratios.iter().map(|r| format!("{:.2}", r.0)).collect::<Vec<_>>(),
            ratios.iter().map(|r| format!("{:.2}", r.1)).collect::<Vec<_>>()
        ),
    };
    (c5, c8, c9)
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = InputShape {
        channels: 1,
        height: 28,
        width: 28,
    };
    let mut model = BackboneModel::new(shape, BackboneConfig::default(), &mut rng).unwrap();
    model.add_head(1, &[3, 8], &mut rng).unwrap();
    let x = Array2::from_shape_fn((32, 784), |_| rng.random_range(0.0..1.0));
    let before = model.forward(x.view(), 1).unwrap().logits;
    let count = model.parameter_count();
    let pseudo = model.expand_head(1).unwrap();
    let expanded = model.forward(x.view(), 1).unwrap().logits;
    let bit_identical = expanded
        .slice(s![.., ..pseudo])
        .iter()
        .zip(before.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    model.prune_head(1, pseudo).unwrap();
    let count_ok = model.parameter_count() == count;

    // The same contract through a full erasure of a dense model.
    let mut dense = BackboneModel::new(
        InputShape {
            channels: 1,
            height: 1,
            width: 2,
        },
        BackboneConfig {
            stem: Stem::Dense { hidden: 16 },
            feature_dim: 2,
            shared_width: 8,
        },
        &mut rng,
    )
    .unwrap();
    dense.add_head(1, &[0, 1], &mut rng).unwrap();
    let sel = EvalSet {
        inputs: Array2::from_shape_fn((20, 2), |_| rng.random_range(-1.0..1.0)),
        labels: (0..20).map(|i| i % 2).collect(),
    };
    let dense_count = dense.parameter_count();
    let report = eraser_core::erase::erase(&mut dense, 1, &sel, &sel, &ErasureConfig::default(), &mut rng).unwrap();
    let erase_ok = report.parameter_count_before == report.parameter_count_after && dense.parameter_count() == dense_count;
    Outcome {
        id: 7,
        name: "structural invariants",
        pass: Some(bit_identical && count_ok && erase_ok),
        detail: format!(
            "pre-expansion logits bit-identical: {bit_identical}; parameter count restored after prune: {count_ok}; after full erasure: {erase_ok}"
        ),
    }
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_7()];
    match Dataset::load(DatasetId::Mnist, &data_dir()) {
        Ok(ds) => {
            let (c4, c6) = criteria_4_and_6(&ds);
            let (c5, c8, c9) = criteria_5_8_9(&ds);
            outcomes.extend([c4, c5, c6, c8, c9]);
        }
        Err(e) => {
            for (id, name) in [
                (4, "noise identification precision"),
                (5, "end-to-end direction"),
                (6, "erasure safety"),
                (8, "incremental flow replay"),
                (9, "overhead"),
            ] {
                outcomes.push(Outcome {
                    id,
                    name,
                    pass: None,
                    detail: format!("MNIST unavailable under {}: {e}", data_dir().display()),
                });
            }
        }
    }
    outcomes.sort_by_key(|o| o.id);
    for o in &outcomes {
        println!("{}", line(o));
    }
    let failed = outcomes.iter().filter(|o| o.pass == Some(false)).count();
    println!("{failed} of {} criteria failing", outcomes.len());
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
