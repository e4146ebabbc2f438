use eraser_core::evaluation::{composite_score, AccuracyMatrix};
use eraser_core::flowdensity::{FlowConfig, FlowModel};
use eraser_core::identify::{auroc, quantile, select_representative};
use eraser_core::taskstream::{build_task_sequence, flip_count, inject_asymmetric_noise, Dataset, NoiseSpec};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-50.0..50.0f64, (-5i32..5).prop_map(f64::from)], 4..300)
}

proptest! {
    #[test]
    fn selection_takes_the_lowest_floor_pn(s in scores(), p in 0.01..0.49f64) {
        let r = select_representative(&s, p).unwrap();
        let mask = r.selected_mask();
        prop_assert!(r.selected_indices.len() >= (p * s.len() as f64).floor() as usize);
        let max_in = r.selected_indices.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
        let min_out = (0..s.len()).filter(|&i| !mask[i]).map(|i| s[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(max_in <= min_out);
        for i in 0..s.len() {
            if s[i] < r.delta {
                prop_assert!(mask[i]);
            }
        }
    }

    #[test]
    fn selection_grows_with_percentile(s in scores(), p in 0.01..0.3f64, dp in 0.0..0.19f64) {
        let small = select_representative(&s, p).unwrap().selected_indices;
        let large = select_representative(&s, p + dp).unwrap().selected_indices;
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn quantile_is_bounded_and_monotone(s in scores(), p in 0.0..1.0f64, q in 0.0..1.0f64) {
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (a, b) = (quantile(&s, p.min(q)), quantile(&s, p.max(q)));
        prop_assert!(lo <= a && a <= b && b <= hi);
    }

    #[test]
    fn auroc_flips_under_negation(s in scores(), seed in any::<u64>()) {
        let flags: Vec<bool> = (0..s.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        prop_assume!(flags.iter().any(|f| !f));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &flags) + auroc(&neg, &flags) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composite_score_orders(a1 in 1.0..100.0f64, a2 in 1.0..99.0f64, f in 0.0..50.0f64, n in 1usize..20) {
        let s = composite_score(a1, a2, f, n);
        prop_assert!(composite_score(a1, a2 + 1.0, f, n) > s);
        prop_assert!(composite_score(a1, a2, f + 1.0, n) < s);
        prop_assert!(s > 0.0 && s < a1.max(a2));
    }

    #[test]
    fn matrix_csv_roundtrip(vals in prop::collection::vec(0.0..100.0f64, 10)) {
        let mut m = AccuracyMatrix::new(4);
        let mut it = vals.iter();
        for j in 1..=4 {
            for k in 1..=j {
                m.record(k, j, *it.next().unwrap()).unwrap();
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        prop_assert_eq!(AccuracyMatrix::read_csv(&path).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noise_flips_exact_counts_on_train_only(rate in 0.0..=1.0f64, seed in any::<u64>()) {
        let ds = Dataset::synthetic2d(60, 10, 1);
        let tasks = build_task_sequence(&ds, 2, 4).unwrap();
        let task = &tasks[0];
        let (src, dst) = (task.class_set[0], task.class_set[1]);
        let noisy = inject_asymmetric_noise(task, &NoiseSpec { mapping: vec![(src, dst)], rate, seed }).unwrap();
        let sources = task.train.true_labels.iter().filter(|&&y| y == src).count();
        prop_assert_eq!(noisy.train.noisy_count(), flip_count(rate, sources));
        for i in 0..noisy.train.len() {
            if noisy.train.is_noisy(i) {
                prop_assert_eq!((noisy.train.true_labels[i], noisy.train.observed_labels[i]), (src, dst));
            }
        }
        prop_assert_eq!(&noisy.test, &task.test);
        prop_assert_eq!(&noisy.valid, &task.valid);
    }

    #[test]
    fn flow_inverts_what_it_maps(seed in any::<u64>(), dim in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = FlowModel::new(dim, 3, FlowConfig::default(), &mut rng).unwrap();
        flow.register_labels(&[0, 1, 2]).unwrap();
        let noise = Normal::new(0.0, 0.2).unwrap();
        for id in flow.param_ids() {
            flow.params_mut().get_mut(id).mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        let x = Array2::from_shape_fn((16, dim), |_| 3.0 * noise.sample(&mut rng));
        flow.observe(x.view());
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let (u, _) = flow.flow_forward(x.view(), &labels).unwrap();
        let back = flow.flow_inverse(u.view(), &labels).unwrap();
        prop_assert!((&back - &x).iter().all(|e| e.abs() < 1e-9));
    }
}
