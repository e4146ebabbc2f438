//! Batch kernels under the rayon build and the sequential build.
//!
//! Run `cargo bench -p eraser-core` and
//! `cargo bench -p eraser-core --no-default-features`; both write results
//! under the same benchmark names with a `rayon` or `sequential` suffix, so
//! criterion's reports line the two builds up side by side.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use eraser_core::backbone::{BackboneConfig, BackboneModel};
use eraser_core::flowdensity::{FlowConfig, FlowModel};
use eraser_core::identify::score_features;
use eraser_core::nn::layers::{conv2d_backward, conv2d_forward, ConvShape};
use eraser_core::nn::Grads;
use eraser_core::par;
use eraser_core::taskstream::InputShape;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mode() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = ConvShape {
        in_channels: 1,
        height: 28,
        width: 28,
        out_channels: 8,
        kernel: 5,
    };
    let batch = 128;
    let x = random(batch, 784, &mut rng);
    let w = random(8, 25, &mut rng);
    let b = ndarray::Array1::zeros(8);
    let mut g = c.benchmark_group("conv5x5_128x28x28");
    g.throughput(Throughput::Elements(batch as u64));
    g.bench_function(BenchmarkId::new("forward", mode()), |bch| {
        bch.iter(|| conv2d_forward(&shape, black_box(x.view()), w.view(), b.view()))
    });
    let cache = conv2d_forward(&shape, x.view(), w.view(), b.view());
    let dy = random(batch, cache.out.ncols(), &mut rng);
    g.bench_function(BenchmarkId::new("backward", mode()), |bch| {
        bch.iter(|| conv2d_backward(&shape, &cache, w.view(), black_box(dy.view()), true))
    });
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = InputShape {
        channels: 1,
        height: 28,
        width: 28,
    };
    let mut model = BackboneModel::new(input, BackboneConfig::default(), &mut rng).unwrap();
    model.add_head(1, &[0, 1], &mut rng).unwrap();
    let x = random(128, 784, &mut rng);
    c.bench_function(&format!("backbone_step_128/{}", mode()), |bch| {
        bch.iter(|| {
            let trunk = model.trunk_forward(x.view()).unwrap();
            let tail = model.tail_forward(trunk.feat_b.view(), 1).unwrap();
            let mut grads = Grads::for_store(model.params());
            let d = model.tail_backward(&tail, 1, tail.logits.view(), &mut grads).unwrap();
            model.trunk_backward(&trunk, d.view(), &mut grads);
            grads
        })
    });
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut flow = FlowModel::new(16, 10, FlowConfig::default(), &mut rng).unwrap();
    flow.register_labels(&[0, 1]).unwrap();
    let feats = random(4096, 16, &mut rng);
    flow.observe(feats.view());
    let labels: Vec<usize> = (0..4096).map(|i| i % 2).collect();
    let mut g = c.benchmark_group("flow_scoring_4096");
    g.throughput(Throughput::Elements(4096));
    g.bench_function(mode(), |bch| bch.iter(|| score_features(&flow, black_box(feats.view()), &labels).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, training_step, scoring);
criterion_main!(benches);
