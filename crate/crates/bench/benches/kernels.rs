use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rblock_core::gamma::{p_exact, solve_gamma_exact};
use rblock_core::mask::sample_pair;
use rblock_core::nn::{conv2d_backward, conv2d_forward, Conv2d};
use rblock_core::train::{rblock_step, ModelSpec, Network};
use rblock_core::{
    rblock_loss, BlockGeometry, DropMethod, DropSpec, LogitsPair, LossWeights, MaskShape, RngStream, Tensor4,
};

fn random_tensor(shape: [usize; 4], rng: &mut RngStream) -> Tensor4 {
    let len = shape.iter().product();
    Tensor4::from_vec(shape, (0..len).map(|_| rng.normal()).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = RngStream::new(1, 0);
    let input = random_tensor([32, 8, 16, 16], &mut rng);
    let layer = Conv2d::new(random_tensor([8, 8, 3, 3], &mut rng), vec![0.0; 8], 1, 1).unwrap();
    let out = conv2d_forward(&input, &layer).unwrap();
    let grad = random_tensor(out.shape(), &mut rng);
    let mut g = c.benchmark_group("conv3x3_32x8x16x16");
    g.bench_function("forward", |b| b.iter(|| conv2d_forward(black_box(&input), &layer).unwrap()));
    g.bench_function("backward", |b| b.iter(|| conv2d_backward(black_box(&input), &layer, &grad).unwrap()));
    g.finish();
}

fn masks(c: &mut Criterion) {
    let shape = MaskShape::new(64, 32, 32);
    let mut g = c.benchmark_group("mask_pair_64x32x32");
    for method in [DropMethod::BDropDml, DropMethod::SDropDml, DropMethod::RDropBlockPair, DropMethod::RDropPair] {
        let spec = DropSpec::new(method, method.default_p());
        let mut rng = RngStream::new(2, 0);
        g.bench_function(BenchmarkId::from_parameter(method.key()), |b| {
            b.iter(|| sample_pair(shape, &spec, &mut rng).unwrap())
        });
    }
    g.finish();
}

fn gamma(c: &mut Criterion) {
    let geom = BlockGeometry::new(32, 32, 3).unwrap();
    let mut g = c.benchmark_group("gamma_32x32_b3");
    g.bench_function("p_exact", |b| b.iter(|| p_exact(black_box(0.05), &geom).unwrap()));
    g.bench_function("solve_exact", |b| b.iter(|| solve_gamma_exact(black_box(0.2), &geom, 1e-12).unwrap()));
    g.finish();
}

fn loss(c: &mut Criterion) {
    let (batch, classes) = (128, 100);
    let mut rng = RngStream::new(3, 0);
    let l1: Vec<f64> = (0..batch * classes).map(|_| rng.normal()).collect();
    let l2: Vec<f64> = (0..batch * classes).map(|_| rng.normal()).collect();
    let pair = LogitsPair::new(l1, l2, classes).unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();
    let w = LossWeights::default();
    c.bench_function("rblock_loss_128x100", |b| b.iter(|| rblock_loss(black_box(&pair), &labels, &w).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let mut rng = RngStream::new(4, 0);
    let spec = ModelSpec::conv_stack([3, 16, 16], 3, &[4, 8, 8], &[0, 1]).unwrap();
    let net = Network::new(spec, &mut rng).unwrap();
    let x = random_tensor([32, 3, 16, 16], &mut rng);
    let labels: Vec<usize> = (0..32).map(|i| i % 3).collect();
    let drop = DropSpec::new(DropMethod::BDropDml, 0.2);
    let pairs: Vec<_> = net.mask_shapes().iter().map(|&s| sample_pair(s, &drop, &mut rng).unwrap()).collect();
    let m1: Vec<&Tensor4> = pairs.iter().map(|p| &p.keep1).collect();
    let m2: Vec<&Tensor4> = pairs.iter().map(|p| &p.keep2).collect();
    let w = LossWeights::default();
    c.bench_function("rblock_step_desk_batch32", |b| {
        b.iter(|| rblock_step(&net, black_box(&x), &labels, &m1, &m2, &w).unwrap())
    });
}

criterion_group!(benches, conv, masks, gamma, loss, train_step);
criterion_main!(benches);
