use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use petseg_core::inference::predict_volume;
use petseg_core::metrics::connected_components;
use petseg_core::network::total_loss;
use petseg_core::tensor::{conv3d_forward, Conv3dParams};
use petseg_core::trainer::Adam;
use petseg_core::{
    AdamConfig, Connectivity, Graph, LossWeights, Network, NetworkConfig, SlidingWindowSpec,
    Tensor, Volume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn([2, 16, 24, 24, 16], 1.0, &mut rng);
    let w = Tensor::<f32>::randn([16, 16, 3, 3, 3], 0.1, &mut rng);
    let b = Tensor::<f32>::zeros([16]);
    let same = Conv3dParams::new([1; 3], [1; 3]);
    c.bench_function("conv3d 3x3x3 16->16 on 2x24x24x16", |bench| {
        bench.iter(|| conv3d_forward(black_box(&x), &w, Some(&b), same).unwrap())
    });
    let w2 = Tensor::<f32>::randn([32, 16, 3, 3, 3], 0.1, &mut rng);
    let b2 = Tensor::<f32>::zeros([32]);
    let down = Conv3dParams::new([2; 3], [1; 3]);
    c.bench_function("conv3d 3x3x3 stride 2 16->32", |bench| {
        bench.iter(|| conv3d_forward(black_box(&x), &w2, Some(&b2), down).unwrap())
    });
}

fn components(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = [96, 96, 64];
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
        .collect();
    let mask = Volume::new(dims, [2.0, 2.0, 3.0], [0.0; 3], data).unwrap();
    for conn in [Connectivity::Six, Connectivity::TwentySix] {
        c.bench_function(&format!("connected components 96x96x64 {conn:?}"), |bench| {
            bench.iter(|| connected_components(black_box(&mask), conn).unwrap())
        });
    }
}

fn training(c: &mut Criterion) {
    let cfg = NetworkConfig {
        levels: 3,
        base_channels: 8,
        ..NetworkConfig::default()
    };
    let mut net = Network::<f32>::build(cfg, 3).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), net.params().values());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::from_fn(vec![2, 2, 48, 48, 32], |_| rng.random_range(0.0..1.0));
    let y = Arc::new(Tensor::<f32>::from_fn(vec![2, 1, 48, 48, 32], |i| {
        ((i / 97) % 5 == 0) as u8 as f32
    }));
    let weights = LossWeights::default();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("step levels 3 base 8 batch 2x48x48x32", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let out = net.forward(&g, g.constant(x.clone()), true).unwrap();
            let loss = total_loss(out.main, &out.deep, &y, &weights).unwrap();
            g.backward(loss).unwrap();
            let grads: Vec<_> = out.params.iter().map(|p| p.grad().unwrap()).collect();
            let next = adam.step(net.params().values(), &grads, 1e-4).unwrap();
            net.set_params(next).unwrap();
        })
    });
    group.finish();

    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    let vol = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..96 * 96 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        Volume::new([96, 96, 64], [2.0, 2.0, 3.0], [0.0; 3], data).unwrap()
    };
    let (ct, suv) = (vol(4), vol(5));
    group.bench_function("sliding window 96x96x64 overlap 0.5", |bench| {
        bench.iter(|| predict_volume(&net, &ct, &suv, &SlidingWindowSpec::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, components, training);
criterion_main!(benches);
