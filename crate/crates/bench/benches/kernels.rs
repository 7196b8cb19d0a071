use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use dornet_bench::{bench_model, bench_scene};
use dornet_core::autograd::kernels::{conv2d_forward, deform_forward, deform_sample, ConvGeom, DeformGeom};
use dornet_core::fusion::Dornet;
use dornet_core::objective::{GradientPyramid, LossWeights};
use dornet_core::train::{prepare_sample, sample_gradients};

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn convolutions(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ch, h, w) = (8, 32, 32);
    let x = random(ch * h * w, &mut rng);
    let wt = random(ch * ch * 9, &mut rng);
    let b = vec![0.0f32; ch];
    let g = ConvGeom { cin: ch, h, w, cout: ch, kh: 3, kw: 3, stride: 1, pad: 1 };
    c.bench_function("conv3x3_8ch_32x32", |bn| bn.iter(|| conv2d_forward(&g, black_box(&x), &wt, Some(&b))));

    let dg = DeformGeom { cin: ch, cout: ch, h, w };
    let off: Vec<f32> = random(18 * h * w, &mut rng).into_iter().map(|v| v * 1.5).collect();
    let mask: Vec<f32> = random(9 * h * w, &mut rng).into_iter().map(|v| 0.5 + 0.5 * v).collect();
    c.bench_function("deform_conv_8ch_32x32", |bn| {
        bn.iter(|| {
            let s = deform_sample(&dg, black_box(&x), &off);
            deform_forward(&dg, &s, &mask, &wt)
        })
    });
}

fn model(c: &mut Criterion) {
    let (net, params) = Dornet::init(&bench_model(), 0, false).expect("model");
    let scene = bench_scene(1);
    let sample = prepare_sample::<f32>(&net, &scene, None, 0.0).expect("sample");
    c.bench_function("forward_32x32", |bn| bn.iter(|| net.predict(&params, black_box(&scene.lr_depth), &scene.rgb).unwrap()));
    let ex = GradientPyramid::default();
    c.bench_function("forward_backward_32x32", |bn| {
        bn.iter(|| sample_gradients(&net, &params, black_box(&sample), LossWeights::default(), false, &ex).unwrap())
    });
}

criterion_group!(benches, convolutions, model);
criterion_main!(benches);
