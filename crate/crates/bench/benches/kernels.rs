use criterion::{black_box, criterion_group, criterion_main, Criterion};

use claw_unet::data::{synth_sample, SynthSpec};
use claw_unet::metrics::{average_hausdorff, boundary, confusion, miou};
use claw_unet::nn::{conv2d, max_pool2d, upsample2x, ConvParams};
use claw_unet::Tensor;

fn ramp(dims: [usize; 4]) -> Tensor<f32> {
    Tensor::from_fn4(dims, |n, c, h, w| ((n * 7 + c * 5 + h * 3 + w) % 11) as f32 / 11.0 - 0.5)
}

fn conv(c: &mut Criterion) {
    let x = ramp([4, 32, 64, 64]);
    let p = ConvParams::new(ramp([32, 32, 3, 3]), Some(Tensor::zeros(&[32])), 1, 1);
    c.bench_function("conv3x3 4x32x64x64", |b| b.iter(|| conv2d(black_box(&x), &p).unwrap()));
    c.bench_function("maxpool 4x32x64x64", |b| b.iter(|| max_pool2d(black_box(&x), 2, 2).unwrap()));
    c.bench_function("upsample2x 4x32x64x64", |b| b.iter(|| upsample2x(black_box(&x)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let spec = SynthSpec::default();
    let a = synth_sample(&spec, 0).unwrap().mask;
    let b = synth_sample(&spec, 1).unwrap().mask;
    c.bench_function("miou 128x128", |bn| bn.iter(|| miou(&confusion(black_box(&a), &b).unwrap())));
    c.bench_function("average_hausdorff 128x128", |bn| {
        bn.iter(|| average_hausdorff(&boundary(black_box(&a)), &boundary(&b)))
    });
}

criterion_group!(benches, conv, metrics);
criterion_main!(benches);
