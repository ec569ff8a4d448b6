use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use stampnet::data::{generate, DatasetConfig};
use stampnet::model::{EncoderConfig, ModelConfig, StampNet};
use stampnet::numerics::{
    stream_rng, AdamConfig, AdamState, Padding, SeededRng, Stream, Tape, Tensor,
};
use stampnet::training::{stack_images, train_step};

/// Deterministic values in [0, 1) without pulling in an RNG.
fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| {
        ((i as f64 + seed as f64) * 0.618_033_988_75).fract()
    })
}

fn conv(c: &mut Criterion) {
    let x = uniform(&[8, 8, 28, 28], 1);
    let w = uniform(&[16, 8, 3, 3], 2);
    let b = uniform(&[16], 3);
    c.bench_function("conv2d forward+backward 8x8x28x28 -> 16", |bench| {
        let mut tape = Tape::new();
        bench.iter(|| {
            tape.reset();
            let (xv, wv, bv) = (
                tape.param(x.clone()),
                tape.param(w.clone()),
                tape.param(b.clone()),
            );
            let y = tape.conv2d(xv, wv, Some(bv), Padding::Same).unwrap();
            let loss = tape.sum(y);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn stamp(c: &mut Criterion) {
    let (batch, ny, nx, n) = (8, 29, 29, 6);
    let py = uniform(&[batch, ny], 4);
    let px = uniform(&[batch, nx], 5);
    let ps = uniform(&[batch, n], 6);
    let bank = uniform(&[n, 1, 28, 28], 7);
    let mut group = c.benchmark_group("stamp layer 8x(29x29x6), 28x28 stamps");
    group.bench_function("general", |bench| {
        let mut tape = Tape::new();
        bench.iter(|| {
            tape.reset();
            let (y, x, s, k) = (
                tape.param(py.clone()),
                tape.param(px.clone()),
                tape.param(ps.clone()),
                tape.param(bank.clone()),
            );
            let sl = tape.outer3(y, x, s).unwrap();
            let out = tape.stamp(sl, k).unwrap();
            let loss = tape.sum(out);
            black_box(tape.backward(loss).unwrap());
        })
    });
    group.bench_function("separable", |bench| {
        let mut tape = Tape::new();
        bench.iter(|| {
            tape.reset();
            let (y, x, s, k) = (
                tape.param(py.clone()),
                tape.param(px.clone()),
                tape.param(ps.clone()),
                tape.param(bank.clone()),
            );
            let out = tape.stamp_separable(y, x, s, k).unwrap();
            let loss = tape.sum(out);
            black_box(tape.backward(loss).unwrap());
        })
    });
    group.finish();
}

fn step(c: &mut Criterion) {
    let batch = 16;
    let enc = EncoderConfig {
        block_widths: vec![8, 16, 32],
        dense_width: 128,
        convs_per_block: 1,
        ..Default::default()
    };
    let model = StampNet::new(ModelConfig::new(56, 28, 1, 6).with_encoder(enc), 0).unwrap();
    let data = generate(&DatasetConfig::simple_shapes(56, 1, batch, 0), None).unwrap();
    let indices: Vec<usize> = (0..batch).collect();
    let images = stack_images(&data.samples, &indices).unwrap();
    let cfg = AdamConfig::default();
    let mut group = c.benchmark_group("train step");
    group.sample_size(10);
    group.bench_function("56x56 canvas, batch 16", |bench| {
        bench.iter_batched(
            || (model.clone(), AdamState::new(model.params())),
            |(mut model, mut adam)| {
                let mut rngs: Vec<SeededRng> = (0..batch as u64)
                    .map(|i| stream_rng(0, Stream::Batch, i))
                    .collect();
                black_box(train_step(&mut model, &mut adam, &cfg, &images, 5.0, &mut rngs).unwrap())
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, conv, stamp, step);
criterion_main!(benches);
