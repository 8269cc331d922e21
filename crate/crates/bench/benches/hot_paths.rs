use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xwalk_core::attribution::{shapley_exact, ComponentGame, N_COMPONENTS};
use xwalk_core::lm::{init_model, last_logits, loss_and_grad, Mode, ModelConfig};
use xwalk_core::lora::{attach, LoraConfig};
use xwalk_core::nf4::QuantizedTensor;

fn model_passes(c: &mut Criterion) {
    let mc = ModelConfig { vocab_size: 400, ..ModelConfig::default() };
    let model = attach(init_model::<f32>(&mc).unwrap(), &LoraConfig::default(), 0).unwrap();
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    for len in [128usize, 488] {
        let tokens: Vec<u32> = (0..len).map(|i| (i * 7 % 400) as u32).collect();
        let mut labels = tokens.clone();
        labels.rotate_left(1);
        let mut mask = vec![false; len];
        mask[len - 1] = true;
        g.bench_with_input(BenchmarkId::new("last_logits", len), &tokens, |b, t| {
            b.iter(|| last_logits(&model, black_box(t)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("loss_and_grad", len), &tokens, |b, t| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            b.iter(|| loss_and_grad(&model, black_box(t), &labels, &mask, Mode::Train(&mut rng)).unwrap())
        });
    }
    g.finish();
}

fn quantization(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = ndarray_like(&mut rng, 256, 64);
    let q = QuantizedTensor::quantize(&w, 64).unwrap();
    c.bench_function("nf4/quantize_256x64", |b| b.iter(|| QuantizedTensor::quantize(black_box(&w), 64).unwrap()));
    c.bench_function("nf4/dequantize_256x64", |b| b.iter(|| black_box(&q).dequantize::<f32>()));
}

fn ndarray_like(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

fn shapley(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let values: Vec<f64> = (0..1 << N_COMPONENTS).map(|_| rng.gen()).collect();
    let game = ComponentGame::new(N_COMPONENTS, values).unwrap();
    c.bench_function("shapley/exact_7", |b| b.iter(|| shapley_exact(black_box(&game))));
}

criterion_group!(benches, model_passes, quantization, shapley);
criterion_main!(benches);
