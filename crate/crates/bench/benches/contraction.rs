use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnml_bench::{features, mps};
use tnml_core::{full_contract, inputs_from_flat, pair_product, Evaluator, Label, MaskMode, Tape, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, labels: &[u32]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, labels.iter().map(|&l| Label(l)).collect(), data).unwrap()
}

fn pairwise(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("pair_product");
    for d in [8usize, 16, 32] {
        let a = random_tensor(&mut rng, vec![d, 10, d], &[0, 1, 2]);
        let b = random_tensor(&mut rng, vec![d, 2, d], &[2, 3, 4]);
        g.bench_with_input(BenchmarkId::new("bond", d), &d, |bch, _| {
            bch.iter(|| pair_product(black_box(&a), black_box(&b), &[]).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    for d in [4usize, 10] {
        let net = mps(196, d);
        let fs = features(1, 196);
        let x = fs.sample(0).to_vec();
        let ev = Evaluator::new(&net, &[], MaskMode::Soft).unwrap();
        g.bench_with_input(BenchmarkId::new("chain", d), &d, |b, _| b.iter(|| ev.logits(black_box(&x)).unwrap()));
        let inputs = inputs_from_flat(&x, 2);
        g.bench_with_input(BenchmarkId::new("tape", d), &d, |b, _| {
            b.iter(|| full_contract(&net, black_box(&inputs), None).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradients");
    g.sample_size(20);
    let net = mps(196, 10);
    let fs = features(32, 196);
    let idx: Vec<usize> = (0..32).collect();
    let ev = Evaluator::new(&net, &[], MaskMode::Soft).unwrap();
    g.bench_function("chain_batch32", |b| b.iter(|| ev.batch(&fs, black_box(&idx), true, false).unwrap()));
    let inputs = inputs_from_flat(fs.sample(0), 2);
    let upstream = vec![1.0; 10];
    g.bench_function("tape_single", |b| {
        b.iter(|| {
            let t = Tape::record(&net, &[], MaskMode::Soft, &inputs, None).unwrap();
            t.backward(black_box(&upstream)).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, pairwise, forward, gradients);
criterion_main!(benches);
