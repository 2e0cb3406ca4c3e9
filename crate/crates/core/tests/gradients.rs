use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnml_core::train::flatten_grads;
use tnml_core::{
    build_mps, init_dense, inputs_from_flat, insert_regularizers, softmax_cross_entropy, Distribution, Evaluator,
    FeatureSet, InitSpec, MaskMode, Scheme, Tape,
};

fn model(sites: usize, d: usize, seed: u64) -> tnml_core::TensorNetwork {
    let net = build_mps(sites, 2, d, 10, sites / 2).unwrap();
    let spec = InitSpec {
        scheme: Scheme::Target(1.0),
        distribution: Distribution::Normal,
        seed,
    };
    init_dense(&net, &spec).unwrap().0
}

fn features(rng: &mut ChaCha8Rng, n: usize, sites: usize) -> FeatureSet {
    let mut data = Vec::new();
    for _ in 0..n * sites {
        let x: f64 = rng.random();
        data.extend([1.0, x]);
    }
    FeatureSet {
        n_features: sites,
        data,
        labels: (0..n).map(|_| rng.random_range(0..10)).collect(),
    }
}

#[test]
fn backward_is_linear_in_upstream() {
    let net = model(5, 3, 1);
    let (_, regs) = insert_regularizers(&net, 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..10).map(|_| rng.random()).collect();
    let tape = Tape::record(&net, &regs, MaskMode::Soft, &inputs_from_flat(&x, 2), None).unwrap();
    let g1: Vec<f64> = (0..10).map(|_| rng.random::<f64>() - 0.5).collect();
    let g2: Vec<f64> = (0..10).map(|_| rng.random::<f64>() - 0.5).collect();
    let mix: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
    let a = flatten_grads(&tape.backward(&g1).unwrap());
    let b = flatten_grads(&tape.backward(&g2).unwrap());
    let c = flatten_grads(&tape.backward(&mix).unwrap());
    let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for i in 0..c.len() {
        assert!((c[i] - (2.0 * a[i] - 3.0 * b[i])).abs() <= 1e-12 * scale);
    }
}

#[test]
fn batch_gradient_is_sum_of_sample_gradients() {
    let sites = 6;
    let net = model(sites, 3, 3);
    let (_, regs) = insert_regularizers(&net, 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fs = features(&mut rng, 21, sites);
    let ev = Evaluator::new(&net, &regs, MaskMode::Soft).unwrap();
    assert!(ev.uses_fast_path());
    let idx: Vec<usize> = (0..fs.len()).collect();
    let stats = ev.batch(&fs, &idx, true, true).unwrap();
    let batch = flatten_grads(stats.grads.as_ref().unwrap());

    // reference: one tape per sample, summed here
    let mut sum = vec![0.0; batch.len()];
    let mut loss = 0.0;
    for i in 0..fs.len() {
        let tape = Tape::record(&net, &regs, MaskMode::Soft, &inputs_from_flat(fs.sample(i), 2), None).unwrap();
        let (l, g) = softmax_cross_entropy(tape.output().data(), fs.labels[i]).unwrap();
        loss += l;
        for (s, x) in sum.iter_mut().zip(flatten_grads(&tape.backward(&g).unwrap())) {
            *s += x;
        }
    }
    let scale = sum.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for (a, b) in batch.iter().zip(&sum) {
        assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
    }
    assert!((stats.loss_sum - loss).abs() <= 1e-10 * loss);
}

#[test]
fn identity_regularizers_leave_loss_unchanged() {
    let sites = 6;
    let net = model(sites, 4, 5);
    // very sharp masks sitting at full width act as the identity
    let (_, regs) = insert_regularizers(&net, 1e3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fs = features(&mut rng, 40, sites);
    let idx: Vec<usize> = (0..fs.len()).collect();
    let plain = Evaluator::new(&net, &[], MaskMode::Soft).unwrap().batch(&fs, &idx, false, false).unwrap();
    let masked = Evaluator::new(&net, &regs, MaskMode::Soft).unwrap().batch(&fs, &idx, false, false).unwrap();
    let rel = (plain.loss_sum - masked.loss_sum).abs() / plain.loss_sum;
    assert!(rel < 1e-7, "{rel:e}");
}
