use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnml_core::train::initial_checkpoint;
use tnml_core::{evaluate, train, train_from, Checkpoint, FeatureSet, Splits, TrainConfig};

const SITES: usize = 6;

/// Class 0..3 decided by the first two features; the rest is noise.
fn synthetic(n: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let xs: Vec<f64> = (0..SITES).map(|_| rng.random()).collect();
        labels.push(usize::from(xs[0] > 0.5) * 2 + usize::from(xs[1] > 0.5));
        for x in xs {
            data.extend([1.0, x]);
        }
    }
    FeatureSet { n_features: SITES, data, labels }
}

fn splits() -> Splits {
    Splits {
        train: synthetic(256, 1),
        val: synthetic(64, 2),
        test: Some(synthetic(64, 3)),
    }
}

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.n_sites = SITES;
    cfg.bond_dim = 3;
    cfg.epochs = 3;
    cfg.n_dense = 2;
    cfg.lr = 0.01;
    cfg
}

#[test]
fn same_seed_same_record() {
    let cfg = config();
    let s = splits();
    let (a, ca) = train(&cfg, &s, 0).unwrap();
    let (b, cb) = train(&cfg, &s, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (c, _) = train(&cfg, &s, 1).unwrap();
    assert_ne!(a.epochs[0].train_loss, c.epochs[0].train_loss);
}

#[test]
fn thread_count_does_not_change_results() {
    let mut cfg = config();
    cfg.rank_reg = true;
    cfg.lambda = 0.1;
    let s = splits();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&cfg, &s, 0).unwrap())
    };
    let (a, ca) = run(1);
    let (b, cb) = run(4);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let mut cfg = config();
    cfg.epochs = 0;
    let s = splits();
    let start = initial_checkpoint(&cfg, 0).unwrap();
    let (rec, ckpt) = train_from(&cfg, &s, start.clone(), 0).unwrap();
    assert!(rec.epochs.is_empty());
    assert_eq!(ckpt, start);
}

#[test]
fn training_learns_the_synthetic_rule() {
    let mut cfg = config();
    cfg.epochs = 15;
    let s = splits();
    let (rec, ckpt) = train(&cfg, &s, 0).unwrap();
    assert!(rec.halted.is_none());
    let first = rec.epochs.first().unwrap().train_loss;
    let last = rec.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    let (acc, _) = evaluate(&ckpt, s.test.as_ref().unwrap(), cfg.threshold).unwrap();
    assert!(acc > 0.5, "{acc}");
}

#[test]
fn checkpoint_round_trip_preserves_accuracy() {
    let mut cfg = config();
    cfg.rank_reg = true;
    cfg.lambda = 0.5;
    let s = splits();
    let (_, ckpt) = train(&cfg, &s, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let test = s.test.as_ref().unwrap();
    assert_eq!(evaluate(&back, test, 0.5).unwrap(), evaluate(&ckpt, test, 0.5).unwrap());
}

#[test]
fn accuracy_ignores_thread_count() {
    let cfg = config();
    let s = splits();
    let (_, ckpt) = train(&cfg, &s, 0).unwrap();
    let test = s.test.as_ref().unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| evaluate(&ckpt, test, 0.5).unwrap());
    assert_eq!(one, evaluate(&ckpt, test, 0.5).unwrap());
}
