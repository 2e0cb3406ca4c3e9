//! Fixtures shared by the benchmarks.

use tnml_core::{build_mps, init_dense, Distribution, FeatureMap, FeatureSet, InitSpec, Scheme, TensorNetwork};

/// Dense-initialized MPS classifier with ten classes on the middle site.
pub fn mps(sites: usize, bond_dim: usize) -> TensorNetwork {
    let net = build_mps(sites, 2, bond_dim, 10, sites / 2).expect("valid shape");
    let spec = InitSpec {
        scheme: Scheme::Target(1.0),
        distribution: Distribution::Normal,
        seed: 1,
    };
    init_dense(&net, &spec).expect("init").0
}

/// `n` deterministic pseudo-images of `sites` pixels in [0, 1].
pub fn features(n: usize, sites: usize) -> FeatureSet {
    let mut data = Vec::with_capacity(n * sites * 2);
    for k in 0..n * sites {
        let x = ((k as f64 * 0.618_033_988_75).fract() * 7.0).fract();
        data.extend(FeatureMap::Linear.apply(x));
    }
    FeatureSet {
        n_features: sites,
        data,
        labels: (0..n).map(|i| i % 10).collect(),
    }
}
