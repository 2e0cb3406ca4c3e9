mod common;

use common::{brute_force, random_network, rel_err};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tnml_core::{effective_hypergraph, full_contract, ContractionOrder};

#[test]
fn matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let r = random_network(&mut rng, case % 2 == 0);
        let got = full_contract(&r.net, &r.inputs, None).unwrap();
        let want = brute_force(&r.net, &r.inputs);
        let e = rel_err(got.data(), &want);
        assert!(e < 1e-10, "case {case}: {e:e}\n{}", r.net.topology_text());
    }
}

#[test]
fn random_orders_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..60 {
        let r = random_network(&mut rng, case % 3 == 0);
        let a = ContractionOrder::random(&r.net, &mut rng);
        let b = ContractionOrder::random(&r.net, &mut rng);
        let x = full_contract(&r.net, &r.inputs, Some(&a)).unwrap();
        let y = full_contract(&r.net, &r.inputs, Some(&b)).unwrap();
        assert!(rel_err(x.data(), y.data()) < 1e-10, "case {case}");
        let z = full_contract(&r.net, &r.inputs, Some(&ContractionOrder::outward_from_output(&r.net))).unwrap();
        assert!(rel_err(z.data(), y.data()) < 1e-10, "case {case}");
    }
}

#[test]
fn merging_copy_nodes_leaves_dense_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let r = random_network(&mut rng, true);
        if r.copies.contains(&r.net.output_node().unwrap()) {
            // the output carrier has to stay dense
            assert!(effective_hypergraph(&r.net, &r.copies).is_err());
            continue;
        }
        let g = effective_hypergraph(&r.net, &r.copies).unwrap();
        assert_eq!(g.n_nodes, r.net.n_nodes() - r.copies.len());
    }
}
