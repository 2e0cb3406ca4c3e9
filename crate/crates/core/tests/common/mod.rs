// Shared by the core integration tests and the cli acceptance target.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use tnml_core::network::{Inputs, Leg, NodeId, TensorNetwork};
use tnml_core::tensor::{make_copy_node, Label, Tensor};

pub struct RandomNet {
    pub net: TensorNetwork,
    pub inputs: Inputs,
    pub copies: BTreeSet<NodeId>,
}

/// Small random hypergraph network: 2..=5 nodes, extents 1..=3, a spanning
/// tree plus a few extra (hyper)edges, some input legs and one output leg.
/// With `with_copy`, one or two nodes are copy tensors.
pub fn random_network<R: Rng>(rng: &mut R, with_copy: bool) -> RandomNet {
    let n = rng.random_range(2..=5usize);
    let n_copy = if with_copy { rng.random_range(1..=2.min(n - 1)) } else { 0 };
    let is_copy: Vec<bool> = {
        let mut v: Vec<bool> = (0..n).map(|i| i < n_copy).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            v.swap(i, j);
        }
        v
    };
    let copy_dim = rng.random_range(1..=3usize);

    // (members, dim, leg) ; leg None = internal
    let mut plan: Vec<(Vec<usize>, usize, Option<Leg>)> = Vec::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        plan.push((vec![j, i], 0, None));
    }
    for _ in 0..rng.random_range(0..=2) {
        let size = if n >= 3 && rng.random_bool(0.6) { 3 } else { 2 };
        let mut members: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        members.truncate(size);
        plan.push((members, 0, None));
    }
    // promote one tree edge to a hyperedge now and then
    if n >= 3 && rng.random_bool(0.4) {
        let e = rng.random_range(0..n - 1);
        let extra = (0..n).find(|k| !plan[e].0.contains(k)).unwrap();
        plan[e].0.push(extra);
    }
    let mut feature = 0;
    for i in 0..n {
        if rng.random_bool(0.6) {
            plan.push((vec![i], 0, Some(Leg::Input(feature))));
            feature += 1;
        }
    }
    plan.push((vec![rng.random_range(0..n)], 0, Some(Leg::Output)));
    for p in plan.iter_mut() {
        p.1 = if p.0.iter().any(|&m| is_copy[m]) { copy_dim } else { rng.random_range(1..=3) };
    }

    // axes per node, in plan order
    let mut axes: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, p) in plan.iter().enumerate() {
        for &m in &p.0 {
            axes[m].push(e);
        }
    }
    let mut net = TensorNetwork::new();
    for i in 0..n {
        let shape: Vec<usize> = axes[i].iter().map(|&e| plan[e].1).collect();
        let labels: Vec<Label> = (0..shape.len() as u32).map(Label).collect();
        let t = if is_copy[i] {
            make_copy_node(shape.len(), copy_dim).unwrap()
        } else {
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(shape, labels, data).unwrap()
        };
        net.add_node(t);
    }
    let mut inputs = Inputs::new();
    for (e, (members, dim, leg)) in plan.iter().enumerate() {
        let slot = |m: usize| (NodeId(m), axes[m].iter().position(|&x| x == e).unwrap());
        match leg {
            None => {
                let slots: Vec<(NodeId, usize)> = members.iter().map(|&m| slot(m)).collect();
                net.connect(&slots).unwrap();
            }
            Some(Leg::Input(f)) => {
                let (node, axis) = slot(members[0]);
                net.attach_input(node, axis, *f).unwrap();
                inputs.insert(*f, (0..*dim).map(|_| rng.sample(StandardNormal)).collect());
            }
            Some(Leg::Output) => {
                let (node, axis) = slot(members[0]);
                net.attach_output(node, axis).unwrap();
            }
        }
    }
    net.validate().unwrap();
    let copies = (0..n).filter(|&i| is_copy[i]).map(NodeId).collect();
    RandomNet { net, inputs, copies }
}

/// Nested loops over every index assignment: the output entry `c` is the
/// sum of the product of all node entries times the input components.
pub fn brute_force(net: &TensorNetwork, inputs: &Inputs) -> Vec<f64> {
    let edges: Vec<(Label, usize, Option<Leg>)> = net.edges().map(|(id, e)| (id, e.dim, e.external)).collect();
    let pos = |id: Label| edges.iter().position(|e| e.0 == id).unwrap();
    let out_pos = edges.iter().position(|e| e.2 == Some(Leg::Output));
    let n_out = out_pos.map_or(1, |p| edges[p].1);
    let nodes: Vec<(&Tensor, Vec<usize>)> = net
        .nodes()
        .map(|(_, node)| (&node.tensor, (0..node.tensor.rank()).map(|a| pos(node.leg(a).unwrap())).collect()))
        .collect();
    let mut out = vec![0.0; n_out];
    let mut assign = vec![0usize; edges.len()];
    let mut idx = Vec::new();
    loop {
        let mut prod = 1.0;
        for (t, legs) in &nodes {
            idx.clear();
            idx.extend(legs.iter().map(|&p| assign[p]));
            prod *= t.get(&idx);
        }
        for (p, e) in edges.iter().enumerate() {
            if let Some(Leg::Input(f)) = e.2 {
                prod *= inputs[&f][assign[p]];
            }
        }
        out[out_pos.map_or(0, |p| assign[p])] += prod;
        // odometer
        let mut k = 0;
        while k < edges.len() {
            assign[k] += 1;
            if assign[k] < edges[k].1 {
                break;
            }
            assign[k] = 0;
            k += 1;
        }
        if k == edges.len() {
            return out;
        }
    }
}

/// max |a − b| / max |b|, with an absolute floor for all-zero references.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
