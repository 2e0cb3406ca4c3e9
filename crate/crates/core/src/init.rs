//! Variance-matched and copy-node initialization.
//!
//! A contraction element `W` of a network with `V` i.i.d. zero-mean nodes of
//! variance `σ²` and `E` summed edges of extent `D` is a sum of `D^E`
//! uncorrelated products of `V` elements, so `Var(W) = D^E σ^{2V}`. Solving
//! for `σ²` gives the per-element variance that hits a chosen target.
//!
//! Copy-node initialization replaces all but `n_dense` nodes with copy
//! tensors (inputs additionally pinned to a fixed vector `v`), so the
//! variance only has to be matched on the small dense remainder.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Uniform};

use crate::error::{Error, Result};
use crate::network::{effective_hypergraph, Leg, NodeId, TensorNetwork};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    Glorot,
    He,
    Lecun,
    /// Explicit `σ²_target`.
    Target(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Distribution {
    #[default]
    Normal,
    /// Symmetric uniform with half-width `√(3σ²)`.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    pub scheme: Scheme,
    pub distribution: Distribution,
    pub seed: u64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            scheme: Scheme::Target(1.0),
            distribution: Distribution::Normal,
            seed: 0,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glorot" => Ok(Self::Glorot),
            "he" => Ok(Self::He),
            "lecun" => Ok(Self::Lecun),
            other => other
                .strip_prefix("target:")
                .unwrap_or(other)
                .parse::<f64>()
                .map(Self::Target)
                .map_err(|_| Error::Config(format!("unknown init scheme {s:?}"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Glorot => f.write_str("glorot"),
            Self::He => f.write_str("he"),
            Self::Lecun => f.write_str("lecun"),
            Self::Target(v) => write!(f, "target:{v}"),
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::Config(format!("unknown distribution {s:?}"))),
        }
    }
}

impl Scheme {
    /// `σ²_target` for the given fans.
    pub fn target_variance(&self, fan_in: f64, fan_out: f64) -> Result<f64> {
        let v = match *self {
            Self::Glorot => 2.0 / (fan_in + fan_out),
            Self::He => 2.0 / fan_in,
            Self::Lecun => 1.0 / fan_in,
            Self::Target(v) => v,
        };
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(Error::Range(format!("target variance {v} is not a positive finite number")))
        }
    }
}

/// `(σ²_target / D^E)^{1/V}`, evaluated in log space.
pub fn element_variance(target: f64, bond_dim: usize, n_edges: usize, n_nodes: usize) -> Result<f64> {
    element_variance_log(target, n_edges as f64 * (bond_dim as f64).ln(), n_nodes)
}

/// Heterogeneous form: `log_bond_sum = Σ_e ln D_e`.
pub fn element_variance_log(target: f64, log_bond_sum: f64, n_nodes: usize) -> Result<f64> {
    if target.is_nan() || target <= 0.0 || n_nodes == 0 {
        return Err(Error::Range("target variance and node count must be positive".into()));
    }
    let v = ((target.ln() - log_bond_sum) / n_nodes as f64).exp();
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Range(format!("element variance out of double range (log {})", (target.ln() - log_bond_sum) / n_nodes as f64)))
    }
}

/// Statistics of one initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    pub dense_nodes: Vec<NodeId>,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub log_bond_sum: f64,
    pub fan_in: f64,
    pub fan_out: f64,
    pub target_variance: f64,
    pub element_variance: f64,
}

fn sample_into(data: &mut [f64], variance: f64, dist: Distribution, rng: &mut ChaCha8Rng) -> Result<()> {
    match dist {
        Distribution::Normal => {
            let n = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::Range(e.to_string()))?;
            for x in data {
                *x = n.sample(rng);
            }
        }
        Distribution::Uniform => {
            let h = (3.0 * variance).sqrt();
            let u = Uniform::new_inclusive(-h, h).map_err(|e| Error::Range(e.to_string()))?;
            for x in data {
                *x = u.sample(rng);
            }
        }
    }
    Ok(())
}

/// Fans of a (sub)network: product of its input-leg extents and the class
/// count.
pub fn network_fans(net: &TensorNetwork) -> (f64, f64) {
    let mut fan_in = 1.0;
    let mut fan_out = 1.0;
    for (_, e) in net.edges() {
        match e.external {
            Some(Leg::Input(_)) => fan_in *= e.dim as f64,
            Some(Leg::Output) => fan_out = e.dim as f64,
            None => {}
        }
    }
    (fan_in, fan_out)
}

fn init_selected(net: &TensorNetwork, dense: &BTreeSet<NodeId>, spec: &InitSpec) -> Result<(TensorNetwork, InitReport)> {
    let copy: BTreeSet<NodeId> = net.node_ids().into_iter().filter(|n| !dense.contains(n)).collect();
    let eg = effective_hypergraph(net, &copy)?;
    let log_bond_sum: f64 = eg.edge_dims.iter().map(|&d| (d as f64).ln()).sum();
    let (fan_in, fan_out) = network_fans(&eg.subnet);
    let target = spec.scheme.target_variance(fan_in, fan_out)?;
    let variance = element_variance_log(target, log_bond_sum, eg.n_nodes)?;
    let mut out = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for &id in dense {
        let node = out.node_mut(id)?;
        sample_into(node.tensor.data_mut(), variance, spec.distribution, &mut rng)?;
        node.frozen = false;
    }
    Ok((
        out,
        InitReport {
            dense_nodes: dense.iter().copied().collect(),
            n_nodes: eg.n_nodes,
            n_edges: eg.n_edges,
            log_bond_sum,
            fan_in,
            fan_out,
            target_variance: target,
            element_variance: variance,
        },
    ))
}

/// Every node i.i.d. with the variance that puts the contracted tensor at
/// the scheme's target variance.
pub fn init_dense(net: &TensorNetwork, spec: &InitSpec) -> Result<(TensorNetwork, InitReport)> {
    let all: BTreeSet<NodeId> = net.node_ids().into_iter().collect();
    init_selected(net, &all, spec)
}

/// How the dense nodes are picked.
#[derive(Clone, Debug, PartialEq)]
pub enum DenseSelection {
    /// Nodes nearest the output, ties to the lower id.
    Contiguous,
    /// Output node plus a seeded random choice of the rest.
    Random(u64),
    Explicit(BTreeSet<NodeId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CopyInitPlan {
    pub n_dense: usize,
    pub pin_vector: Vec<f64>,
    pub selection: DenseSelection,
}

impl CopyInitPlan {
    pub fn contiguous(n_dense: usize) -> Self {
        Self {
            n_dense,
            pin_vector: vec![1.0, 0.0],
            selection: DenseSelection::Contiguous,
        }
    }

    /// Resolves the dense node set against `net`.
    pub fn dense_nodes(&self, net: &TensorNetwork) -> Result<BTreeSet<NodeId>> {
        let ids = net.node_ids();
        if self.n_dense == 0 || self.n_dense > ids.len() {
            return Err(Error::InvalidSelection(format!(
                "n_dense = {} for a network of {} nodes",
                self.n_dense,
                ids.len()
            )));
        }
        let out = net
            .output_node()
            .ok_or_else(|| Error::InvalidSelection("network has no output leg".into()))?;
        let chosen: BTreeSet<NodeId> = match &self.selection {
            DenseSelection::Contiguous => {
                let dist = net.distances_from(out);
                let mut ranked: Vec<(usize, NodeId)> = ids
                    .iter()
                    .map(|&n| (dist.get(&n).copied().unwrap_or(usize::MAX), n))
                    .collect();
                ranked.sort();
                ranked.into_iter().take(self.n_dense).map(|x| x.1).collect()
            }
            DenseSelection::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let others: Vec<NodeId> = ids.iter().copied().filter(|&n| n != out).collect();
                let mut set: BTreeSet<NodeId> =
                    others.choose_multiple(&mut rng, self.n_dense - 1).copied().collect();
                set.insert(out);
                set
            }
            DenseSelection::Explicit(set) => {
                if set.len() != self.n_dense {
                    return Err(Error::InvalidSelection(format!(
                        "{} nodes listed, n_dense is {}",
                        set.len(),
                        self.n_dense
                    )));
                }
                if !set.contains(&out) {
                    return Err(Error::InvalidSelection("output node must be dense".into()));
                }
                for id in set {
                    net.node(*id).map_err(|_| Error::InvalidSelection(format!("unknown node {id:?}")))?;
                }
                set.clone()
            }
        };
        Ok(chosen)
    }
}

/// Copy tensors on every node outside the dense set, variance-matched dense
/// initialization on the rest.
///
/// A copy node's element is 1 where all of its internal indices agree,
/// times `v[σ]` on each input axis, and 0 elsewhere. Copy nodes stay
/// trainable.
pub fn copy_node_init(net: &TensorNetwork, plan: &CopyInitPlan, spec: &InitSpec) -> Result<(TensorNetwork, InitReport)> {
    let dense = plan.dense_nodes(net)?;
    let (mut out, report) = init_selected(net, &dense, spec)?;
    for id in net.node_ids() {
        if dense.contains(&id) {
            continue;
        }
        let node = net.node(id)?;
        let mut internal = Vec::new();
        let mut inputs = Vec::new();
        for axis in 0..node.tensor.rank() {
            let e = node.leg(axis).expect("validated");
            match net.edge(e)?.external {
                None => internal.push(axis),
                Some(Leg::Input(_)) => {
                    if node.tensor.shape()[axis] != plan.pin_vector.len() {
                        return Err(Error::InvalidSelection(format!(
                            "pin vector has {} entries, input leg of node {id:?} has {}",
                            plan.pin_vector.len(),
                            node.tensor.shape()[axis]
                        )));
                    }
                    inputs.push(axis);
                }
                Some(Leg::Output) => unreachable!("output node is dense"),
            }
        }
        let t = crate::tensor::Tensor::from_fn(node.tensor.shape().to_vec(), node.tensor.labels().to_vec(), |idx| {
            let diagonal = internal.windows(2).all(|w| idx[w[0]] == idx[w[1]]);
            if !diagonal {
                return 0.0;
            }
            inputs.iter().map(|&a| plan.pin_vector[idx[a]]).product()
        })?;
        let n = out.node_mut(id)?;
        n.tensor = t;
        n.frozen = false;
    }
    Ok((out, report))
}

/// Keras-style fans of a single tensor shape.
pub fn tensor_fans(shape: &[usize]) -> (f64, f64) {
    match shape.len() {
        0 => (1.0, 1.0),
        1 => (shape[0] as f64, shape[0] as f64),
        2 => (shape[0] as f64, shape[1] as f64),
        n => {
            let rf: f64 = shape[..n - 2].iter().map(|&d| d as f64).product();
            (shape[n - 2] as f64 * rf, shape[n - 1] as f64 * rf)
        }
    }
}

/// Baseline: each tensor drawn independently with its scheme variance from
/// its own shape, ignoring the network it sits in.
pub fn init_per_tensor(net: &TensorNetwork, spec: &InitSpec) -> Result<TensorNetwork> {
    let mut out = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for id in net.node_ids() {
        let node = out.node_mut(id)?;
        let (fi, fo) = tensor_fans(node.tensor.shape());
        let v = spec.scheme.target_variance(fi, fo)?;
        sample_into(node.tensor.data_mut(), v, spec.distribution, &mut rng)?;
        node.frozen = false;
    }
    Ok(out)
}

/// Sample statistics of contracted-tensor elements over many initializations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloStats {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    /// Standard error of `mean`.
    pub std_error: f64,
}

/// Draws `samples` initializations (`init(i)` for `i in 0..samples`) and
/// records the contracted tensor at the basis input `basis` (one component
/// index per input leg); every output entry counts as one observation.
pub fn monte_carlo_elements<F>(net: &TensorNetwork, samples: usize, basis: &[usize], init: F) -> Result<MonteCarloStats>
where
    F: Fn(u64) -> Result<TensorNetwork> + Sync,
{
    use rayon::prelude::*;
    let legs = net.input_edges();
    if legs.len() != basis.len() {
        return Err(Error::Dimension(format!("{} basis indices for {} input legs", basis.len(), legs.len())));
    }
    let mut inputs = crate::network::Inputs::new();
    for ((&i, &e), &k) in legs.iter().zip(basis) {
        let d = net.edge(e)?.dim;
        if k >= d {
            return Err(Error::Range(format!("basis index {k} for a leg of extent {d}")));
        }
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        inputs.insert(i, v);
    }
    let values: Vec<Vec<f64>> = (0..samples as u64)
        .into_par_iter()
        .map(|s| {
            let n = init(s)?;
            Ok(crate::network::full_contract(&n, &inputs, None)?.into_data())
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = values.into_iter().flatten().collect();
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let variance = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MonteCarloStats {
        samples,
        mean,
        variance,
        std_error: (variance / n).sqrt(),
    })
}
