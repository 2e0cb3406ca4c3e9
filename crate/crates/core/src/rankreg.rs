//! Trainable soft bond dimensions.
//!
//! A rank regularizer sits on one internal edge as a diagonal matrix whose
//! entries follow a shifted sigmoid, `m_k = σ(γ (d − k − ½))`. The shift `d`
//! is the soft bond dimension: an integer `d` leaves exactly `d` entries
//! above one half. With every `m_k = 1` the network is unchanged. For
//! inference the masks are rounded to a 0/1 projector and the network is
//! truncated so that no regularizer tensor remains.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::network::{EdgeId, NodeId, TensorNetwork};

pub const DEFAULT_SHARPNESS: f64 = 10.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How the regularizer diagonals are evaluated in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Sigmoid masks; differentiable in the soft dimension.
    Soft,
    /// Masks rounded to 1 where `m_k >= threshold`, else 0, keeping at least
    /// the first index. Carries no gradient.
    Hard { threshold: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRegularizer {
    pub edge: EdgeId,
    /// Soft bond dimension `d`, kept within `[0, max_dim]`.
    pub soft_dim: f64,
    /// Sigmoid sharpness `γ`.
    pub sharpness: f64,
    pub max_dim: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal of a regularizer with soft dimension `d` over `dim` indices.
pub fn mask_diagonal(soft_dim: f64, dim: usize, sharpness: f64) -> Vec<f64> {
    (0..dim)
        .map(|k| sigmoid(sharpness * (soft_dim - k as f64 - 0.5)))
        .collect()
}

/// `∂m_k/∂d = γ m_k (1 − m_k)`.
pub fn mask_slope(soft_dim: f64, dim: usize, sharpness: f64) -> Vec<f64> {
    mask_diagonal(soft_dim, dim, sharpness)
        .into_iter()
        .map(|m| sharpness * m * (1.0 - m))
        .collect()
}

/// Indices kept after rounding; never empty.
pub fn kept_indices(mask: &[f64], threshold: f64) -> Vec<usize> {
    let kept: Vec<usize> = (0..mask.len()).filter(|&k| mask[k] >= threshold).collect();
    if kept.is_empty() {
        // the largest entry survives so the bond is never severed
        let best = (0..mask.len())
            .max_by(|&a, &b| mask[a].total_cmp(&mask[b]))
            .unwrap_or(0);
        vec![best]
    } else {
        kept
    }
}

impl RankRegularizer {
    pub fn new(edge: EdgeId, max_dim: usize, sharpness: f64) -> Self {
        Self {
            edge,
            soft_dim: max_dim as f64,
            sharpness,
            max_dim,
        }
    }

    pub fn mask(&self) -> Vec<f64> {
        mask_diagonal(self.soft_dim, self.max_dim, self.sharpness)
    }

    pub fn mask_for(&self, mode: MaskMode) -> Vec<f64> {
        match mode {
            MaskMode::Soft => self.mask(),
            MaskMode::Hard { threshold } => {
                let mut hard = vec![0.0; self.max_dim];
                for k in kept_indices(&self.mask(), threshold) {
                    hard[k] = 1.0;
                }
                hard
            }
        }
    }

    pub fn slope(&self) -> Vec<f64> {
        mask_slope(self.soft_dim, self.max_dim, self.sharpness)
    }

    /// Soft extent `Σ_k m_k`.
    pub fn soft_extent(&self) -> f64 {
        self.mask().iter().sum()
    }

    /// Bond dimension after rounding at `threshold`.
    pub fn truncated_dim(&self, threshold: f64) -> usize {
        kept_indices(&self.mask(), threshold).len()
    }

    pub fn clamp(&mut self) {
        self.soft_dim = self.soft_dim.clamp(0.0, self.max_dim as f64);
    }
}

/// One regularizer per internal edge, starting at the full bond dimension.
///
/// The network itself is returned unchanged: regularizers are applied during
/// contraction rather than stored as nodes.
pub fn insert_regularizers(net: &TensorNetwork, sharpness: f64) -> Result<(TensorNetwork, Vec<RankRegularizer>)> {
    let regs: Vec<RankRegularizer> = net
        .internal_edges()
        .into_iter()
        .map(|e| RankRegularizer::new(e, net.edge(e).map(|x| x.dim).unwrap_or(1), sharpness))
        .collect();
    if regs.is_empty() {
        return Err(Error::Structure("network has no internal edges to regularize".into()));
    }
    Ok((net.clone(), regs))
}

/// Checks that every regularizer sits on an internal edge of matching extent.
pub fn check_regularizers(net: &TensorNetwork, regs: &[RankRegularizer]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in regs {
        let edge = net.edge(r.edge)?;
        if !edge.is_internal() {
            return Err(Error::Structure(format!("edge {} is external", r.edge)));
        }
        if edge.dim != r.max_dim {
            return Err(Error::Dimension(format!(
                "regularizer on edge {} has {} entries, edge extent is {}",
                r.edge, r.max_dim, edge.dim
            )));
        }
        if !seen.insert(r.edge) {
            return Err(Error::Structure(format!("edge {} regularized twice", r.edge)));
        }
        if r.sharpness <= 0.0 {
            return Err(Error::Range("sharpness must be positive".into()));
        }
    }
    Ok(())
}

/// Softened parameter count and its gradient with respect to each soft
/// dimension.
///
/// Each trainable node contributes the product of its axis extents, where a
/// regularized axis counts `Σ_k m_k` instead of its full extent.
pub fn soft_param_count_with_grad(net: &TensorNetwork, regs: &[RankRegularizer]) -> (f64, Vec<f64>) {
    let by_edge: BTreeMap<EdgeId, usize> = regs.iter().enumerate().map(|(i, r)| (r.edge, i)).collect();
    let extents: Vec<f64> = regs.iter().map(RankRegularizer::soft_extent).collect();
    let slopes: Vec<f64> = regs.iter().map(|r| r.slope().iter().sum()).collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; regs.len()];
    for (_, node) in net.nodes() {
        if node.frozen {
            continue;
        }
        let factors: Vec<(f64, Option<usize>)> = (0..node.tensor.rank())
            .map(|axis| match node.leg(axis).and_then(|e| by_edge.get(&e)) {
                Some(&r) => (extents[r], Some(r)),
                None => (node.tensor.shape()[axis] as f64, None),
            })
            .collect();
        total += factors.iter().map(|f| f.0).product::<f64>();
        for (i, &(_, reg)) in factors.iter().enumerate() {
            if let Some(r) = reg {
                let others: f64 = factors
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, f)| f.0)
                    .product();
                grad[r] += others * slopes[r];
            }
        }
    }
    (total, grad)
}

pub fn soft_param_count(net: &TensorNetwork, regs: &[RankRegularizer]) -> f64 {
    soft_param_count_with_grad(net, regs).0
}

/// Penalty attached to the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Penalty {
    /// Softened parameter count over the full-size count.
    SoftParams,
    /// `Σ d_e / Σ D_e`.
    L1,
    /// `Σ d_e² / Σ D_e²`.
    L2,
}

impl std::str::FromStr for Penalty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_params" | "params" => Ok(Self::SoftParams),
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            _ => Err(Error::Config(format!("unknown penalty {s:?}"))),
        }
    }
}

/// Normalized penalty value and its gradient in the soft dimensions.
pub fn penalty_with_grad(net: &TensorNetwork, regs: &[RankRegularizer], penalty: Penalty) -> (f64, Vec<f64>) {
    match penalty {
        Penalty::SoftParams => {
            let full = net.param_count().max(1) as f64;
            let (count, grad) = soft_param_count_with_grad(net, regs);
            (count / full, grad.into_iter().map(|g| g / full).collect())
        }
        Penalty::L1 => {
            let norm: f64 = regs.iter().map(|r| r.max_dim as f64).sum::<f64>().max(1.0);
            let value = regs.iter().map(|r| r.soft_dim).sum::<f64>() / norm;
            (value, vec![1.0 / norm; regs.len()])
        }
        Penalty::L2 => {
            let norm: f64 = regs.iter().map(|r| (r.max_dim * r.max_dim) as f64).sum::<f64>().max(1.0);
            let value = regs.iter().map(|r| r.soft_dim * r.soft_dim).sum::<f64>() / norm;
            (value, regs.iter().map(|r| 2.0 * r.soft_dim / norm).collect())
        }
    }
}

/// `task_loss + λ · penalty`, with the penalty normalized so that the
/// untruncated model scores 1 under [`Penalty::SoftParams`].
pub fn penalized_loss(task_loss: f64, net: &TensorNetwork, regs: &[RankRegularizer], lambda: f64, penalty: Penalty) -> f64 {
    if lambda == 0.0 {
        return task_loss;
    }
    task_loss + lambda * penalty_with_grad(net, regs, penalty).0
}

/// What is multiplied into the neighbouring tensor when a regularizer is
/// removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Absorb {
    /// The rounded 0/1 projector. On the kept indices it is the identity,
    /// so absorbing it reduces to slicing and the result equals the
    /// hard-masked network.
    #[default]
    Rounded,
    /// The soft diagonal values of the kept indices.
    Soft,
}

/// Removes every regularizer: bonds are cut down to the kept indices and the
/// diagonal is absorbed into the endpoint nearer the output node (ties go to
/// the lower node id).
pub fn truncate_and_absorb(
    net: &TensorNetwork,
    regs: &[RankRegularizer],
    threshold: f64,
    absorb: Absorb,
) -> Result<TensorNetwork> {
    check_regularizers(net, regs)?;
    let dist = net
        .output_node()
        .map(|o| net.distances_from(o))
        .unwrap_or_default();
    let mut out = net.clone();
    for reg in regs {
        let mask = reg.mask();
        let kept = kept_indices(&mask, threshold);
        let slots = net.edge(reg.edge)?.slots.clone();
        let host = slots
            .iter()
            .map(|s| s.node)
            .min_by_key(|n| (dist.get(n).copied().unwrap_or(usize::MAX), *n))
            .expect("internal edge has slots");
        let mut host_done = false;
        for slot in &slots {
            let node = out.node_mut(slot.node)?;
            let mut t = node.tensor.select_axis(slot.axis, &kept)?;
            if absorb == Absorb::Soft && slot.node == host && !host_done {
                let weights: Vec<f64> = kept.iter().map(|&k| mask[k]).collect();
                t = t.scale_axis(slot.axis, &weights)?;
                host_done = true;
            }
            node.tensor = t;
        }
        out.resize_edge(reg.edge, kept.len())?;
    }
    out.validate()?;
    Ok(out)
}

/// One spectrum row per regularized edge.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumRow {
    pub edge_index: usize,
    pub soft_dim: f64,
    pub truncated_dim: usize,
}

pub fn spectrum(regs: &[RankRegularizer], threshold: f64) -> Vec<SpectrumRow> {
    regs.iter()
        .enumerate()
        .map(|(i, r)| SpectrumRow {
            edge_index: i,
            soft_dim: r.soft_dim,
            truncated_dim: r.truncated_dim(threshold),
        })
        .collect()
}

pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut s = String::from("edge_index,soft_dim,truncated_dim\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.edge_index, r.soft_dim, r.truncated_dim));
    }
    s
}

/// Multiply–add count of the default forward contraction, with each edge in
/// `masked` costing one extra pass over the tensor that hosts its diagonal.
pub fn forward_flops(net: &TensorNetwork, masked: &[EdgeId]) -> Result<u64> {
    crate::autodiff::schedule_cost(net, masked)
}

/// Lowest node id on an edge: where its regularizer diagonal is applied.
pub(crate) fn mask_host(net: &TensorNetwork, edge: EdgeId) -> Option<NodeId> {
    net.edge(edge).ok()?.slots.iter().map(|s| s.node).min()
}
