//! Fast forward and backward passes for matrix-product-state chains.
//!
//! Each site is contracted with its feature vector into a small matrix, then
//! left and right environments are swept in towards the output site. The
//! backward pass reuses those environments, so one sample costs a constant
//! number of passes over the chain regardless of where the output sits.
//! Results match [`crate::autodiff::Tape`] to rounding.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::network::{EdgeId, Leg, NodeId, TensorNetwork};
use crate::rankreg::{check_regularizers, MaskMode, RankRegularizer};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Site {
    node: NodeId,
    frozen: bool,
    feature: usize,
    l: usize,
    c: usize,
    f: usize,
    r: usize,
    /// Row-major `[l][c][f][r]`.
    data: Vec<f64>,
    /// Canonical axis order expressed as node axes (absent axes skipped).
    node_axes: Vec<usize>,
}

/// A chain network prepared for repeated evaluation.
#[derive(Clone, Debug)]
pub struct ChainModel {
    sites: Vec<Site>,
    out: usize,
    n_classes: usize,
    /// Diagonal on bond `i` (between sites `i` and `i + 1`).
    masks: Vec<Vec<f64>>,
    /// Regularizer index and `∂m/∂d` for soft-masked bonds.
    slopes: Vec<Option<(usize, Vec<f64>)>>,
    n_regs: usize,
    feature_offsets: BTreeMap<usize, usize>,
    feature_len: usize,
}

/// Per-sample intermediates.
#[derive(Clone, Debug, Default)]
pub struct ChainPass {
    m: Vec<Vec<f64>>,
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub max_abs: f64,
}

/// Accumulated gradients in chain layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainGrads {
    sites: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
}

impl ChainGrads {
    pub fn add(&mut self, other: &ChainGrads) {
        for (a, b) in self.sites.iter_mut().zip(&other.sites) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.masks.iter_mut().zip(&other.masks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn internal_neighbours(net: &TensorNetwork, id: NodeId) -> Result<Vec<(EdgeId, NodeId, usize)>> {
    let node = net.node(id)?;
    let mut out = Vec::new();
    for axis in 0..node.tensor.rank() {
        let e = node.leg(axis).expect("validated");
        let edge = net.edge(e)?;
        if edge.external.is_some() {
            continue;
        }
        let others: Vec<NodeId> = edge.slots.iter().map(|s| s.node).filter(|&n| n != id).collect();
        if edge.slots.len() != 2 || others.len() != 1 {
            return Err(Error::Structure(format!("edge {e} is not a plain bond")));
        }
        out.push((e, others[0], axis));
    }
    Ok(out)
}

impl ChainModel {
    /// Recognises a chain: every node has one input leg, plain bonds to at
    /// most two neighbours, and exactly one node carries the output leg.
    pub fn new(net: &TensorNetwork, regs: &[RankRegularizer], mode: MaskMode) -> Result<Self> {
        net.validate()?;
        check_regularizers(net, regs)?;
        let out_node = net
            .output_node()
            .ok_or_else(|| Error::Structure("chain needs an output leg".into()))?;
        let ids = net.node_ids();
        let mut nbrs = BTreeMap::new();
        for &id in &ids {
            let n = internal_neighbours(net, id)?;
            if n.len() > 2 {
                return Err(Error::Structure(format!("node {id:?} has {} bonds", n.len())));
            }
            nbrs.insert(id, n);
        }
        let start = ids
            .iter()
            .copied()
            .find(|id| nbrs[id].len() <= 1)
            .ok_or_else(|| Error::Structure("network is not a chain".into()))?;
        let mut path = vec![start];
        let mut seen = BTreeSet::from([start]);
        while let Some(next) = nbrs[path.last().expect("nonempty")]
            .iter()
            .map(|x| x.1)
            .find(|n| !seen.contains(n))
        {
            seen.insert(next);
            path.push(next);
        }
        if path.len() != ids.len() {
            return Err(Error::Structure("network is not a single chain".into()));
        }

        let reg_on: BTreeMap<EdgeId, usize> = regs.iter().enumerate().map(|(i, r)| (r.edge, i)).collect();
        let mut sites = Vec::with_capacity(path.len());
        let mut masks = Vec::new();
        let mut slopes = Vec::new();
        let mut n_classes = 0;
        let mut out = 0;
        let mut feature_dims = BTreeMap::new();
        for (pos, &id) in path.iter().enumerate() {
            let node = net.node(id)?;
            let mut left = None;
            let mut right = None;
            for &(e, other, axis) in &nbrs[&id] {
                if pos > 0 && other == path[pos - 1] {
                    left = Some(axis);
                } else if pos + 1 < path.len() && other == path[pos + 1] {
                    right = Some((axis, e));
                } else {
                    return Err(Error::Structure("chain closes on itself".into()));
                }
            }
            let mut feature = None;
            let mut class = None;
            for axis in 0..node.tensor.rank() {
                match net.edge(node.leg(axis).expect("validated"))?.external {
                    Some(Leg::Input(i)) if feature.is_none() => feature = Some((axis, i)),
                    Some(Leg::Input(_)) => {
                        return Err(Error::Structure(format!("node {id:?} has two input legs")))
                    }
                    Some(Leg::Output) => class = Some(axis),
                    None => {}
                }
            }
            let (f_axis, feat) =
                feature.ok_or_else(|| Error::Structure(format!("node {id:?} has no input leg")))?;
            let shape = node.tensor.shape();
            let mut node_axes = Vec::new();
            node_axes.extend(left);
            node_axes.extend(class);
            node_axes.push(f_axis);
            node_axes.extend(right.map(|r| r.0));
            let canonical = node.tensor.permute_axes(&node_axes);
            let site = Site {
                node: id,
                frozen: node.frozen,
                feature: feat,
                l: left.map_or(1, |a| shape[a]),
                c: class.map_or(1, |a| shape[a]),
                f: shape[f_axis],
                r: right.map_or(1, |r| shape[r.0]),
                data: canonical.into_data(),
                node_axes,
            };
            if id == out_node {
                out = pos;
                n_classes = site.c;
            }
            feature_dims.insert(feat, site.f);
            if let Some((_, e)) = right {
                match reg_on.get(&e) {
                    Some(&ri) => {
                        masks.push(regs[ri].mask_for(mode));
                        slopes.push(match mode {
                            MaskMode::Soft => Some((ri, regs[ri].slope())),
                            MaskMode::Hard { .. } => None,
                        });
                    }
                    None => {
                        masks.push(vec![1.0; site.r]);
                        slopes.push(None);
                    }
                }
            }
            sites.push(site);
        }
        let mut feature_offsets = BTreeMap::new();
        let mut off = 0;
        for (i, d) in feature_dims {
            feature_offsets.insert(i, off);
            off += d;
        }
        Ok(Self {
            sites,
            out,
            n_classes,
            masks,
            slopes,
            n_regs: regs.len(),
            feature_offsets,
            feature_len: off,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Length of the flat feature buffer: all input vectors concatenated in
    /// input-index order.
    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    fn site_features<'a>(&self, site: &Site, x: &'a [f64]) -> &'a [f64] {
        &x[self.feature_offsets[&site.feature]..][..site.f]
    }

    /// Forward pass over one flat feature buffer.
    pub fn forward(&self, x: &[f64], pass: &mut ChainPass) -> Result<()> {
        if x.len() != self.feature_len {
            return Err(Error::Dimension(format!(
                "feature buffer has {} entries, chain expects {}",
                x.len(),
                self.feature_len
            )));
        }
        let n = self.sites.len();
        let k = self.out;
        pass.m.resize(n, Vec::new());
        pass.left.resize(n, Vec::new());
        pass.right.resize(n, Vec::new());
        pass.u.resize(n, Vec::new());
        pass.w.resize(n, Vec::new());
        let mut max_abs = 0.0f64;
        for (i, s) in self.sites.iter().enumerate() {
            let xf = self.site_features(s, x);
            let m = &mut pass.m[i];
            m.clear();
            m.resize(s.l * s.c * s.r, 0.0);
            for lc in 0..s.l * s.c {
                let dst = &mut m[lc * s.r..][..s.r];
                for (ff, &xv) in xf.iter().enumerate() {
                    let src = &s.data[(lc * s.f + ff) * s.r..][..s.r];
                    for (d, a) in dst.iter_mut().zip(src) {
                        *d += a * xv;
                    }
                }
            }
        }
        pass.left[0] = vec![1.0];
        for i in 0..k {
            let s = &self.sites[i];
            let mut u = vec![0.0; s.r];
            for (a, &la) in pass.left[i].iter().enumerate() {
                for (ub, mb) in u.iter_mut().zip(&pass.m[i][a * s.r..][..s.r]) {
                    *ub += la * mb;
                }
            }
            let next: Vec<f64> = u.iter().zip(&self.masks[i]).map(|(a, b)| a * b).collect();
            max_abs = max_abs.max(u.iter().fold(0.0, |m, v| m.max(v.abs())));
            pass.u[i] = u;
            pass.left[i + 1] = next;
        }
        pass.right[n - 1] = vec![1.0];
        for i in (k + 1..n).rev() {
            let s = &self.sites[i];
            let w: Vec<f64> = (0..s.l)
                .map(|a| {
                    pass.m[i][a * s.r..][..s.r]
                        .iter()
                        .zip(&pass.right[i])
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect();
            let prev: Vec<f64> = w.iter().zip(&self.masks[i - 1]).map(|(a, b)| a * b).collect();
            max_abs = max_abs.max(w.iter().fold(0.0, |m, v| m.max(v.abs())));
            pass.w[i] = w;
            pass.right[i - 1] = prev;
        }
        let s = &self.sites[k];
        let (lk, rk) = (&pass.left[k], &pass.right[k]);
        let mut logits = vec![0.0; s.c];
        for (a, &la) in lk.iter().enumerate() {
            for (cc, lg) in logits.iter_mut().enumerate() {
                let row = &pass.m[k][(a * s.c + cc) * s.r..][..s.r];
                *lg += la * row.iter().zip(rk).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        max_abs = logits.iter().fold(max_abs, |m, v| m.max(v.abs()));
        pass.logits = logits;
        pass.max_abs = max_abs;
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut pass = ChainPass::default();
        self.forward(x, &mut pass)?;
        Ok(pass.logits)
    }

    pub fn zero_grads(&self) -> ChainGrads {
        ChainGrads {
            sites: self.sites.iter().map(|s| vec![0.0; s.data.len()]).collect(),
            masks: self.masks.iter().map(|m| vec![0.0; m.len()]).collect(),
        }
    }

    /// Adds the gradient of `⟨g, logits⟩` for the sample of `pass` into `acc`.
    pub fn backward(&self, x: &[f64], pass: &ChainPass, g: &[f64], acc: &mut ChainGrads) {
        let n = self.sites.len();
        let k = self.out;
        let s = &self.sites[k];
        let (lk, rk) = (&pass.left[k], &pass.right[k]);
        let xf = self.site_features(s, x);
        let da = &mut acc.sites[k];
        for (a, &la) in lk.iter().enumerate() {
            for (cc, &gc) in g.iter().enumerate() {
                for (ff, &xv) in xf.iter().enumerate() {
                    let coef = la * gc * xv;
                    if coef == 0.0 {
                        continue;
                    }
                    let dst = &mut da[((a * s.c + cc) * s.f + ff) * s.r..][..s.r];
                    for (d, rb) in dst.iter_mut().zip(rk) {
                        *d += coef * rb;
                    }
                }
            }
        }
        // t[a][b] = Σ_c g_c M[a][c][b]
        let mut t = vec![0.0; s.l * s.r];
        for a in 0..s.l {
            for (cc, &gc) in g.iter().enumerate() {
                let row = &pass.m[k][(a * s.c + cc) * s.r..][..s.r];
                for (tb, mb) in t[a * s.r..][..s.r].iter_mut().zip(row) {
                    *tb += gc * mb;
                }
            }
        }
        let mut s_left: Vec<f64> = (0..s.l)
            .map(|a| t[a * s.r..][..s.r].iter().zip(rk).map(|(x, y)| x * y).sum())
            .collect();
        let mut s_right = vec![0.0; s.r];
        for (a, &la) in lk.iter().enumerate() {
            for (sr, tb) in s_right.iter_mut().zip(&t[a * s.r..][..s.r]) {
                *sr += la * tb;
            }
        }

        for i in (0..k).rev() {
            let s = &self.sites[i];
            let xf = self.site_features(s, x);
            for (j, dm) in acc.masks[i].iter_mut().enumerate() {
                *dm += s_left[j] * pass.u[i][j];
            }
            let du: Vec<f64> = s_left.iter().zip(&self.masks[i]).map(|(a, b)| a * b).collect();
            let da = &mut acc.sites[i];
            for (a, &la) in pass.left[i].iter().enumerate() {
                for (ff, &xv) in xf.iter().enumerate() {
                    let coef = la * xv;
                    if coef == 0.0 {
                        continue;
                    }
                    for (d, db) in da[(a * s.f + ff) * s.r..][..s.r].iter_mut().zip(&du) {
                        *d += coef * db;
                    }
                }
            }
            s_left = (0..s.l)
                .map(|a| pass.m[i][a * s.r..][..s.r].iter().zip(&du).map(|(x, y)| x * y).sum())
                .collect();
        }
        for i in k + 1..n {
            let s = &self.sites[i];
            let xf = self.site_features(s, x);
            for (j, dm) in acc.masks[i - 1].iter_mut().enumerate() {
                *dm += s_right[j] * pass.w[i][j];
            }
            let dw: Vec<f64> = s_right.iter().zip(&self.masks[i - 1]).map(|(a, b)| a * b).collect();
            let da = &mut acc.sites[i];
            for (a, &wa) in dw.iter().enumerate() {
                for (ff, &xv) in xf.iter().enumerate() {
                    let coef = wa * xv;
                    if coef == 0.0 {
                        continue;
                    }
                    for (d, rb) in da[(a * s.f + ff) * s.r..][..s.r].iter_mut().zip(&pass.right[i]) {
                        *d += coef * rb;
                    }
                }
            }
            let mut next = vec![0.0; s.r];
            for (a, &wa) in dw.iter().enumerate() {
                for (nb, mb) in next.iter_mut().zip(&pass.m[i][a * s.r..][..s.r]) {
                    *nb += wa * mb;
                }
            }
            s_right = next;
        }
    }

    /// Converts chain-layout gradients to per-node tensors.
    pub fn to_gradients(&self, net: &TensorNetwork, acc: &ChainGrads) -> Result<Gradients> {
        let mut out = Gradients::zeros_like(net, self.n_regs)?;
        for (s, g) in self.sites.iter().zip(&acc.sites) {
            if s.frozen {
                continue;
            }
            let node = net.node(s.node)?;
            let labels: Vec<_> = s.node_axes.iter().map(|&a| node.tensor.labels()[a]).collect();
            let shape: Vec<usize> = s.node_axes.iter().map(|&a| node.tensor.shape()[a]).collect();
            let t = Tensor::new(shape, labels, g.clone())?.permute(node.tensor.labels())?;
            out.nodes.insert(s.node, t);
        }
        for (slope, dm) in self.slopes.iter().zip(&acc.masks) {
            if let Some((ri, sl)) = slope {
                out.soft_dims[*ri] += sl.iter().zip(dm).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(out)
    }
}
