//! Reverse-mode differentiation of network contraction.
//!
//! [`Tape::record`] contracts a network for one input sample and keeps every
//! intermediate tensor. [`Tape::backward`] then pulls an upstream gradient on
//! the logits back to every node tensor and every soft bond dimension. The
//! tape is the reference implementation; [`crate::chain`] is a faster path
//! for chains that must agree with it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{ContractionOrder, EdgeId, Inputs, Leg, NodeId, TensorNetwork};
use crate::rankreg::{check_regularizers, mask_host, MaskMode, RankRegularizer};
use crate::tensor::{outer, pair_product, Label, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Param { node: NodeId, frozen: bool },
    Const,
    /// Regularizer diagonal; `slope` is `∂m/∂d` (all zero in hard mode).
    Mask { reg: usize, slope: Vec<f64> },
    /// Node tensor relabelled to edge ids, repeated edges merged diagonally.
    Bind { src: usize, groups: Vec<Vec<usize>> },
    SumOut { src: usize, label: Label },
    Product { a: usize, b: usize, keep: Vec<Label> },
}

/// Recorded forward contraction of one sample.
#[derive(Clone, Debug)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    output: usize,
    n_regs: usize,
}

/// Gradients of `⟨upstream, logits⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// One tensor per node, in the node's own axis layout. Frozen nodes get
    /// an all-zero tensor.
    pub nodes: BTreeMap<NodeId, Tensor>,
    /// One entry per regularizer, in the order they were supplied.
    pub soft_dims: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &TensorNetwork, n_regs: usize) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (id, node) in net.nodes() {
            let t = &node.tensor;
            nodes.insert(id, Tensor::zeros(t.shape().to_vec(), t.labels().to_vec())?);
        }
        Ok(Self {
            nodes,
            soft_dims: vec![0.0; n_regs],
        })
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Gradients, alpha: f64) {
        for (id, g) in &other.nodes {
            if let Some(mine) = self.nodes.get_mut(id) {
                for (x, y) in mine.data_mut().iter_mut().zip(g.data()) {
                    *x += alpha * y;
                }
            }
        }
        for (x, y) in self.soft_dims.iter_mut().zip(&other.soft_dims) {
            *x += alpha * y;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let n = self.nodes.values().map(Tensor::max_abs).fold(0.0, f64::max);
        self.soft_dims.iter().fold(n, |m, x| m.max(x.abs()))
    }
}

impl Tape {
    /// Contracts `net` with `inputs` on its input legs and the regularizer
    /// diagonals on their edges, following `order` (default: outward from
    /// the output node).
    pub fn record(
        net: &TensorNetwork,
        regs: &[RankRegularizer],
        mode: MaskMode,
        inputs: &Inputs,
        order: Option<&ContractionOrder>,
    ) -> Result<Tape> {
        net.validate()?;
        check_regularizers(net, regs)?;
        let input_edges = net.input_edges();
        for (&i, &e) in &input_edges {
            let v = inputs
                .get(&i)
                .ok_or_else(|| Error::Structure(format!("missing input for leg {i}")))?;
            let d = net.edge(e)?.dim;
            if v.len() != d {
                return Err(Error::Dimension(format!(
                    "input {i} has {} components, leg expects {d}",
                    v.len()
                )));
            }
        }
        if let Some(i) = inputs.keys().find(|i| !input_edges.contains_key(i)) {
            return Err(Error::Structure(format!("no input leg {i}")));
        }
        let output_label = net.output_edge();

        // number of live tensors holding each label
        let mut count: BTreeMap<EdgeId, usize> = net
            .edges()
            .map(|(id, e)| {
                let mut nodes: Vec<NodeId> = e.slots.iter().map(|s| s.node).collect();
                nodes.sort();
                nodes.dedup();
                (id, nodes.len())
            })
            .collect();
        let mut hosted: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (ri, r) in regs.iter().enumerate() {
            if let Some(h) = mask_host(net, r.edge) {
                hosted.entry(h).or_default().push(ri);
            }
        }

        let mut tape = Tape {
            ops: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
            output: 0,
            n_regs: regs.len(),
        };
        let mut live: BTreeMap<NodeId, usize> = BTreeMap::new();
        for (id, node) in net.nodes() {
            let p = tape.push(
                Op::Param {
                    node: id,
                    frozen: node.frozen,
                },
                node.tensor.clone(),
                !node.frozen,
            );
            let mut labels: Vec<Label> = Vec::new();
            let mut groups: Vec<Vec<usize>> = Vec::new();
            for axis in 0..node.tensor.rank() {
                let e = node.leg(axis).expect("validated");
                match labels.iter().position(|&l| l == e) {
                    Some(g) => groups[g].push(axis),
                    None => {
                        labels.push(e);
                        groups.push(vec![axis]);
                    }
                }
            }
            let bound = node.tensor.merge_axes(&groups, labels.clone())?;
            let needs = tape.needs_grad[p];
            let mut v = tape.push(Op::Bind { src: p, groups }, bound, needs);

            for &e in &labels {
                if let Some(Leg::Input(i)) = net.edge(e)?.external {
                    let c = tape.push(Op::Const, Tensor::vector(e, inputs[&i].clone())?, false);
                    v = tape.product(v, c, Vec::new())?;
                    count.insert(e, 0);
                }
            }
            for &ri in hosted.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                let r = &regs[ri];
                let (slope, soft) = match mode {
                    MaskMode::Soft => (r.slope(), true),
                    MaskMode::Hard { .. } => (vec![0.0; r.max_dim], false),
                };
                let m = tape.push(
                    Op::Mask { reg: ri, slope },
                    Tensor::vector(r.edge, r.mask_for(mode))?,
                    soft,
                );
                v = tape.product(v, m, vec![r.edge])?;
            }
            for l in tape.values[v].labels().to_vec() {
                if count[&l] == 1 && Some(l) != output_label {
                    let s = tape.values[v].sum_axis(l)?;
                    let needs = tape.needs_grad[v];
                    v = tape.push(Op::SumOut { src: v, label: l }, s, needs);
                    count.insert(l, 0);
                }
            }
            live.insert(id, v);
        }

        let default_order;
        let order = match order {
            Some(o) => o,
            None => {
                default_order = ContractionOrder::outward_from_output(net);
                &default_order
            }
        };
        for &(a, b) in &order.0 {
            if a == b || !live.contains_key(&a) || !live.contains_key(&b) {
                return Err(Error::Structure(format!("invalid contraction step ({a:?}, {b:?})")));
            }
            let vb = live.remove(&b).expect("checked");
            let va = live[&a];
            let shared: Vec<Label> = tape.values[va]
                .labels()
                .iter()
                .copied()
                .filter(|l| tape.values[vb].axis_of(*l).is_some())
                .collect();
            let keep: Vec<Label> = shared.iter().copied().filter(|l| count[l] > 2).collect();
            let v = tape.product(va, vb, keep)?;
            for l in shared {
                let c = count[&l];
                count.insert(l, if c > 2 { c - 1 } else { 0 });
            }
            live.insert(a, v);
        }
        if live.len() != 1 {
            return Err(Error::Structure(format!(
                "contraction order leaves {} tensors",
                live.len()
            )));
        }
        tape.output = *live.values().next().expect("one tensor");
        Ok(tape)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> usize {
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.values.len() - 1
    }

    fn product(&mut self, a: usize, b: usize, keep: Vec<Label>) -> Result<usize> {
        let v = pair_product(&self.values[a], &self.values[b], &keep)?;
        let needs = self.needs_grad[a] || self.needs_grad[b];
        Ok(self.push(Op::Product { a, b, keep }, v, needs))
    }

    /// Contraction result: a vector on the output leg, or a scalar.
    pub fn output(&self) -> &Tensor {
        &self.values[self.output]
    }

    /// Largest magnitude among all computed intermediates.
    pub fn max_abs_intermediate(&self) -> f64 {
        self.ops
            .iter()
            .zip(&self.values)
            .filter(|(op, _)| !matches!(op, Op::Param { .. } | Op::Const | Op::Mask { .. }))
            .map(|(_, v)| v.max_abs())
            .fold(0.0, f64::max)
    }

    /// Multiply–add count of the recorded schedule.
    pub fn flops(&self) -> u64 {
        self.ops
            .iter()
            .map(|op| match op {
                Op::Product { a, b, .. } => {
                    let (x, y) = (&self.values[*a], &self.values[*b]);
                    let shared: usize = x
                        .labels()
                        .iter()
                        .filter_map(|&l| y.extent(l))
                        .product();
                    (x.len() * y.len() / shared) as u64
                }
                Op::SumOut { src, .. } => self.values[*src].len() as u64,
                _ => 0,
            })
            .sum()
    }

    /// Re-runs the recorded operations from the stored leaves.
    pub fn replay(&self) -> Result<Tensor> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Param { .. } | Op::Const | Op::Mask { .. } => self.values[i].clone(),
                Op::Bind { src, groups } => {
                    vals[*src].merge_axes(groups, self.values[i].labels().to_vec())?
                }
                Op::SumOut { src, label } => vals[*src].sum_axis(*label)?,
                Op::Product { a, b, keep } => pair_product(&vals[*a], &vals[*b], keep)?,
            };
            vals.push(v);
        }
        Ok(vals.swap_remove(self.output))
    }

    /// Gradients of `⟨upstream, output⟩` with respect to every node tensor
    /// and soft dimension.
    pub fn backward(&self, upstream: &[f64]) -> Result<Gradients> {
        let out = self.output();
        if upstream.len() != out.len() {
            return Err(Error::Dimension(format!(
                "upstream gradient has {} entries, output has {}",
                upstream.len(),
                out.len()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[self.output] = Some(Tensor::new(
            out.shape().to_vec(),
            out.labels().to_vec(),
            upstream.to_vec(),
        )?);
        let mut result = Gradients {
            nodes: BTreeMap::new(),
            soft_dims: vec![0.0; self.n_regs],
        };
        for i in (0..self.values.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            match &self.ops[i] {
                Op::Param { node, frozen } => {
                    if !frozen {
                        result.nodes.insert(*node, g);
                    }
                }
                Op::Const => {}
                Op::Mask { reg, slope } => {
                    result.soft_dims[*reg] += g.data().iter().zip(slope).map(|(a, b)| a * b).sum::<f64>();
                }
                Op::Bind { src, groups } => {
                    let s = &self.values[*src];
                    let back = Tensor::scatter_merged(&g, groups, s.shape(), s.labels().to_vec());
                    accumulate(&mut grads, *src, back)?;
                }
                Op::SumOut { src, label } => {
                    let s = &self.values[*src];
                    let d = s.extent(*label).expect("summed label present");
                    let ones = Tensor::vector(*label, vec![1.0; d])?;
                    accumulate(&mut grads, *src, outer(&g, &ones)?.permute(s.labels())?)?;
                }
                Op::Product { a, b, keep } => {
                    for (x, y) in [(*a, *b), (*b, *a)] {
                        if self.needs_grad[x] {
                            let back = pair_product(&g, &self.values[y], keep)?
                                .permute(self.values[x].labels())?;
                            accumulate(&mut grads, x, back)?;
                        }
                    }
                }
            }
        }
        for (op, v) in self.ops.iter().zip(&self.values) {
            if let Op::Param { node, .. } = op {
                if !result.nodes.contains_key(node) {
                    result
                        .nodes
                        .insert(*node, Tensor::zeros(v.shape().to_vec(), v.labels().to_vec())?);
                }
            }
        }
        Ok(result)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, t: Tensor) -> Result<()> {
    match &mut grads[i] {
        Some(g) => g.add_assign(&t),
        slot => {
            *slot = Some(t);
            Ok(())
        }
    }
}

/// Multiply–add count of the default schedule with regularizers on `masked`.
pub(crate) fn schedule_cost(net: &TensorNetwork, masked: &[EdgeId]) -> Result<u64> {
    let regs: Vec<RankRegularizer> = masked
        .iter()
        .map(|&e| Ok(RankRegularizer::new(e, net.edge(e)?.dim, 1.0)))
        .collect::<Result<_>>()?;
    let inputs: Inputs = net
        .input_edges()
        .into_iter()
        .map(|(i, e)| Ok((i, vec![1.0; net.edge(e)?.dim])))
        .collect::<Result<_>>()?;
    let mut zeroed = net.clone();
    for id in net.node_ids() {
        let n = zeroed.node_mut(id)?;
        n.tensor = n.tensor.map(|_| 0.0);
    }
    Ok(Tape::record(&zeroed, &regs, MaskMode::Soft, &inputs, None)?.flops())
}

/// Largest relative disagreement between the tape gradient and central
/// finite differences of `⟨g, logits⟩`, for a fixed upstream vector `g`,
/// over every trainable element and soft dimension.
///
/// Entries are compared relative to `max(|a|, |n|, 1e-3·max|a|)` so that
/// gradients that are zero up to rounding do not dominate.
pub fn finite_diff_check(
    net: &TensorNetwork,
    regs: &[RankRegularizer],
    inputs: &Inputs,
    step: f64,
) -> Result<f64> {
    let tape = Tape::record(net, regs, MaskMode::Soft, inputs, None)?;
    let n_out = tape.output().len();
    let upstream: Vec<f64> = (0..n_out).map(|c| 1.0 - 0.37 * c as f64).collect();
    let analytic = tape.backward(&upstream)?;
    let probe = |net: &TensorNetwork, regs: &[RankRegularizer]| -> Result<f64> {
        let t = Tape::record(net, regs, MaskMode::Soft, inputs, None)?;
        Ok(t.output().data().iter().zip(&upstream).map(|(a, b)| a * b).sum())
    };

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let mut work = net.clone();
    for (id, node) in net.nodes() {
        if node.frozen {
            continue;
        }
        for k in 0..node.tensor.len() {
            let x0 = node.tensor.data()[k];
            work.node_mut(id)?.tensor.data_mut()[k] = x0 + step;
            let up = probe(&work, regs)?;
            work.node_mut(id)?.tensor.data_mut()[k] = x0 - step;
            let dn = probe(&work, regs)?;
            work.node_mut(id)?.tensor.data_mut()[k] = x0;
            pairs.push((analytic.nodes[&id].data()[k], (up - dn) / (2.0 * step)));
        }
    }
    let mut rwork = regs.to_vec();
    for r in 0..regs.len() {
        let d0 = regs[r].soft_dim;
        rwork[r].soft_dim = d0 + step;
        let up = probe(net, &rwork)?;
        rwork[r].soft_dim = d0 - step;
        let dn = probe(net, &rwork)?;
        rwork[r].soft_dim = d0;
        pairs.push((analytic.soft_dims[r], (up - dn) / (2.0 * step)));
    }
    Ok(max_relative_error(&pairs))
}

pub(crate) fn max_relative_error(pairs: &[(f64, f64)]) -> f64 {
    let floor = 1e-3 * pairs.iter().fold(0.0f64, |m, p| m.max(p.0.abs()));
    pairs
        .iter()
        .map(|&(a, n)| {
            let denom = a.abs().max(n.abs()).max(floor);
            if denom == 0.0 {
                0.0
            } else {
                (a - n).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}
