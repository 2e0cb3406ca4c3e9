//! Tensor networks as hypergraphs.
//!
//! A [`TensorNetwork`] owns a set of node tensors and a set of hyperedges.
//! Each hyperedge is one summation index: it lists the `(node, axis)` slots
//! that share it, and may be tagged as an external input leg or the output
//! leg. An ordinary bond has two slots; a bond passing through copy nodes
//! becomes a hyperedge with any number of slots. An internal edge with a
//! single slot is summed freely, which is what a rank-1 copy node (the
//! all-ones vector) reduces to.
//!
//! Every axis of every node belongs to exactly one slot once the network is
//! validated.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Label, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Hyperedges are identified by the index label they carry during contraction.
pub type EdgeId = Label;

/// External leg tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Leg {
    /// Feature leg `ξ_i`, fed by the embedding of input feature `i`.
    Input(usize),
    /// Class leg left open by contraction.
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    pub node: NodeId,
    pub axis: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperEdge {
    pub slots: Vec<Slot>,
    pub dim: usize,
    pub external: Option<Leg>,
}

impl HyperEdge {
    pub fn is_internal(&self) -> bool {
        self.external.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub tensor: Tensor,
    /// Frozen nodes receive no gradient and are excluded from parameter counts.
    pub frozen: bool,
    legs: Vec<Option<EdgeId>>,
}

impl Node {
    /// Edge attached to `axis`, if connected.
    pub fn leg(&self, axis: usize) -> Option<EdgeId> {
        self.legs.get(axis).copied().flatten()
    }

    pub fn legs(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.legs.iter().flatten().copied()
    }
}

/// Feature vectors keyed by input-leg index.
pub type Inputs = BTreeMap<usize, Vec<f64>>;

/// Splits a flat `[feature][component]` buffer into [`Inputs`].
pub fn inputs_from_flat(features: &[f64], dim: usize) -> Inputs {
    features
        .chunks(dim)
        .enumerate()
        .map(|(i, c)| (i, c.to_vec()))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorNetwork {
    nodes: BTreeMap<NodeId, Node>,
    edges: BTreeMap<EdgeId, HyperEdge>,
    next_node: usize,
    next_edge: u32,
}

impl TensorNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, tensor: Tensor) -> NodeId {
        let id = NodeId(self.next_node);
        self.insert_node(id, tensor);
        id
    }

    fn insert_node(&mut self, id: NodeId, tensor: Tensor) {
        let legs = vec![None; tensor.rank()];
        self.nodes.insert(
            id,
            Node {
                tensor,
                frozen: false,
                legs,
            },
        );
        self.next_node = self.next_node.max(id.0 + 1);
    }

    fn claim(&mut self, slot: Slot, edge: EdgeId) -> Result<usize> {
        let node = self
            .nodes
            .get_mut(&slot.node)
            .ok_or_else(|| Error::Structure(format!("unknown node {:?}", slot.node)))?;
        let leg = node.legs.get_mut(slot.axis).ok_or_else(|| {
            Error::Structure(format!("node {:?} has no axis {}", slot.node, slot.axis))
        })?;
        if leg.is_some() {
            return Err(Error::Structure(format!(
                "axis {} of node {:?} is already connected",
                slot.axis, slot.node
            )));
        }
        *leg = Some(edge);
        Ok(node.tensor.shape()[slot.axis])
    }

    fn add_edge_with_id(&mut self, id: EdgeId, slots: &[Slot], external: Option<Leg>) -> Result<EdgeId> {
        if slots.is_empty() {
            return Err(Error::Structure("edge without slots".into()));
        }
        if external.is_some() && slots.len() != 1 {
            return Err(Error::Structure("external legs have exactly one slot".into()));
        }
        if let Some(leg) = external {
            if self.edges.values().any(|e| e.external == Some(leg)) {
                return Err(Error::Structure(format!("leg {leg:?} already attached")));
            }
        }
        let mut dim = None;
        for (i, &slot) in slots.iter().enumerate() {
            let d = match self.claim(slot, id) {
                Ok(d) => d,
                Err(e) => {
                    for s in &slots[..i] {
                        if let Some(n) = self.nodes.get_mut(&s.node) {
                            n.legs[s.axis] = None;
                        }
                    }
                    return Err(e);
                }
            };
            if *dim.get_or_insert(d) != d {
                for s in &slots[..=i] {
                    if let Some(n) = self.nodes.get_mut(&s.node) {
                        n.legs[s.axis] = None;
                    }
                }
                return Err(Error::Dimension(format!(
                    "slots of one edge have extents {} and {d}",
                    dim.unwrap()
                )));
            }
        }
        self.edges.insert(
            id,
            HyperEdge {
                slots: slots.to_vec(),
                dim: dim.unwrap(),
                external,
            },
        );
        self.next_edge = self.next_edge.max(id.0 + 1);
        Ok(id)
    }

    /// Joins the given slots with one internal (hyper)edge.
    pub fn connect(&mut self, slots: &[(NodeId, usize)]) -> Result<EdgeId> {
        let slots: Vec<Slot> = slots.iter().map(|&(node, axis)| Slot { node, axis }).collect();
        self.add_edge_with_id(Label(self.next_edge), &slots, None)
    }

    pub fn attach_input(&mut self, node: NodeId, axis: usize, feature: usize) -> Result<EdgeId> {
        self.add_edge_with_id(Label(self.next_edge), &[Slot { node, axis }], Some(Leg::Input(feature)))
    }

    pub fn attach_output(&mut self, node: NodeId, axis: usize) -> Result<EdgeId> {
        self.add_edge_with_id(Label(self.next_edge), &[Slot { node, axis }], Some(Leg::Output))
    }

    /// Checks that every axis is connected and agrees with its edge extent.
    pub fn validate(&self) -> Result<()> {
        for (id, node) in &self.nodes {
            if let Some(axis) = node.legs.iter().position(Option::is_none) {
                return Err(Error::Structure(format!("axis {axis} of node {id:?} is unconnected")));
            }
        }
        for (id, edge) in &self.edges {
            for s in &edge.slots {
                let d = self.nodes[&s.node].tensor.shape()[s.axis];
                if d != edge.dim {
                    return Err(Error::Dimension(format!(
                        "edge {id} has extent {} but node {:?} axis {} has {d}",
                        edge.dim, s.node, s.axis
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes.iter().map(|(&id, n)| (id, n))
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(&id)
            .ok_or_else(|| Error::Structure(format!("unknown node {id:?}")))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut Node> {
        self.nodes
            .get_mut(&id)
            .ok_or_else(|| Error::Structure(format!("unknown node {id:?}")))
    }

    /// Replaces a node's tensor, keeping its shape.
    pub fn set_tensor(&mut self, id: NodeId, tensor: Tensor) -> Result<()> {
        let node = self.node_mut(id)?;
        if node.tensor.shape() != tensor.shape() {
            return Err(Error::Dimension(format!(
                "node {id:?} has shape {:?}, got {:?}",
                node.tensor.shape(),
                tensor.shape()
            )));
        }
        node.tensor = tensor;
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (EdgeId, &HyperEdge)> {
        self.edges.iter().map(|(&id, e)| (id, e))
    }

    pub fn edge(&self, id: EdgeId) -> Result<&HyperEdge> {
        self.edges
            .get(&id)
            .ok_or_else(|| Error::Structure(format!("unknown edge {id}")))
    }

    pub fn internal_edges(&self) -> Vec<EdgeId> {
        self.edges
            .iter()
            .filter(|(_, e)| e.is_internal())
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn output_edge(&self) -> Option<EdgeId> {
        self.edges
            .iter()
            .find(|(_, e)| e.external == Some(Leg::Output))
            .map(|(&id, _)| id)
    }

    pub fn output_node(&self) -> Option<NodeId> {
        self.output_edge()
            .and_then(|e| self.edges[&e].slots.first())
            .map(|s| s.node)
    }

    /// Input-leg edges keyed by feature index.
    pub fn input_edges(&self) -> BTreeMap<usize, EdgeId> {
        self.edges
            .iter()
            .filter_map(|(&id, e)| match e.external {
                Some(Leg::Input(i)) => Some((i, id)),
                _ => None,
            })
            .collect()
    }

    /// Nodes sharing an internal edge with `id`.
    pub fn neighbors(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        if let Some(node) = self.nodes.get(&id) {
            for e in node.legs() {
                let edge = &self.edges[&e];
                if edge.is_internal() {
                    out.extend(edge.slots.iter().map(|s| s.node).filter(|&n| n != id));
                }
            }
        }
        out
    }

    /// Graph distance of every node from `root` along internal edges.
    pub fn distances_from(&self, root: NodeId) -> BTreeMap<NodeId, usize> {
        let mut dist = BTreeMap::new();
        let mut queue = VecDeque::new();
        dist.insert(root, 0);
        queue.push_back(root);
        while let Some(n) = queue.pop_front() {
            let d = dist[&n];
            for m in self.neighbors(n) {
                if let std::collections::btree_map::Entry::Vacant(v) = dist.entry(m) {
                    v.insert(d + 1);
                    queue.push_back(m);
                }
            }
        }
        dist
    }

    /// Updates an edge's extent after its slot tensors were resized.
    pub(crate) fn resize_edge(&mut self, id: EdgeId, dim: usize) -> Result<()> {
        let edge = self
            .edges
            .get_mut(&id)
            .ok_or_else(|| Error::Structure(format!("unknown edge {id}")))?;
        edge.dim = dim;
        Ok(())
    }

    /// Number of trainable tensor elements (frozen nodes excluded).
    pub fn param_count(&self) -> usize {
        self.nodes
            .values()
            .filter(|n| !n.frozen)
            .map(|n| n.tensor.len())
            .sum()
    }

    /// Plain-text topology: node shapes and hyperedge slot lists.
    ///
    /// ```text
    /// tnml-network 1
    /// node <id> <frozen 0|1> <d0,d1,...>
    /// edge <id> <dim> <internal|input:<i>|output> <node>:<axis>,...
    /// ```
    pub fn topology_text(&self) -> String {
        let mut s = String::from("tnml-network 1\n");
        for (id, n) in &self.nodes {
            let shape: Vec<String> = n.tensor.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "node {} {} {}", id.0, u8::from(n.frozen), shape.join(","));
        }
        for (id, e) in &self.edges {
            let kind = match e.external {
                None => "internal".to_string(),
                Some(Leg::Input(i)) => format!("input:{i}"),
                Some(Leg::Output) => "output".to_string(),
            };
            let slots: Vec<String> = e.slots.iter().map(|s| format!("{}:{}", s.node.0, s.axis)).collect();
            let _ = writeln!(s, "edge {} {} {} {}", id.0, e.dim, kind, slots.join(","));
        }
        s
    }

    /// Parses [`TensorNetwork::topology_text`]; tensors come back zero-filled.
    pub fn from_topology_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad topology line: {line:?}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("tnml-network 1") {
            return Err(Error::Format("missing topology header".into()));
        }
        let mut net = TensorNetwork::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["node", id, frozen, shape] => {
                    let id: usize = id.parse().map_err(|_| bad(line))?;
                    let shape: Vec<usize> = shape
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|d| d.parse().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?;
                    let labels = (0..shape.len() as u32).map(Label).collect();
                    net.insert_node(NodeId(id), Tensor::zeros(shape, labels)?);
                    net.nodes.get_mut(&NodeId(id)).unwrap().frozen = *frozen == "1";
                }
                ["edge", id, dim, kind, slots] => {
                    let id = Label(id.parse().map_err(|_| bad(line))?);
                    let dim: usize = dim.parse().map_err(|_| bad(line))?;
                    let external = match *kind {
                        "internal" => None,
                        "output" => Some(Leg::Output),
                        k => Some(Leg::Input(
                            k.strip_prefix("input:")
                                .and_then(|i| i.parse().ok())
                                .ok_or_else(|| bad(line))?,
                        )),
                    };
                    let slots: Vec<Slot> = slots
                        .split(',')
                        .map(|s| {
                            let (n, a) = s.split_once(':').ok_or_else(|| bad(line))?;
                            Ok(Slot {
                                node: NodeId(n.parse().map_err(|_| bad(line))?),
                                axis: a.parse().map_err(|_| bad(line))?,
                            })
                        })
                        .collect::<Result<_>>()?;
                    net.add_edge_with_id(id, &slots, external)?;
                    if net.edges[&id].dim != dim {
                        return Err(bad(line));
                    }
                }
                _ => return Err(bad(line)),
            }
        }
        net.validate()?;
        Ok(net)
    }
}

/// Sequence of pairwise merges. After step `(a, b)` the merged tensor lives
/// on under id `a` and `b` is retired.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractionOrder(pub Vec<(NodeId, NodeId)>);

impl ContractionOrder {
    /// Breadth-first sweep outward from the output node (or the lowest id).
    pub fn outward_from_output(net: &TensorNetwork) -> Self {
        let Some(root) = net.output_node().or_else(|| net.node_ids().first().copied()) else {
            return Self(Vec::new());
        };
        let dist = net.distances_from(root);
        let mut order: Vec<(usize, NodeId)> = dist.iter().map(|(&n, &d)| (d, n)).collect();
        order.sort();
        let mut steps: Vec<(NodeId, NodeId)> = order.iter().skip(1).map(|&(_, n)| (root, n)).collect();
        // disconnected components are folded in last
        for id in net.node_ids() {
            if !dist.contains_key(&id) {
                steps.push((root, id));
            }
        }
        Self(steps)
    }

    /// Random valid order that prefers merging tensors sharing an index.
    pub fn random<R: Rng + ?Sized>(net: &TensorNetwork, rng: &mut R) -> Self {
        let mut live: BTreeMap<NodeId, BTreeSet<EdgeId>> = net
            .nodes()
            .map(|(id, n)| (id, n.legs().filter(|e| net.edges[e].is_internal()).collect()))
            .collect();
        let mut steps = Vec::new();
        while live.len() > 1 {
            let ids: Vec<NodeId> = live.keys().copied().collect();
            let a = *ids.choose(rng).unwrap();
            let linked: Vec<NodeId> = ids
                .iter()
                .copied()
                .filter(|&b| b != a && !live[&a].is_disjoint(&live[&b]))
                .collect();
            let b = match linked.choose(rng) {
                Some(&b) => b,
                None => *ids.iter().filter(|&&b| b != a).collect::<Vec<_>>().choose(rng).copied().unwrap(),
            };
            let eb = live.remove(&b).unwrap();
            live.get_mut(&a).unwrap().extend(eb);
            steps.push((a, b));
        }
        Self(steps)
    }
}

/// Contracts the network with the given feature vectors on its input legs,
/// leaving only the output leg open.
pub fn full_contract(net: &TensorNetwork, inputs: &Inputs, order: Option<&ContractionOrder>) -> Result<Tensor> {
    let tape = Tape::record(net, &[], crate::rankreg::MaskMode::Soft, inputs, order)?;
    Ok(tape.output().clone())
}

/// Counts reported by [`effective_hypergraph`] together with the dense
/// residual network.
#[derive(Clone, Debug)]
pub struct EffectiveGraph {
    /// Dense nodes `V′`.
    pub n_nodes: usize,
    /// Summed (hyper)edges touching at least one dense node, `E′`.
    pub n_edges: usize,
    /// Extent of each counted edge, for heterogeneous bond dimensions.
    pub edge_dims: Vec<usize>,
    pub subnet: TensorNetwork,
}

struct UnionFind(BTreeMap<EdgeId, EdgeId>);

impl UnionFind {
    fn find(&mut self, e: EdgeId) -> EdgeId {
        let p = *self.0.entry(e).or_insert(e);
        if p == e {
            return e;
        }
        let r = self.find(p);
        self.0.insert(e, r);
        r
    }

    fn union(&mut self, a: EdgeId, b: EdgeId) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller id becomes the representative
        match ra.cmp(&rb) {
            std::cmp::Ordering::Less => {
                self.0.insert(rb, ra);
            }
            std::cmp::Ordering::Greater => {
                self.0.insert(ra, rb);
            }
            std::cmp::Ordering::Equal => {}
        }
    }
}

/// Collapses the nodes in `copy_set` into hyperedges.
///
/// A copy node forces all of its internal legs to carry the same index, so
/// every edge it touches merges into one hyperedge (transitively through
/// chains of copy nodes). Input legs of copy nodes are pinned and drop out.
/// The returned subnet holds the dense nodes, unchanged, wired to the merged
/// edges.
pub fn effective_hypergraph(net: &TensorNetwork, copy_set: &BTreeSet<NodeId>) -> Result<EffectiveGraph> {
    net.validate()?;
    for id in copy_set {
        net.node(*id)?;
    }
    if let Some(out) = net.output_node() {
        if copy_set.contains(&out) {
            return Err(Error::InvalidSelection(format!(
                "node {out:?} carries the output leg and must stay dense"
            )));
        }
    }
    let mut uf = UnionFind(BTreeMap::new());
    for id in copy_set {
        let internal: Vec<EdgeId> = net.nodes[id]
            .legs()
            .filter(|e| net.edges[e].is_internal())
            .collect();
        for pair in internal.windows(2) {
            uf.union(pair[0], pair[1]);
        }
        if let Some(&first) = internal.first() {
            uf.find(first);
        }
    }

    let mut subnet = TensorNetwork::new();
    let mut merged: BTreeMap<EdgeId, (Vec<Slot>, Option<Leg>, usize)> = BTreeMap::new();
    for (&id, node) in &net.nodes {
        if copy_set.contains(&id) {
            continue;
        }
        subnet.insert_node(id, node.tensor.clone());
        subnet.nodes.get_mut(&id).unwrap().frozen = node.frozen;
        for (axis, e) in node.legs.iter().enumerate() {
            let e = e.expect("validated");
            let edge = &net.edges[&e];
            let key = if edge.is_internal() { uf.find(e) } else { e };
            let entry = merged
                .entry(key)
                .or_insert_with(|| (Vec::new(), edge.external, edge.dim));
            if entry.2 != edge.dim {
                return Err(Error::Dimension(format!(
                    "edges merged through copy nodes differ in extent ({} vs {})",
                    entry.2, edge.dim
                )));
            }
            entry.0.push(Slot { node: id, axis });
        }
    }
    // merged edges must agree in extent even where no dense node sees them
    for (&e, edge) in &net.edges {
        if edge.is_internal() {
            let root = uf.find(e);
            if root != e && net.edges[&root].dim != edge.dim {
                return Err(Error::Dimension(format!(
                    "edges {e} and {root} meet in a copy node with different extents"
                )));
            }
        }
    }
    let mut edge_dims = Vec::new();
    for (id, (slots, external, dim)) in merged {
        if external.is_none() {
            edge_dims.push(dim);
        }
        subnet.add_edge_with_id(id, &slots, external)?;
    }
    subnet.next_edge = net.next_edge;
    subnet.validate()?;
    Ok(EffectiveGraph {
        n_nodes: subnet.n_nodes(),
        n_edges: edge_dims.len(),
        edge_dims,
        subnet,
    })
}

/// Open-boundary matrix product state with zero-filled tensors.
///
/// Site `i` has axes `[left, class, feature, right]`, omitting `left` on the
/// first site, `right` on the last, and `class` everywhere but
/// `output_site`. Node ids follow chain order; input leg `i` sits on site `i`.
pub fn build_mps(
    n_sites: usize,
    feature_dim: usize,
    bond_dim: usize,
    n_classes: usize,
    output_site: usize,
) -> Result<TensorNetwork> {
    if n_sites < 2 {
        return Err(Error::Range("an MPS needs at least two sites".into()));
    }
    if output_site >= n_sites {
        return Err(Error::Range(format!("output site {output_site} outside 0..{n_sites}")));
    }
    if feature_dim == 0 || bond_dim == 0 || n_classes == 0 {
        return Err(Error::Range("extents must be positive".into()));
    }
    build_chain(&vec![feature_dim; n_sites], &vec![bond_dim; n_sites - 1], n_classes, output_site)
}

/// Chain with per-site feature extents and per-bond dimensions.
pub fn build_chain(
    feature_dims: &[usize],
    bond_dims: &[usize],
    n_classes: usize,
    output_site: usize,
) -> Result<TensorNetwork> {
    let n = feature_dims.len();
    if bond_dims.len() + 1 != n {
        return Err(Error::Structure("need one bond per neighbouring pair".into()));
    }
    let mut net = TensorNetwork::new();
    let mut axes = Vec::with_capacity(n);
    for i in 0..n {
        let mut shape = Vec::new();
        let mut pos = [None; 4];
        if i > 0 {
            pos[0] = Some(shape.len());
            shape.push(bond_dims[i - 1]);
        }
        if i == output_site {
            pos[1] = Some(shape.len());
            shape.push(n_classes);
        }
        pos[2] = Some(shape.len());
        shape.push(feature_dims[i]);
        if i + 1 < n {
            pos[3] = Some(shape.len());
            shape.push(bond_dims[i]);
        }
        let labels = (0..shape.len() as u32).map(Label).collect();
        net.add_node(Tensor::zeros(shape, labels)?);
        axes.push(pos);
    }
    for (i, pos) in axes.iter().enumerate() {
        net.attach_input(NodeId(i), pos[2].unwrap(), i)?;
    }
    for i in 0..n - 1 {
        net.connect(&[(NodeId(i), axes[i][3].unwrap()), (NodeId(i + 1), axes[i + 1][0].unwrap())])?;
    }
    net.attach_output(NodeId(output_site), axes[output_site][1].unwrap())?;
    net.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{diag_tensor, make_copy_node};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye2() -> Tensor {
        diag_tensor(&[1.0, 1.0]).unwrap()
    }

    /// Identity matrices on (feature, bond) and (bond, output).
    fn identity_pair() -> TensorNetwork {
        let mut net = TensorNetwork::new();
        let a = net.add_node(eye2());
        let b = net.add_node(eye2());
        net.attach_input(a, 0, 0).unwrap();
        net.connect(&[(a, 1), (b, 0)]).unwrap();
        net.attach_output(b, 1).unwrap();
        net
    }

    #[test]
    fn identity_chain_passes_basis_vector() {
        let net = identity_pair();
        for k in 0..2 {
            let mut e = vec![0.0; 2];
            e[k] = 1.0;
            let inputs = Inputs::from([(0, e.clone())]);
            let out = full_contract(&net, &inputs, None).unwrap();
            assert_eq!(out.data(), e.as_slice());
        }
    }

    #[test]
    fn missing_and_extra_inputs_are_rejected() {
        let net = identity_pair();
        assert!(full_contract(&net, &Inputs::new(), None).is_err());
        let extra = Inputs::from([(0, vec![1.0, 0.0]), (3, vec![1.0, 0.0])]);
        assert!(full_contract(&net, &extra, None).is_err());
        let short = Inputs::from([(0, vec![1.0])]);
        assert!(matches!(full_contract(&net, &short, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn connect_rejects_reuse_and_mismatch() {
        let mut net = TensorNetwork::new();
        let a = net.add_node(Tensor::zeros(vec![2, 3], vec![Label(0), Label(1)]).unwrap());
        let b = net.add_node(Tensor::zeros(vec![2], vec![Label(0)]).unwrap());
        assert!(matches!(net.connect(&[(a, 1), (b, 0)]), Err(Error::Dimension(_))));
        net.connect(&[(a, 0), (b, 0)]).unwrap();
        assert!(net.connect(&[(a, 0)]).is_err());
        assert!(net.validate().is_err());
    }

    #[test]
    fn mps_shapes_and_counts() {
        let net = build_mps(3, 2, 4, 10, 0).unwrap();
        let shapes: Vec<Vec<usize>> = net.nodes().map(|(_, n)| n.tensor.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![10, 2, 4], vec![4, 2, 4], vec![4, 2]]);
        assert_eq!(net.param_count(), 120);
        assert_eq!(net.internal_edges().len(), 2);
        let net2 = build_mps(2, 2, 4, 10, 0).unwrap();
        let shapes: Vec<Vec<usize>> = net2.nodes().map(|(_, n)| n.tensor.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![10, 2, 4], vec![4, 2]]);
        assert!(build_mps(1, 2, 4, 10, 0).is_err());
        assert!(build_mps(3, 2, 4, 10, 3).is_err());
    }

    #[test]
    fn param_count_edge_cases() {
        assert_eq!(TensorNetwork::new().param_count(), 0);
        let mut net = TensorNetwork::new();
        let a = net.add_node(Tensor::zeros(vec![5, 5], vec![Label(0), Label(1)]).unwrap());
        assert_eq!(net.param_count(), 25);
        net.node_mut(a).unwrap().frozen = true;
        assert_eq!(net.param_count(), 0);
    }

    #[test]
    fn four_chain_with_one_copy_node() {
        // nodes 1..4 of the chain are ids 0..3; copy the second
        let net = build_mps(4, 2, 2, 3, 0).unwrap();
        let g = effective_hypergraph(&net, &BTreeSet::from([NodeId(1)])).unwrap();
        assert_eq!(g.n_nodes, 3);
        assert_eq!(g.n_edges, 2);
        let merged: Vec<&HyperEdge> = g.subnet.edges().map(|(_, e)| e).filter(|e| e.is_internal()).collect();
        let mut touching: Vec<Vec<NodeId>> = merged.iter().map(|e| e.slots.iter().map(|s| s.node).collect()).collect();
        touching.sort();
        assert_eq!(touching, vec![vec![NodeId(0), NodeId(2)], vec![NodeId(2), NodeId(3)]]);
        // pinned input leg 1 is gone
        assert!(!g.subnet.input_edges().contains_key(&1));
    }

    #[test]
    fn empty_copy_set_is_identity() {
        let net = build_mps(5, 2, 3, 4, 2).unwrap();
        let g = effective_hypergraph(&net, &BTreeSet::new()).unwrap();
        assert_eq!((g.n_nodes, g.n_edges), (5, 4));
        assert_eq!(g.subnet, net);
        let again = effective_hypergraph(&g.subnet, &BTreeSet::new()).unwrap();
        assert_eq!((again.n_nodes, again.n_edges), (g.n_nodes, g.n_edges));
        assert_eq!(again.subnet, g.subnet);
    }

    #[test]
    fn all_internal_nodes_copied() {
        let net = build_mps(3, 2, 2, 3, 0).unwrap();
        let g = effective_hypergraph(&net, &BTreeSet::from([NodeId(1)])).unwrap();
        assert_eq!(g.n_edges, 1);
        let (_, e) = g.subnet.edges().find(|(_, e)| e.is_internal()).unwrap();
        assert_eq!(e.slots.len(), 2);
    }

    #[test]
    fn trailing_copy_block_leaves_one_summed_slot() {
        let net = build_mps(6, 2, 2, 3, 0).unwrap();
        let copies = BTreeSet::from([NodeId(3), NodeId(4), NodeId(5)]);
        let g = effective_hypergraph(&net, &copies).unwrap();
        assert_eq!((g.n_nodes, g.n_edges), (3, 3));
        let singles = g.subnet.edges().filter(|(_, e)| e.is_internal() && e.slots.len() == 1).count();
        assert_eq!(singles, 1);
    }

    #[test]
    fn copying_the_output_node_is_rejected() {
        let net = build_mps(3, 2, 2, 3, 1).unwrap();
        let err = effective_hypergraph(&net, &BTreeSet::from([NodeId(1)]));
        assert!(matches!(err, Err(Error::InvalidSelection(_))));
    }

    #[test]
    fn hypernetwork_matches_explicit_copy_tensor() {
        // A(f0, x) -- C(x, y, z) -- B(y, out), with z pinned by an input
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand_t = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            let labels = (0..shape.len() as u32).map(Label).collect();
            Tensor::from_fn(shape, labels, |_| rng.random_range(-1.0..1.0)).unwrap()
        };
        let a = rand_t(vec![2, 2], &mut rng);
        let b = rand_t(vec![2, 3], &mut rng);
        let mut net = TensorNetwork::new();
        let na = net.add_node(a.clone());
        let nc = net.add_node(make_copy_node(3, 2).unwrap());
        let nb = net.add_node(b.clone());
        net.attach_input(na, 0, 0).unwrap();
        net.attach_input(nc, 2, 1).unwrap();
        net.connect(&[(na, 1), (nc, 0)]).unwrap();
        net.connect(&[(nc, 1), (nb, 0)]).unwrap();
        net.attach_output(nb, 1).unwrap();
        let x0 = vec![0.3, -0.7];
        let x1 = vec![1.5, 0.25];
        let got = full_contract(&net, &Inputs::from([(0, x0.clone()), (1, x1.clone())]), None).unwrap();
        // brute force over the 2^3 summed assignments (f0 is fixed by x0)
        let mut want = [0.0; 3];
        for (c, w) in want.iter_mut().enumerate() {
            for f in 0..2 {
                for x in 0..2 {
                    for y in 0..2 {
                        for z in 0..2 {
                            let cn = if x == y && y == z { 1.0 } else { 0.0 };
                            *w += x0[f] * a.get(&[f, x]) * cn * x1[z] * b.get(&[y, c]);
                        }
                    }
                }
            }
        }
        for c in 0..3 {
            assert!((got.data()[c] - want[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn orders_agree_on_mps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = build_mps(5, 2, 3, 4, 2).unwrap();
        for id in net.node_ids() {
            let t = net.node(id).unwrap().tensor.clone();
            let r = t.map(|_| rng.random_range(-1.0..1.0));
            net.set_tensor(id, r).unwrap();
        }
        let inputs: Inputs = (0..5).map(|i| (i, vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])).collect();
        let base = full_contract(&net, &inputs, None).unwrap();
        for _ in 0..10 {
            let order = ContractionOrder::random(&net, &mut rng);
            let other = full_contract(&net, &inputs, Some(&order)).unwrap();
            assert!(base.rel_diff(&other).unwrap() < 1e-12);
        }
    }

    #[test]
    fn invalid_orders_are_rejected() {
        let net = build_mps(3, 2, 2, 2, 0).unwrap();
        let inputs: Inputs = (0..3).map(|i| (i, vec![1.0, 0.0])).collect();
        let partial = ContractionOrder(vec![(NodeId(0), NodeId(1))]);
        assert!(full_contract(&net, &inputs, Some(&partial)).is_err());
        let reuse = ContractionOrder(vec![(NodeId(0), NodeId(1)), (NodeId(1), NodeId(2))]);
        assert!(full_contract(&net, &inputs, Some(&reuse)).is_err());
    }

    #[test]
    fn topology_text_round_trip() {
        let net = build_mps(4, 2, 3, 5, 1).unwrap();
        let text = net.topology_text();
        let back = TensorNetwork::from_topology_text(&text).unwrap();
        assert_eq!(back.topology_text(), text);
        assert_eq!(back.param_count(), net.param_count());
        assert!(TensorNetwork::from_topology_text("nonsense").is_err());
    }
}
