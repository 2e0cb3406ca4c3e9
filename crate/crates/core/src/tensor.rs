//! Dense labeled tensors and the contraction primitives built on them.
//!
//! Data is stored row-major (last axis fastest). Every axis carries a
//! [`Label`]; labels are unique within a tensor and are what contraction,
//! permutation and comparison key on, so two tensors holding the same values
//! under a different axis order compare equal once aligned.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

/// Identifier of a tensor index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(pub u32);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    labels: Vec<Label>,
    data: Vec<f64>,
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

fn check_distinct(labels: &[Label]) -> Result<()> {
    let mut seen = HashSet::with_capacity(labels.len());
    for l in labels {
        if !seen.insert(*l) {
            return Err(Error::Structure(format!("duplicate label {l}")));
        }
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, labels: Vec<Label>, data: Vec<f64>) -> Result<Self> {
        if shape.len() != labels.len() {
            return Err(Error::Structure(format!(
                "{} labels for a rank-{} tensor",
                labels.len(),
                shape.len()
            )));
        }
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::Dimension(format!("axis {axis} has zero extent")));
        }
        check_distinct(&labels)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, labels, data))
    }

    fn from_parts(shape: Vec<usize>, labels: Vec<Label>, data: Vec<f64>) -> Self {
        let t = Self {
            shape,
            labels,
            data,
        };
        t.debug_check_finite();
        t
    }

    #[inline]
    fn debug_check_finite(&self) {
        debug_assert!(
            self.data.iter().all(|x| x.is_finite()),
            "non-finite tensor element"
        );
    }

    pub fn zeros(shape: Vec<usize>, labels: Vec<Label>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, labels, vec![0.0; len])
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in layout order.
    pub fn from_fn(
        shape: Vec<usize>,
        labels: Vec<Label>,
        mut f: impl FnMut(&[usize]) -> f64,
    ) -> Result<Self> {
        let mut t = Self::zeros(shape, labels)?;
        let mut idx = vec![0usize; t.shape.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&idx);
            increment(&mut idx, &t.shape);
        }
        t.debug_check_finite();
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), Vec::new(), vec![value])
    }

    pub fn vector(label: Label, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], vec![label], values)
    }

    /// Row-major matrix with the given row and column labels.
    pub fn matrix(rows: usize, cols: usize, labels: [Label; 2], data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], labels.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates; the shape is fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn axis_of(&self, label: Label) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn extent(&self, label: Label) -> Option<usize> {
        self.axis_of(label).map(|a| self.shape[a])
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let offset = idx
            .iter()
            .zip(strides(&self.shape))
            .zip(&self.shape)
            .map(|((&i, s), &d)| {
                assert!(i < d, "index out of bounds");
                i * s
            })
            .sum::<usize>();
        self.data[offset]
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Option<f64> {
        (self.rank() == 0).then(|| self.data[0])
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.labels.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Renames labels; every source label must exist and the result must stay
    /// distinct. Labels not mentioned are kept.
    pub fn relabel(&self, mapping: &[(Label, Label)]) -> Result<Tensor> {
        let sources: Vec<Label> = mapping.iter().map(|m| m.0).collect();
        check_distinct(&sources)?;
        let mut labels = self.labels.clone();
        for &(from, to) in mapping {
            let axis = self
                .axis_of(from)
                .ok_or_else(|| Error::Structure(format!("label {from} not present")))?;
            labels[axis] = to;
        }
        check_distinct(&labels)?;
        Ok(Tensor::from_parts(self.shape.clone(), labels, self.data.clone()))
    }

    /// Reorders axes so that the labels appear in `order`.
    pub fn permute(&self, order: &[Label]) -> Result<Tensor> {
        if order.len() != self.rank() {
            return Err(Error::Structure(format!(
                "permutation of length {} for rank {}",
                order.len(),
                self.rank()
            )));
        }
        check_distinct(order)?;
        let perm = order
            .iter()
            .map(|&l| {
                self.axis_of(l)
                    .ok_or_else(|| Error::Structure(format!("label {l} not present")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.permute_axes(&perm))
    }

    /// `perm[i]` is the source axis that becomes axis `i`.
    pub(crate) fn permute_axes(&self, perm: &[usize]) -> Tensor {
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self.clone();
        }
        let src_strides = strides(&self.shape);
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let labels: Vec<Label> = perm.iter().map(|&p| self.labels[p]).collect();
        let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            // odometer step with incremental offset
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                offset += walk[axis];
                if idx[axis] < shape[axis] {
                    break;
                }
                offset -= walk[axis] * shape[axis];
                idx[axis] = 0;
            }
        }
        Tensor::from_parts(shape, labels, data)
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Structure("transpose needs a rank-2 tensor".into()));
        }
        Ok(self.permute_axes(&[1, 0]))
    }

    /// Copy of `self` with axes reordered to match `other`'s label order.
    pub fn aligned_to(&self, other: &Tensor) -> Result<Tensor> {
        self.permute(other.labels())
    }

    /// Largest elementwise difference after label alignment, divided by the
    /// larger of the two max-abs values (or 1 when both are smaller).
    pub fn rel_diff(&self, other: &Tensor) -> Result<f64> {
        let b = other.aligned_to(self)?;
        if b.shape != self.shape {
            return Err(Error::Dimension("shapes differ after alignment".into()));
        }
        let scale = self.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE);
        let diff = self
            .data
            .iter()
            .zip(&b.data)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        Ok(diff / scale)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, label: Label) -> Result<Tensor> {
        let axis = self
            .axis_of(label)
            .ok_or_else(|| Error::Structure(format!("label {label} not present")))?;
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &self.data[(o * n + k) * inner..][..inner];
                for (d, s) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        let mut labels = self.labels.clone();
        shape.remove(axis);
        labels.remove(axis);
        Ok(Tensor::from_parts(shape, labels, data))
    }

    /// Keeps the listed indices of one axis, in the given order.
    pub fn select_axis(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Structure(format!("axis {axis} out of range")));
        }
        let n = self.shape[axis];
        if indices.is_empty() || indices.iter().any(|&k| k >= n) {
            return Err(Error::Range(format!("bad index selection {indices:?} for extent {n}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                data.extend_from_slice(&self.data[(o * n + k) * inner..][..inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Tensor::from_parts(shape, self.labels.clone(), data))
    }

    /// Multiplies slice `k` of `axis` by `weights[k]`.
    pub fn scale_axis(&self, axis: usize, weights: &[f64]) -> Result<Tensor> {
        if axis >= self.rank() || weights.len() != self.shape[axis] {
            return Err(Error::Dimension(format!(
                "{} weights for axis {axis} of shape {:?}",
                weights.len(),
                self.shape
            )));
        }
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = self.clone();
        for (i, x) in out.data.iter_mut().enumerate() {
            *x *= weights[(i / inner) % n];
        }
        Ok(out)
    }

    /// Elementwise `self += other` after aligning labels.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        let b = if other.labels == self.labels {
            std::borrow::Cow::Borrowed(other)
        } else {
            std::borrow::Cow::Owned(other.aligned_to(self)?)
        };
        if b.shape != self.shape {
            return Err(Error::Dimension("shapes differ".into()));
        }
        for (x, y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
        Ok(())
    }

    /// Restricts the tensor to index assignments where the given axes agree,
    /// replacing them by a single axis. `groups[i]` lists source axes that
    /// map to output axis `i`; each source axis appears in exactly one group.
    pub(crate) fn merge_axes(&self, groups: &[Vec<usize>], labels: Vec<Label>) -> Result<Tensor> {
        let mut shape = Vec::with_capacity(groups.len());
        for g in groups {
            let d = self.shape[g[0]];
            if g.iter().any(|&a| self.shape[a] != d) {
                return Err(Error::Dimension(format!(
                    "axes {g:?} share an index but differ in extent"
                )));
            }
            shape.push(d);
        }
        let src_strides = strides(&self.shape);
        let walk: Vec<usize> = groups
            .iter()
            .map(|g| g.iter().map(|&a| src_strides[a]).sum())
            .collect();
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for _ in 0..total {
            data.push(self.data[offset]);
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                offset += walk[axis];
                if idx[axis] < shape[axis] {
                    break;
                }
                offset -= walk[axis] * shape[axis];
                idx[axis] = 0;
            }
        }
        Tensor::new(shape, labels, data)
    }

    /// Adjoint of [`Tensor::merge_axes`]: scatters `merged` back onto the
    /// diagonal positions of a tensor with `shape`, zero elsewhere.
    pub(crate) fn scatter_merged(
        merged: &Tensor,
        groups: &[Vec<usize>],
        shape: &[usize],
        labels: Vec<Label>,
    ) -> Tensor {
        let dst_strides = strides(shape);
        let walk: Vec<usize> = groups
            .iter()
            .map(|g| g.iter().map(|&a| dst_strides[a]).sum())
            .collect();
        let mut data = vec![0.0; shape.iter().product()];
        let mut idx = vec![0usize; merged.rank()];
        let mut offset = 0usize;
        for &v in &merged.data {
            data[offset] += v;
            for axis in (0..idx.len()).rev() {
                idx[axis] += 1;
                offset += walk[axis];
                if idx[axis] < merged.shape[axis] {
                    break;
                }
                offset -= walk[axis] * merged.shape[axis];
                idx[axis] = 0;
            }
        }
        Tensor::from_parts(shape.to_vec(), labels, data)
    }
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for axis in (0..shape.len()).rev() {
        idx[axis] += 1;
        if idx[axis] < shape[axis] {
            return;
        }
        idx[axis] = 0;
    }
}

/// Product of two tensors over their shared labels.
///
/// Shared labels listed in `keep` are carried through as batch indices
/// (hyperedge semantics); every other shared label is summed. The result
/// holds `a`'s surviving axes in `a`'s order followed by `b`'s unshared axes
/// in `b`'s order.
pub fn pair_product(a: &Tensor, b: &Tensor, keep: &[Label]) -> Result<Tensor> {
    let mut kept = Vec::new();
    let mut summed = Vec::new();
    for &l in &a.labels {
        if let Some(bd) = b.extent(l) {
            let ad = a.extent(l).unwrap_or(0);
            if ad != bd {
                return Err(Error::Dimension(format!(
                    "label {l} has extent {ad} and {bd}"
                )));
            }
            if keep.contains(&l) {
                kept.push(l);
            } else {
                summed.push(l);
            }
        }
    }
    if let Some(k) = keep.iter().find(|k| !kept.contains(k)) {
        return Err(Error::Structure(format!("kept label {k} is not shared")));
    }
    let free_a: Vec<Label> = a
        .labels
        .iter()
        .copied()
        .filter(|l| b.axis_of(*l).is_none())
        .collect();
    let free_b: Vec<Label> = b
        .labels
        .iter()
        .copied()
        .filter(|l| a.axis_of(*l).is_none())
        .collect();

    let ext = |t: &Tensor, ls: &[Label]| -> usize { ls.iter().map(|&l| t.extent(l).unwrap()).product() };
    let nb = ext(a, &kept);
    let m = ext(a, &free_a);
    let k = ext(a, &summed);
    let n = ext(b, &free_b);

    let order_a: Vec<Label> = kept.iter().chain(&free_a).chain(&summed).copied().collect();
    let order_b: Vec<Label> = kept.iter().chain(&summed).chain(&free_b).copied().collect();
    let pa = a.permute(&order_a)?;
    let pb = b.permute(&order_b)?;

    let mut out = vec![0.0; nb * m * n];
    for batch in 0..nb {
        let ablk = &pa.data[batch * m * k..][..m * k];
        let bblk = &pb.data[batch * k * n..][..k * n];
        let cblk = &mut out[batch * m * n..][..m * n];
        for i in 0..m {
            let crow = &mut cblk[i * n..][..n];
            for s in 0..k {
                let av = ablk[i * k + s];
                let brow = &bblk[s * n..][..n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    }

    let mut labels: Vec<Label> = kept.iter().chain(&free_a).chain(&free_b).copied().collect();
    let shape: Vec<usize> = labels
        .iter()
        .map(|&l| a.extent(l).or_else(|| b.extent(l)).unwrap())
        .collect();
    let raw = Tensor::from_parts(shape, labels.clone(), out);
    // target order: a's surviving labels as they appear in a, then free_b
    labels = a
        .labels
        .iter()
        .copied()
        .filter(|l| !summed.contains(l))
        .chain(free_b.iter().copied())
        .collect();
    raw.permute(&labels)
}

/// Contracts `a` with `b`, summing over each `(label in a, label in b)` pair.
///
/// The result carries the unpaired axes of `a` then those of `b`, each in
/// original order.
pub fn contract(a: &Tensor, b: &Tensor, pairs: &[(Label, Label)]) -> Result<Tensor> {
    let pa: Vec<Label> = pairs.iter().map(|p| p.0).collect();
    let pb: Vec<Label> = pairs.iter().map(|p| p.1).collect();
    check_distinct(&pa)?;
    check_distinct(&pb)?;
    for &(la, lb) in pairs {
        let da = a
            .extent(la)
            .ok_or_else(|| Error::Structure(format!("label {la} not in left operand")))?;
        let db = b
            .extent(lb)
            .ok_or_else(|| Error::Structure(format!("label {lb} not in right operand")))?;
        if da != db {
            return Err(Error::Dimension(format!(
                "paired labels {la}/{lb} have extents {da} and {db}"
            )));
        }
    }
    for &l in &b.labels {
        if !pb.contains(&l) && a.axis_of(l).is_some() {
            return Err(Error::Structure(format!(
                "unpaired label {l} appears in both operands"
            )));
        }
    }
    // Relabel b's paired axes onto a's labels; a label of b that is renamed
    // away frees its name, so route through a temporary range first.
    let tmp_base = a
        .labels
        .iter()
        .chain(&b.labels)
        .map(|l| l.0)
        .max()
        .unwrap_or(0)
        + 1;
    let to_tmp: Vec<(Label, Label)> = pb
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, Label(tmp_base + i as u32)))
        .collect();
    let from_tmp: Vec<(Label, Label)> = pa
        .iter()
        .enumerate()
        .map(|(i, &l)| (Label(tmp_base + i as u32), l))
        .collect();
    let b2 = b.relabel(&to_tmp)?.relabel(&from_tmp)?;
    pair_product(a, &b2, &[])
}

/// Tensor product; the label sets must be disjoint.
pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if let Some(l) = a.labels.iter().find(|l| b.axis_of(**l).is_some()) {
        return Err(Error::Structure(format!("label {l} appears in both operands")));
    }
    pair_product(a, b, &[])
}

/// Rank-`rank` copy tensor of extent `dim` on every axis: one where all
/// indices agree, zero elsewhere. Axes are labelled `0..rank`.
pub fn make_copy_node(rank: usize, dim: usize) -> Result<Tensor> {
    let labels = (0..rank as u32).map(Label).collect();
    copy_node_with_labels(labels, dim)
}

pub fn copy_node_with_labels(labels: Vec<Label>, dim: usize) -> Result<Tensor> {
    if labels.is_empty() || dim == 0 {
        return Err(Error::Range("copy node needs rank >= 1 and dim >= 1".into()));
    }
    let rank = labels.len();
    let mut t = Tensor::zeros(vec![dim; rank], labels)?;
    let diag_step: usize = strides(&t.shape).iter().sum();
    for k in 0..dim {
        t.data[k * diag_step] = 1.0;
    }
    Ok(t)
}

/// Square matrix with `values` on the diagonal, labelled `(0, 1)`.
pub fn diag_tensor(values: &[f64]) -> Result<Tensor> {
    if values.is_empty() {
        return Err(Error::Range("diagonal of an empty vector".into()));
    }
    let n = values.len();
    let mut data = vec![0.0; n * n];
    for (k, &v) in values.iter().enumerate() {
        data[k * n + k] = v;
    }
    Tensor::matrix(n, n, [Label(0), Label(1)], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l(i: u32) -> Label {
        Label(i)
    }

    fn eye(n: usize, labels: [Label; 2]) -> Tensor {
        diag_tensor(&vec![1.0; n]).unwrap().relabel(&[(l(0), labels[0]), (l(1), labels[1])]).unwrap()
    }

    #[test]
    fn identity_composition() {
        let a = eye(2, [l(0), l(1)]);
        let b = eye(2, [l(2), l(3)]);
        let c = contract(&a, &b, &[(l(1), l(2))]).unwrap();
        assert_eq!(c.labels(), &[l(0), l(3)]);
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dot_product() {
        let a = Tensor::vector(l(0), vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(l(7), vec![3.0, 4.0]).unwrap();
        let c = contract(&a, &b, &[(l(0), l(7))]).unwrap();
        assert_eq!(c.scalar_value(), Some(11.0));
    }

    #[test]
    fn copy_node_with_vector_gives_diagonal() {
        let c = make_copy_node(3, 2).unwrap();
        let v = Tensor::vector(l(9), vec![5.0, 7.0]).unwrap();
        let r = contract(&c, &v, &[(l(2), l(9))]).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[5.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn contract_errors() {
        let a = Tensor::vector(l(0), vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(l(1), vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(contract(&a, &b, &[(l(0), l(1))]), Err(Error::Dimension(_))));
        assert!(matches!(contract(&a, &b, &[(l(5), l(1))]), Err(Error::Structure(_))));
    }

    #[test]
    fn outer_examples() {
        let s = Tensor::scalar(2.0);
        let v = Tensor::vector(l(0), vec![1.0, 3.0]).unwrap();
        assert_eq!(outer(&s, &v).unwrap().data(), &[2.0, 6.0]);

        let e0 = Tensor::vector(l(0), vec![1.0, 0.0]).unwrap();
        let e1 = Tensor::vector(l(1), vec![1.0, 0.0]).unwrap();
        assert_eq!(outer(&e0, &e1).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

        let c = make_copy_node(2, 2).unwrap();
        let v = Tensor::vector(l(2), vec![1.0, 0.0]).unwrap();
        let r = outer(&c, &v).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let want = if i == j && k == 0 { 1.0 } else { 0.0 };
                    assert_eq!(r.get(&[i, j, k]), want);
                }
            }
        }
        assert!(matches!(outer(&e0, &e0), Err(Error::Structure(_))));
    }

    #[test]
    fn copy_node_examples() {
        assert_eq!(make_copy_node(2, 3).unwrap(), eye(3, [l(0), l(1)]));
        let c = make_copy_node(3, 2).unwrap();
        let ones: Vec<f64> = c.data().to_vec();
        assert_eq!(ones, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(make_copy_node(1, 2).unwrap().data(), &[1.0, 1.0]);
        assert!(make_copy_node(0, 2).is_err());
    }

    #[test]
    fn diag_examples() {
        assert_eq!(diag_tensor(&[1.0, 1.0, 1.0]).unwrap(), eye(3, [l(0), l(1)]));
        assert_eq!(diag_tensor(&[1.0, 0.0]).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(diag_tensor(&[0.5, 0.25]).unwrap().data(), &[0.5, 0.0, 0.0, 0.25]);
        assert!(diag_tensor(&[]).is_err());
    }

    #[test]
    fn transpose_examples() {
        let t = Tensor::matrix(2, 3, [l(0), l(1)], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(tt.get(&[j, i]), t.get(&[i, j]));
            }
        }
        assert_eq!(t.permute(&[l(0), l(1)]).unwrap(), t);
        assert_eq!(tt.transpose().unwrap(), t);
        assert!(t.permute(&[l(0), l(0)]).is_err());
        assert!(t.relabel(&[(l(0), l(1))]).is_err());
    }

    #[test]
    fn hyperedge_product_keeps_batch_index() {
        // c[k] = sum_i a[k,i] b[k,i] with k kept
        let a = Tensor::matrix(2, 2, [l(0), l(1)], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::matrix(2, 2, [l(0), l(1)], vec![5., 6., 7., 8.]).unwrap();
        let c = pair_product(&a, &b, &[l(0)]).unwrap();
        assert_eq!(c.labels(), &[l(0)]);
        assert_eq!(c.data(), &[17.0, 53.0]);
    }

    #[test]
    fn merge_and_scatter_are_adjoint() {
        let t = Tensor::from_fn(vec![3, 2, 3], vec![l(0), l(1), l(2)], |i| (i[0] * 6 + i[1] * 3 + i[2]) as f64).unwrap();
        let groups = vec![vec![0, 2], vec![1]];
        let m = t.merge_axes(&groups, vec![l(5), l(6)]).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(m.get(&[2, 1]), t.get(&[2, 1, 2]));
        let back = Tensor::scatter_merged(&m, &groups, t.shape(), t.labels().to_vec());
        assert_eq!(back.get(&[1, 0, 1]), t.get(&[1, 0, 1]));
        assert_eq!(back.get(&[1, 0, 2]), 0.0);
    }

    fn brute_pin(vectors: &[Vec<f64>]) -> f64 {
        let d = vectors[0].len();
        (0..d).map(|k| vectors.iter().map(|v| v[k]).product::<f64>()).sum()
    }

    fn arb_tensor(labels: Vec<Label>, max_dim: usize) -> impl Strategy<Value = Tensor> {
        let rank = labels.len();
        prop::collection::vec(1..=max_dim, rank).prop_flat_map(move |shape| {
            let len: usize = shape.iter().product();
            let labels = labels.clone();
            prop::collection::vec(-2.0f64..2.0, len)
                .prop_map(move |data| Tensor::new(shape.clone(), labels.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pinning_law(rank in 1usize..=4, dim in 1usize..=4, seed in prop::collection::vec(-3.0f64..3.0, 16)) {
            let vectors: Vec<Vec<f64>> = (0..rank).map(|j| (0..dim).map(|k| seed[j * 4 + k]).collect()).collect();
            let mut t = make_copy_node(rank, dim).unwrap();
            for (j, v) in vectors.iter().enumerate() {
                let vt = Tensor::vector(Label(100), v.clone()).unwrap();
                t = contract(&t, &vt, &[(Label(j as u32), Label(100))]).unwrap();
            }
            let got = t.scalar_value().unwrap();
            let want = brute_pin(&vectors);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }

        #[test]
        fn contract_is_homogeneous(a in arb_tensor(vec![l(0), l(1)], 4), alpha in -3.0f64..3.0, extra in 1usize..4) {
            let k = a.shape()[1];
            let b = Tensor::from_fn(vec![k, extra], vec![l(1), l(2)], |i| (i[0] as f64 - 0.5) * (i[1] as f64 + 1.0)).unwrap();
            let lhs = contract(&a.scale(alpha), &b, &[(l(1), l(1))]).unwrap();
            let rhs = contract(&a, &b, &[(l(1), l(1))]).unwrap().scale(alpha);
            prop_assert!(lhs.rel_diff(&rhs).unwrap() <= 1e-12);
        }

        #[test]
        fn copy_matrix_is_identity_law(a in arb_tensor(vec![l(0), l(1), l(2)], 3)) {
            let d = a.shape()[1];
            let c = make_copy_node(2, d).unwrap().relabel(&[(l(0), l(10)), (l(1), l(11))]).unwrap();
            let r = contract(&a, &c, &[(l(1), l(10))]).unwrap();
            let expect = a.relabel(&[(l(1), l(11))]).unwrap();
            prop_assert!(r.rel_diff(&expect).unwrap() <= 1e-15);
        }

        #[test]
        fn outer_then_contract_scales_by_norm(a in arb_tensor(vec![l(0), l(1)], 3), b in arb_tensor(vec![l(5), l(6)], 3)) {
            let ab = outer(&a, &b).unwrap();
            let b2 = b.relabel(&[(l(5), l(15)), (l(6), l(16))]).unwrap();
            let r = contract(&ab, &b2, &[(l(5), l(15)), (l(6), l(16))]).unwrap();
            let norm2: f64 = b.data().iter().map(|x| x * x).sum();
            let expect = a.scale(norm2);
            prop_assert!(r.rel_diff(&expect).unwrap() <= 1e-12);
        }

        #[test]
        fn permute_preserves_elements(a in arb_tensor(vec![l(0), l(1), l(2)], 3)) {
            let p = a.permute(&[l(2), l(0), l(1)]).unwrap();
            let s = a.shape();
            for i in 0..s[0] { for j in 0..s[1] { for k in 0..s[2] {
                prop_assert_eq!(p.get(&[k, i, j]), a.get(&[i, j, k]));
            }}}
            prop_assert_eq!(p.aligned_to(&a).unwrap(), a);
        }
    }
}
