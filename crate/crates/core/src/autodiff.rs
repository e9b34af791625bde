//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] records every primitive as a node in creation order. Leaves
//! are either differentiable ([`Graph::leaf`]) or constant
//! ([`Graph::constant`]); [`Graph::backward`] walks the tape in reverse once
//! and returns the gradient of a scalar node with respect to every
//! differentiable leaf. Only the primitives needed by the point network and
//! the consistency losses are provided.

use std::collections::BTreeMap;

use crate::annotation::WeakLabels;
use crate::array::{require_matrix, Array};
use crate::error::{Error, Result};
use crate::rotation::{self, Mat3};

/// `C += A·B` for an `m×k` `A` and `k×n` `B` given as (row, column) strides;
/// `C` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the extents checked above cover every index reached through
    // the strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row groups for [`Graph::row_max_over_groups`]: `groups` rows, each listing
/// `width` source-row indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupIndex {
    width: usize,
    indices: Vec<usize>,
}

impl GroupIndex {
    pub fn new(width: usize, indices: Vec<usize>) -> Result<Self> {
        if width == 0 || !indices.len().is_multiple_of(width) {
            return Err(Error::invalid(format!(
                "group index of length {} is not a multiple of width {width}",
                indices.len()
            )));
        }
        Ok(Self { width, indices })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn groups(&self) -> usize {
        self.indices.len() / self.width
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.indices[i * self.width..(i + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

/// Per-region data of the affine deformation node.
#[derive(Clone, Debug)]
struct AffineCache {
    region_of: Vec<usize>,
    centroids: Vec<[f64; 3]>,
    rotations: Vec<Mat3>,
    jacobians: Vec<Mat3>,
    scales: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add { a: NodeId, b: NodeId, broadcast: bool },
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    GroupMax { input: NodeId, argmax: Vec<usize> },
    ConcatColumns(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    GatherRows { input: NodeId, index: Vec<usize> },
    Sum(NodeId),
    KlRows { p: NodeId, qlog: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<(usize, usize)> },
    Detach,
    RegionAffine { coords: NodeId, translation: NodeId, log_scale: NodeId, axis_angle: NodeId, cache: Box<AffineCache> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    by_leaf: BTreeMap<NodeId, Array>,
}

impl Gradients {
    /// Panics if `id` is not a differentiable leaf of the graph.
    pub fn get(&self, id: NodeId) -> &Array {
        self.by_leaf.get(&id).expect("node is not a differentiable leaf")
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Array> {
        self.by_leaf.get(&id)
    }

    pub fn into_map(self) -> BTreeMap<NodeId, Array> {
        self.by_leaf
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.values()[0]
    }

    fn push(&mut self, op: Op, value: Array, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Same value, but no gradient flows back through the result.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::Detach, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, m) = require_matrix("matmul", av)?;
        let (m2, p) = require_matrix("matmul", bv)?;
        if m != m2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; n * p];
        gemm(n, m, p, av.values(), (m, 1), bv.values(), (p, 1), &mut out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Array::from_parts(n, p, out), rg))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = if av.shape() == bv.shape() {
            false
        } else {
            let (_, c) = require_matrix("add", av)?;
            match bv.dims() {
                Some((1, c2)) if c2 == c => true,
                _ => return Err(shape_err("add", av, bv)),
            }
        };
        let mut values = av.values().to_vec();
        if broadcast {
            for row in values.chunks_exact_mut(av.cols()) {
                row.iter_mut().zip(bv.values()).for_each(|(x, y)| *x += y);
            }
        } else {
            values.iter_mut().zip(bv.values()).for_each(|(x, y)| *x += y);
        }
        let value = Array::new(av.shape().to_vec(), values)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b, broadcast }, value, rg))
    }

    /// Elementwise product of equal-shape arrays.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let values = av.values().iter().zip(bv.values()).map(|(x, y)| x * y).collect();
        let value = Array::new(av.shape().to_vec(), values)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, factor), value, rg)
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), value, rg)
    }

    /// Output row `i` is the columnwise max over the rows of `a` listed in
    /// group `i`. Ties resolve to the first listed row.
    pub fn row_max_over_groups(&mut self, a: NodeId, groups: &GroupIndex) -> Result<NodeId> {
        let av = self.value(a);
        let (n, c) = require_matrix("row_max_over_groups", av)?;
        let g = groups.groups();
        if let Some(pos) = groups.as_slice().iter().position(|&r| r >= n) {
            return Err(Error::IndexOutOfRange {
                op: "row_max_over_groups",
                position: pos,
                index: groups.as_slice()[pos],
                bound: n,
            });
        }
        let x = av.values();
        let mut out = vec![f64::NEG_INFINITY; g * c];
        let mut argmax = vec![0usize; g * c];
        for i in 0..g {
            let orow = &mut out[i * c..(i + 1) * c];
            let arow = &mut argmax[i * c..(i + 1) * c];
            for &src in groups.group(i) {
                let srow = &x[src * c..(src + 1) * c];
                for j in 0..c {
                    if srow[j] > orow[j] {
                        orow[j] = srow[j];
                        arow[j] = src;
                    }
                }
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Op::GroupMax { input: a, argmax }, Array::from_parts(g, c, out), rg))
    }

    pub fn concat_columns(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca) = require_matrix("concat_columns", av)?;
        let (n2, cb) = require_matrix("concat_columns", bv)?;
        if n != n2 {
            return Err(shape_err("concat_columns", av, bv));
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatColumns(a, b), Array::from_parts(n, ca + cb, out), rg))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (n, c) = require_matrix("softmax_rows", av)?;
        let mut out = log_softmax_values(av);
        out.iter_mut().for_each(|v| *v = v.exp());
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Softmax(a), Array::from_parts(n, c, out), rg))
    }

    /// Row-wise `x − logsumexp(x)` with max subtraction.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (n, c) = require_matrix("log_softmax_rows", av)?;
        let out = log_softmax_values(av);
        let rg = self.needs(&[a]);
        Ok(self.push(Op::LogSoftmax(a), Array::from_parts(n, c, out), rg))
    }

    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let (n, c) = require_matrix("gather_rows", av)?;
        if index.is_empty() {
            return Err(Error::invalid("gather_rows: empty index"));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for (pos, &r) in index.iter().enumerate() {
            if r >= n {
                return Err(Error::IndexOutOfRange { op: "gather_rows", position: pos, index: r, bound: n });
            }
            out.extend_from_slice(av.row(r));
        }
        let rg = self.needs(&[a]);
        let value = Array::from_parts(index.len(), c, out);
        Ok(self.push(Op::GatherRows { input: a, index: index.to_vec() }, value, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).values().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), Array::scalar(s), rg)
    }

    /// Mean over rows of `Σ_j P_j (log P_j − Qlog_j)` with `0·log 0 = 0`.
    pub fn kl_divergence_rows(&mut self, p: NodeId, qlog: NodeId) -> Result<NodeId> {
        let (pv, qv) = (self.value(p), self.value(qlog));
        let (n, c) = require_matrix("kl_divergence_rows", pv)?;
        let (n2, c2) = require_matrix("kl_divergence_rows", qv)?;
        if n != n2 || c != c2 {
            return Err(shape_err("kl_divergence_rows", pv, qv));
        }
        let mut total = 0.0;
        for i in 0..n {
            let (prow, qrow) = (pv.row(i), qv.row(i));
            let mut row_sum = 0.0;
            let mut acc = 0.0;
            for j in 0..c {
                let pj = prow[j];
                if pj < -1e-12 {
                    return Err(Error::InvalidDistribution {
                        op: "kl_divergence_rows",
                        row: i,
                        detail: format!("negative probability {pj} in column {j}"),
                    });
                }
                row_sum += pj;
                if pj > 0.0 {
                    acc += pj * (pj.ln() - qrow[j]);
                }
            }
            if (row_sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidDistribution {
                    op: "kl_divergence_rows",
                    row: i,
                    detail: format!("sums to {row_sum}"),
                });
            }
            total += acc;
        }
        let rg = self.needs(&[p, qlog]);
        Ok(self.push(Op::KlRows { p, qlog }, Array::scalar(total / n as f64), rg))
    }

    /// Mean negative log-likelihood over the labeled rows only.
    pub fn cross_entropy_sparse(&mut self, logits: NodeId, labels: &WeakLabels) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, k) = require_matrix("cross_entropy_sparse", lv)?;
        if labels.is_empty() {
            return Err(Error::NoSupervision);
        }
        let entries = labels.entries().to_vec();
        let mut total = 0.0;
        for (pos, &(i, y)) in entries.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { op: "cross_entropy_sparse", position: pos, index: i, bound: n });
            }
            if y >= k {
                return Err(Error::IndexOutOfRange { op: "cross_entropy_sparse", position: pos, index: y, bound: k });
            }
            let row = lv.row(i);
            total -= row[y] - log_sum_exp(row);
        }
        let value = Array::scalar(total / entries.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(Op::CrossEntropy { logits, labels: entries }, value, rg))
    }

    /// Per-region deformation `p' = R(ω)·diag(exp s)·(p − c) + c + t` for the
    /// region of each point. `translation`, `log_scale` and `axis_angle` are
    /// `K_s×3`; centroids are constants.
    pub fn region_affine(
        &mut self,
        coords: NodeId,
        translation: NodeId,
        log_scale: NodeId,
        axis_angle: NodeId,
        region_of: &[usize],
        centroids: &[[f64; 3]],
    ) -> Result<NodeId> {
        let cv = self.value(coords);
        let (n, three) = require_matrix("region_affine", cv)?;
        if three != 3 || region_of.len() != n {
            return Err(Error::ShapeMismatch {
                op: "region_affine",
                left: cv.shape().to_vec(),
                right: vec![region_of.len(), 3],
            });
        }
        let ks = centroids.len();
        for id in [translation, log_scale, axis_angle] {
            let v = self.value(id);
            if v.dims() != Some((ks, 3)) {
                return Err(Error::ShapeMismatch { op: "region_affine", left: v.shape().to_vec(), right: vec![ks, 3] });
            }
        }
        if let Some(pos) = region_of.iter().position(|&r| r >= ks) {
            return Err(Error::IndexOutOfRange {
                op: "region_affine",
                position: pos,
                index: region_of[pos],
                bound: ks,
            });
        }
        let (tv, sv, wv) = (self.value(translation), self.value(log_scale), self.value(axis_angle));
        let mut rotations = Vec::with_capacity(ks);
        let mut jacobians = Vec::with_capacity(ks);
        let mut scales = Vec::with_capacity(ks);
        for r in 0..ks {
            let w = [wv.get(r, 0), wv.get(r, 1), wv.get(r, 2)];
            rotations.push(rotation::rodrigues(w));
            jacobians.push(rotation::right_jacobian(w));
            scales.push([sv.get(r, 0).exp(), sv.get(r, 1).exp(), sv.get(r, 2).exp()]);
        }
        // all-zero parameters pass points through untouched, bit for bit
        let identity: Vec<bool> =
            (0..ks).map(|r| tv.row(r).iter().chain(sv.row(r)).chain(wv.row(r)).all(|&x| x == 0.0)).collect();
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            let r = region_of[i];
            let c = centroids[r];
            let p = cv.row(i);
            if identity[r] {
                out.extend_from_slice(p);
                continue;
            }
            let u = [scales[r][0] * (p[0] - c[0]), scales[r][1] * (p[1] - c[1]), scales[r][2] * (p[2] - c[2])];
            let ru = rotation::mat_vec(&rotations[r], u);
            for d in 0..3 {
                out.push(ru[d] + c[d] + tv.get(r, d));
            }
        }
        let rg = self.needs(&[coords, translation, log_scale, axis_angle]);
        let cache = Box::new(AffineCache {
            region_of: region_of.to_vec(),
            centroids: centroids.to_vec(),
            rotations,
            jacobians,
            scales,
        });
        Ok(self.push(
            Op::RegionAffine { coords, translation, log_scale, axis_angle, cache },
            Array::from_parts(n, 3, out),
            rg,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every differentiable
    /// leaf. Leaves with no path to `loss` get zero arrays.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let mut by_leaf = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let values = grads.get_mut(idx).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_leaf.insert(NodeId(idx), Array::new(node.value.shape().to_vec(), values)?);
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m) = (av.rows(), av.cols());
                let p = bv.cols();
                // dA = G Bᵀ
                self.accumulate(grads, *a, |ga| gemm(n, p, m, g, (p, 1), bv.values(), (1, p), ga));
                // dB = Aᵀ G
                self.accumulate(grads, *b, |gb| gemm(m, n, p, av.values(), (1, m), g, (p, 1), gb));
            }
            Op::Add { a, b, broadcast } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                if *broadcast {
                    let c = self.value(*b).len();
                    self.accumulate(grads, *b, |gb| {
                        for row in g.chunks_exact(c) {
                            gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                        }
                    });
                } else {
                    self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += f * x));
            }
            Op::Relu(a) => {
                let x = self.value(*a).values();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::GroupMax { input, argmax } => {
                let c = node.value.cols();
                self.accumulate(grads, *input, |ga| {
                    for (idx, &src) in argmax.iter().enumerate() {
                        ga[src * c + idx % c] += g[idx];
                    }
                });
            }
            Op::ConcatColumns(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = node.value.rows();
                let w = ca + cb;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * w + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * w + ca + j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let c = s.cols();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..s.rows() {
                        let srow = s.row(i);
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            ga[i * c + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let ls = &node.value;
                let c = ls.cols();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ls.rows() {
                        let lrow = ls.row(i);
                        let grow = &g[i * c..(i + 1) * c];
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            ga[i * c + j] += grow[j] - lrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::GatherRows { input, index } => {
                let c = node.value.cols();
                self.accumulate(grads, *input, |ga| {
                    for (pos, &r) in index.iter().enumerate() {
                        for j in 0..c {
                            ga[r * c + j] += g[pos * c + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::KlRows { p, qlog } => {
                let (pv, qv) = (self.value(*p), self.value(*qlog));
                let scale = g[0] / pv.rows() as f64;
                self.accumulate(grads, *qlog, |gq| {
                    for (o, &pj) in gq.iter_mut().zip(pv.values()) {
                        *o -= scale * pj;
                    }
                });
                // d/dP of P log P is unbounded at P = 0; the log term is dropped there.
                self.accumulate(grads, *p, |gp| {
                    for ((o, &pj), &qj) in gp.iter_mut().zip(pv.values()).zip(qv.values()) {
                        let logp = if pj > 0.0 { pj.ln() } else { 0.0 };
                        *o += scale * (logp + 1.0 - qj);
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |gl| {
                    for &(i, y) in labels {
                        let row = lv.row(i);
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * ((row[j] - lse).exp() - onehot);
                        }
                    }
                });
            }
            Op::RegionAffine { coords, translation, log_scale, axis_angle, cache } => {
                let cv = self.value(*coords);
                let n = cv.rows();
                let ks = cache.centroids.len();
                let mut gt = vec![0.0; ks * 3];
                let mut gs = vec![0.0; ks * 3];
                let mut gw = vec![0.0; ks * 3];
                let mut gc = vec![0.0; n * 3];
                for i in 0..n {
                    let r = cache.region_of[i];
                    let c = cache.centroids[r];
                    let rot = &cache.rotations[r];
                    let sc = cache.scales[r];
                    let p = cv.row(i);
                    let u = [sc[0] * (p[0] - c[0]), sc[1] * (p[1] - c[1]), sc[2] * (p[2] - c[2])];
                    let go = [g[i * 3], g[i * 3 + 1], g[i * 3 + 2]];
                    let rtg = rotation::mat_t_vec(rot, go);
                    // ∂/∂ω = −R [u]ₓ J_r, so the pullback is J_rᵀ (u × Rᵀ g).
                    let uxr = rotation::cross(u, rtg);
                    let wgrad = rotation::mat_t_vec(&cache.jacobians[r], uxr);
                    for d in 0..3 {
                        gt[r * 3 + d] += go[d];
                        gs[r * 3 + d] += rtg[d] * u[d];
                        gw[r * 3 + d] += wgrad[d];
                        gc[i * 3 + d] += sc[d] * rtg[d];
                    }
                }
                for (id, v) in [(*translation, gt), (*log_scale, gs), (*axis_angle, gw), (*coords, gc)] {
                    self.accumulate(grads, id, |acc| acc.iter_mut().zip(&v).for_each(|(o, x)| *o += x));
                }
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_softmax_values(a: &Array) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.rows() {
        let row = a.row(i);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|x| x - lse));
    }
    out
}
