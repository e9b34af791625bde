//! A small point-segmentation network, differentiable in coordinates,
//! features and parameters.
//!
//! Per point: `h_i = MLP_enc([c_i; f_i])`, `g_i = max_{j ∈ knn(i)} h_j`,
//! `logits_i = MLP_head([h_i; g_i])`. Neighborhoods are recomputed from the
//! coordinate values each forward pass and treated as fixed structure, so
//! coordinate gradients flow only through the concatenated values.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::array::Array;
use crate::autodiff::{Graph, GroupIndex, NodeId};
use crate::error::{Error, Result};
use crate::scene::PointCloud;

pub const PARAM_NAMES: [&str; 8] = [
    "enc1.weight",
    "enc1.bias",
    "enc2.weight",
    "enc2.bias",
    "head1.weight",
    "head1.bias",
    "head2.weight",
    "head2.bias",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub feat_dim: usize,
    pub num_classes: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub knn_k: usize,
}

impl BackboneConfig {
    pub fn new(feat_dim: usize, num_classes: usize) -> Self {
        Self { feat_dim, num_classes, hidden1: 32, hidden2: 32, knn_k: 8 }
    }
}

/// Network parameters θ, in the fixed order of [`PARAM_NAMES`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Array>,
    knn_k: usize,
}

impl ModelParams {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let BackboneConfig { feat_dim, num_classes, hidden1, hidden2, knn_k } = *config;
        let layers = [(3 + feat_dim, hidden1), (hidden1, hidden1), (2 * hidden1, hidden2), (hidden2, num_classes)];
        let mut tensors = Vec::with_capacity(8);
        for (idx, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let gain = if idx == layers.len() - 1 { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            tensors.push(Array::matrix(fan_in, fan_out, w)?);
            tensors.push(Array::zeros(&[1, fan_out]));
        }
        Ok(Self { tensors, knn_k })
    }

    pub fn zeros(config: &BackboneConfig) -> Self {
        let BackboneConfig { feat_dim, num_classes, hidden1, hidden2, knn_k } = *config;
        let layers = [(3 + feat_dim, hidden1), (hidden1, hidden1), (2 * hidden1, hidden2), (hidden2, num_classes)];
        let tensors = layers.iter().flat_map(|&(i, o)| [Array::zeros(&[i, o]), Array::zeros(&[1, o])]).collect();
        Self { tensors, knn_k }
    }

    /// Rebuilds parameters from named arrays, checking shapes agree.
    pub fn from_named(named: Vec<(String, Array)>, knn_k: usize) -> Result<Self> {
        if named.len() != PARAM_NAMES.len() {
            return Err(Error::Format(format!("expected {} parameter arrays, got {}", PARAM_NAMES.len(), named.len())));
        }
        let mut tensors = Vec::with_capacity(8);
        for ((name, arr), expected) in named.into_iter().zip(PARAM_NAMES) {
            if name != expected {
                return Err(Error::Format(format!("expected parameter '{expected}', found '{name}'")));
            }
            if arr.dims().is_none() {
                return Err(Error::Format(format!("parameter '{name}' must be rank 2")));
            }
            tensors.push(arr);
        }
        let params = Self { tensors, knn_k };
        params.check_consistent()?;
        Ok(params)
    }

    fn check_consistent(&self) -> Result<()> {
        let t = &self.tensors;
        let h1 = t[0].cols();
        let h2 = t[4].cols();
        let k = t[6].cols();
        let ok = t[0].rows() > 3
            && t[1].dims() == Some((1, h1))
            && t[2].dims() == Some((h1, h1))
            && t[3].dims() == Some((1, h1))
            && t[4].rows() == 2 * h1
            && t[5].dims() == Some((1, h2))
            && t[6].rows() == h2
            && t[7].dims() == Some((1, k))
            && k >= 2
            && self.knn_k >= 1;
        if ok && t.iter().all(Array::is_finite) {
            Ok(())
        } else {
            Err(Error::Format("inconsistent parameter shapes".into()))
        }
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Array)> {
        PARAM_NAMES.iter().copied().zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Array] {
        &self.tensors
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k
    }

    pub fn feat_dim(&self) -> usize {
        self.tensors[0].rows() - 3
    }

    pub fn num_classes(&self) -> usize {
        self.tensors[6].cols()
    }

    pub fn config(&self) -> BackboneConfig {
        BackboneConfig {
            feat_dim: self.feat_dim(),
            num_classes: self.num_classes(),
            hidden1: self.tensors[0].cols(),
            hidden2: self.tensors[4].cols(),
            knn_k: self.knn_k,
        }
    }

    /// `θ ← θ − lr·grad` for each tensor.
    pub fn sgd_step(&mut self, grads: &[Array], lr: f64) {
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            for (x, d) in p.values_mut().iter_mut().zip(g.values()) {
                *x -= lr * d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Array::is_finite)
    }
}

/// Parameter nodes registered in a graph.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    nodes: Vec<NodeId>,
}

impl ParamNodes {
    /// Wraps nodes already holding θ, in parameter order.
    pub fn from_ids(nodes: Vec<NodeId>) -> Self {
        Self { nodes }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Registers θ as differentiable leaves (`trainable`) or constants.
pub fn register_params(graph: &mut Graph, params: &ModelParams, trainable: bool) -> ParamNodes {
    let nodes = params
        .tensors
        .iter()
        .map(|t| if trainable { graph.leaf(t.clone()) } else { graph.constant(t.clone()) })
        .collect();
    ParamNodes { nodes }
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.index.cmp(&other.index))
    }
}

/// k nearest neighbors of every point (itself included) by Euclidean
/// distance; ties go to the lower point index. Rows are sorted by distance.
pub fn knn_index(coords: &Array, k: usize) -> Result<GroupIndex> {
    let n = coords.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("knn: k={k} must be in 1..={n}")));
    }
    let tree = KdTree::build(coords);
    let mut indices = vec![0; n * k];
    let mut best = Vec::with_capacity(k + 1);
    // Queries run in tree order so consecutive searches touch the same leaves.
    for (pos, &i) in tree.order.iter().enumerate() {
        best.clear();
        tree.search(0, &tree.pts[pos], k, &mut best);
        for (slot, c) in indices[i * k..(i + 1) * k].iter_mut().zip(&best) {
            *slot = c.index;
        }
    }
    GroupIndex::new(k, indices)
}

const KD_LEAF: usize = 8;

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Median-split tree. Points left of a split have coordinate `<= value`
/// along its axis, points right of it `>= value`. `pts` is stored in tree
/// order; `order` maps back to the input rows.
struct KdTree {
    pts: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    fn build(coords: &Array) -> Self {
        let pts: Vec<[f64; 3]> = (0..coords.rows())
            .map(|i| {
                let r = coords.row(i);
                [r[0], r[1], r[2]]
            })
            .collect();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut nodes = Vec::new();
        Self::split(&pts, &mut order, &mut nodes, 0, pts.len());
        let pts = order.iter().map(|&i| pts[i]).collect();
        Self { pts, order, nodes }
    }

    fn split(pts: &[[f64; 3]], order: &mut [usize], nodes: &mut Vec<KdNode>, start: usize, end: usize) -> usize {
        let id = nodes.len();
        if end - start <= KD_LEAF {
            nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(pts[i][a]);
                hi[a] = hi[a].max(pts[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a))).unwrap_or(0);
        let mid = (start + end) / 2;
        order[start..end]
            .select_nth_unstable_by(mid - start, |&i, &j| pts[i][axis].total_cmp(&pts[j][axis]).then(i.cmp(&j)));
        let value = pts[order[mid]][axis];
        nodes.push(KdNode::Leaf { start, end });
        let left = Self::split(pts, order, nodes, start, mid);
        let right = Self::split(pts, order, nodes, mid, end);
        nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    /// `best` holds at most `k` candidates in ascending order.
    fn search(&self, node: usize, p: &[f64; 3], k: usize, best: &mut Vec<Candidate>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for (q, &j) in self.pts[start..end].iter().zip(&self.order[start..end]) {
                    let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    if best.len() == k && d > best[k - 1].dist {
                        continue;
                    }
                    let cand = Candidate { dist: d, index: j };
                    if best.len() == k && cand >= best[k - 1] {
                        continue;
                    }
                    let mut at = best.len();
                    while at > 0 && cand < best[at - 1] {
                        at -= 1;
                    }
                    best.insert(at, cand);
                    best.truncate(k);
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = p[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, p, k, best);
                // Equal distances are still visited so lower indices can win ties.
                if best.len() < k || diff * diff <= best[k - 1].dist {
                    self.search(far, p, k, best);
                }
            }
        }
    }
}

/// Builds the logits node from coordinate and feature nodes. `neighbors`
/// overrides the knn computation when the coordinates are known to be
/// unchanged.
pub fn forward_nodes(
    graph: &mut Graph,
    coords: NodeId,
    feats: NodeId,
    params: &ParamNodes,
    knn_k: usize,
    neighbors: Option<&GroupIndex>,
) -> Result<NodeId> {
    let owned;
    let groups = match neighbors {
        Some(g) => g,
        None => {
            owned = knn_index(graph.value(coords), knn_k)?;
            &owned
        }
    };
    let p = &params.nodes;
    let x = graph.concat_columns(coords, feats)?;
    let h = graph.matmul(x, p[0])?;
    let h = graph.add(h, p[1])?;
    let h = graph.relu(h);
    let h = graph.matmul(h, p[2])?;
    let h = graph.add(h, p[3])?;
    let h = graph.relu(h);
    let g = graph.row_max_over_groups(h, groups)?;
    let z = graph.concat_columns(h, g)?;
    let z = graph.matmul(z, p[4])?;
    let z = graph.add(z, p[5])?;
    let z = graph.relu(z);
    let logits = graph.matmul(z, p[6])?;
    graph.add(logits, p[7])
}

/// Handles of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub coords: NodeId,
    pub feats: NodeId,
    pub params: ParamNodes,
}

/// Registers `C`, `F` and θ as differentiable leaves and runs the network.
pub fn forward(cloud: &PointCloud, params: &ModelParams, graph: &mut Graph) -> Result<ForwardOutput> {
    if cloud.feat_dim() != params.feat_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: cloud.feats().shape().to_vec(),
            right: params.tensors[0].shape().to_vec(),
        });
    }
    let coords = graph.leaf(cloud.coords().clone());
    let feats = graph.leaf(cloud.feats().clone());
    let pn = register_params(graph, params, true);
    let logits = forward_nodes(graph, coords, feats, &pn, params.knn_k, None)?;
    Ok(ForwardOutput { logits, coords, feats, params: pn })
}

/// Logits without recording gradients.
pub fn infer_logits(cloud: &PointCloud, params: &ModelParams, neighbors: Option<&GroupIndex>) -> Result<Array> {
    let mut graph = Graph::new();
    let c = graph.constant(cloud.coords().clone());
    let f = graph.constant(cloud.feats().clone());
    let pn = register_params(&mut graph, params, false);
    let logits = forward_nodes(&mut graph, c, f, &pn, params.knn_k, neighbors)?;
    Ok(graph.value(logits).clone())
}

pub fn predict_probabilities(logits: &Array) -> Array {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let lse = crate::autodiff::log_sum_exp(row);
        row.iter_mut().for_each(|x| *x = (*x - lse).exp());
    }
    out
}

/// Row argmax, ties to the lowest class index.
pub fn predict_labels(logits: &Array) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        PointCloud::new(Array::matrix(n, 3, c).unwrap(), Array::matrix(n, 4, f).unwrap()).unwrap()
    }

    #[test]
    fn knn_collinear() {
        let c = Array::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
        let g = knn_index(&c, 2).unwrap();
        assert_eq!(g.group(0), &[0, 1]);
        assert_eq!(g.group(2), &[2, 1]);
        assert!(knn_index(&c, 4).is_err());
    }

    #[test]
    fn knn_k1_is_self() {
        let cloud = random_cloud(20, 4);
        let g = knn_index(cloud.coords(), 1).unwrap();
        for i in 0..20 {
            assert_eq!(g.group(i), &[i]);
        }
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let exhaustive = |c: &Array, k: usize| -> Vec<usize> {
            let n = c.rows();
            (0..n)
                .flat_map(|i| {
                    let mut all: Vec<(f64, usize)> =
                        (0..n).map(|j| ((0..3).map(|a| (c.get(i, a) - c.get(j, a)).powi(2)).sum::<f64>(), j)).collect();
                    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    all.into_iter().take(k).map(|x| x.1)
                })
                .collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lattice: Vec<f64> = (0..300 * 3).map(|_| rng.random_range(0..4) as f64).collect();
        let clustered: Vec<f64> = (0..300 * 3)
            .map(|i| if i % 3 == 2 { 0.0 } else { rng.random_range(0.0..1.0) + 20.0 * ((i / 3) % 2) as f64 })
            .collect();
        let cases = [
            random_cloud(64, 5).coords().clone(),
            Array::matrix(300, 3, lattice).unwrap(),
            Array::matrix(300, 3, clustered).unwrap(),
            Array::matrix(5, 3, vec![1.0; 15]).unwrap(),
        ];
        for c in &cases {
            for k in [1, 3, 5] {
                assert_eq!(knn_index(c, k).unwrap().as_slice(), exhaustive(c, k).as_slice());
            }
        }
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let c = Array::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        let g = knn_index(&c, 2).unwrap();
        assert_eq!(g.group(1), &[1, 0]);
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities() {
        let cloud = random_cloud(16, 6);
        let params = ModelParams::zeros(&BackboneConfig::new(4, 5));
        let logits = infer_logits(&cloud, &params, None).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
        let probs = predict_probabilities(&logits);
        assert!(probs.values().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn argmax_ties_and_values() {
        let logits = Array::from_rows(&[[0.0, 0.0, 0.0], [1.0, 5.0, 2.0]]).unwrap();
        assert_eq!(predict_labels(&logits), vec![0, 1]);
        let p = predict_probabilities(&logits);
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cloud = random_cloud(40, 7);
        let params = ModelParams::init(&BackboneConfig::new(4, 6), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = predict_probabilities(&infer_logits(&cloud, &params, None).unwrap());
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_dimension_mismatch_is_an_error() {
        let cloud = random_cloud(10, 8);
        let params = ModelParams::init(&BackboneConfig::new(3, 6), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(forward(&cloud, &params, &mut Graph::new()).is_err());
    }
}
