//! Finite-difference cases, 20 random instances each.

use datseg::autodiff::{Graph, GroupIndex};
use datseg::backbone::{forward_nodes, knn_index, ParamNodes};
use datseg::{
    apply_affine, AffineParams, Array, BackboneConfig, ModelParams, PointCloud, Result, SuperpointPartition, WeakLabels,
};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{fd_check, relative_error, rng, uniform, uniform_off_zero, FD_STEP};

pub const INSTANCES: u64 = 20;

pub type Case = fn(u64) -> Result<f64>;

pub const CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("add", add),
    ("add_broadcast", add_broadcast),
    ("mul", mul),
    ("scale", scale),
    ("relu", relu),
    ("row_max_over_groups", row_max_over_groups),
    ("concat_columns", concat_columns),
    ("softmax_rows", softmax_rows),
    ("log_softmax_rows", log_softmax_rows),
    ("gather_rows", gather_rows),
    ("sum", sum),
    ("kl_divergence_rows", kl_divergence_rows),
    ("cross_entropy_sparse", cross_entropy_sparse),
    ("region_affine", region_affine),
    ("backbone_forward", backbone_forward),
    ("apply_affine", apply_affine_case),
];

fn dims(r: &mut impl Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(1..=5)).collect()
}

fn matmul(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 3);
    fd_check(&[uniform(&[d[0], d[1]], r), uniform(&[d[1], d[2]], r)], seed, |g, x| g.matmul(x[0], x[1]))
}

fn add(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    fd_check(&[uniform(&d, r), uniform(&d, r)], seed, |g, x| g.add(x[0], x[1]))
}

fn add_broadcast(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    fd_check(&[uniform(&d, r), uniform(&[1, d[1]], r)], seed, |g, x| g.add(x[0], x[1]))
}

fn mul(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    fd_check(&[uniform(&d, r), uniform(&d, r)], seed, |g, x| g.mul(x[0], x[1]))
}

fn scale(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    let factor = r.random_range(-2.0..2.0);
    fd_check(&[uniform(&d, r)], seed, move |g, x| Ok(g.scale(x[0], factor)))
}

fn relu(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    fd_check(&[uniform_off_zero(&d, 1e-3, r)], seed, |g, x| Ok(g.relu(x[0])))
}

fn row_max_over_groups(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (n, c, w) = (r.random_range(2..=8), r.random_range(1..=4), r.random_range(1..=4));
    // Distinct column entries keep the argmax stable under the probe step.
    let mut values = vec![0.0; n * c];
    for j in 0..c {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(r);
        for (rank, &i) in order.iter().enumerate() {
            values[i * c + j] = -2.0 + 0.4 * rank as f64 + r.random_range(0.0..0.1);
        }
    }
    let input = Array::matrix(n, c, values)?;
    let groups = GroupIndex::new(w, (0..n * w).map(|_| r.random_range(0..n)).collect())?;
    fd_check(&[input], seed, move |g, x| g.row_max_over_groups(x[0], &groups))
}

fn concat_columns(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 3);
    fd_check(&[uniform(&[d[0], d[1]], r), uniform(&[d[0], d[2]], r)], seed, |g, x| g.concat_columns(x[0], x[1]))
}

fn softmax_rows(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    fd_check(&[uniform(&d, r)], seed, |g, x| g.softmax_rows(x[0]))
}

fn log_softmax_rows(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    fd_check(&[uniform(&d, r)], seed, |g, x| g.log_softmax_rows(x[0]))
}

fn gather_rows(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    let index: Vec<usize> = (0..r.random_range(1..=8)).map(|_| r.random_range(0..d[0])).collect();
    fd_check(&[uniform(&d, r)], seed, move |g, x| g.gather_rows(x[0], &index))
}

fn sum(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let d = dims(r, 2);
    fd_check(&[uniform(&d, r)], seed, |g, x| Ok(g.sum(x[0])))
}

fn kl_divergence_rows(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (n, c) = (r.random_range(1..=5), r.random_range(2..=5));
    fd_check(&[uniform(&[n, c], r), uniform(&[n, c], r)], seed, |g, x| {
        let p = g.softmax_rows(x[0])?;
        let q = g.log_softmax_rows(x[1])?;
        g.kl_divergence_rows(p, q)
    })
}

fn cross_entropy_sparse(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (n, c) = (r.random_range(1..=6), r.random_range(2..=5));
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(r);
    rows.truncate(r.random_range(1..=n));
    let labels = WeakLabels::new(rows.into_iter().map(|i| (i, r.random_range(0..c))).collect())?;
    fd_check(&[uniform(&[n, c], r)], seed, move |g, x| g.cross_entropy_sparse(x[0], &labels))
}

fn affine_inputs(r: &mut impl Rng, seed: u64) -> (usize, Vec<usize>, Vec<[f64; 3]>, [Array; 4]) {
    let k = r.random_range(1..=3);
    let n = r.random_range(k..=8);
    let mut region_of: Vec<usize> = (0..n).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
    region_of.shuffle(r);
    let centroids: Vec<[f64; 3]> = (0..k).map(|_| std::array::from_fn(|_| r.random_range(-2.0..2.0))).collect();
    // Every fourth instance probes the small-angle branch of the rotation.
    let angle = if seed.is_multiple_of(4) { uniform(&[k, 3], r).map(|v| v * 1e-6) } else { uniform(&[k, 3], r) };
    let params = [uniform(&[n, 3], r), uniform(&[k, 3], r), uniform(&[k, 3], r).map(|v| 0.5 * v), angle];
    (n, region_of, centroids, params)
}

fn region_affine(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (_, region_of, centroids, inputs) = affine_inputs(r, seed);
    fd_check(&inputs, seed, move |g, x| g.region_affine(x[0], x[1], x[2], x[3], &region_of, &centroids))
}

fn backbone_forward(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let n = r.random_range(4..=10);
    let config = BackboneConfig { hidden1: 5, hidden2: 4, knn_k: 3, ..BackboneConfig::new(4, 3) };
    let shapes = ModelParams::zeros(&config);
    let named = shapes.named().map(|(name, a)| (name.to_string(), uniform(a.shape(), r))).collect();
    let params = ModelParams::from_named(named, config.knn_k)?;
    let coords = uniform(&[n, 3], r);
    let feats = uniform(&[n, 4], r).map(|v| 0.25 * (v + 2.0));
    // knn is discrete: it is fixed from the unperturbed coordinates.
    let neighbors = knn_index(&coords, config.knn_k)?;
    let k = config.knn_k;
    let mut inputs = vec![coords, feats];
    inputs.extend(params.tensors().iter().cloned());
    fd_check(&inputs, seed, move |g, x| {
        forward_nodes(g, x[0], x[1], &ParamNodes::from_ids(x[2..].to_vec()), k, Some(&neighbors))
    })
}

/// `apply_affine` probed directly against the graph gradient of the same map.
fn apply_affine_case(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (n, region_of, _, [coords, t, s, w]) = affine_inputs(r, seed);
    let feats = Array::zeros(&[n, 1]);
    let cloud = PointCloud::new(coords.clone(), feats)?;
    let partition = SuperpointPartition::from_assignment(&cloud, region_of)?;
    let k = partition.num_regions();
    let params = AffineParams { translation: t, log_scale: s, axis_angle: w };
    let weights = uniform(&[n, 3], &mut rng(seed ^ 0x5eed));
    let probe = |cloud: &PointCloud, params: &AffineParams| -> Result<f64> {
        let out = apply_affine(cloud, &partition, params)?;
        Ok(out.values().iter().zip(weights.values()).map(|(a, b)| a * b).sum())
    };

    let mut graph = Graph::new();
    let c = graph.leaf(cloud.coords().clone());
    let leaves = [
        graph.leaf(params.translation.clone()),
        graph.leaf(params.log_scale.clone()),
        graph.leaf(params.axis_angle.clone()),
    ];
    let out = graph.region_affine(c, leaves[0], leaves[1], leaves[2], partition.region_of(), partition.centroids())?;
    if graph.value(out) != &apply_affine(&cloud, &partition, &params)? {
        return Ok(f64::INFINITY);
    }
    let wn = graph.constant(weights.clone());
    let prod = graph.mul(out, wn)?;
    let loss = graph.sum(prod);
    let grads = graph.backward(loss)?;

    let mut worst: f64 = 0.0;
    let analytic = grads.get(c).values().to_vec();
    let mut numeric = Vec::new();
    for j in 0..coords.len() {
        let shifted = |d: f64| {
            let mut v = cloud.coords().clone();
            v.values_mut()[j] += d;
            cloud.with_coords(v)
        };
        numeric.push((probe(&shifted(FD_STEP)?, &params)? - probe(&shifted(-FD_STEP)?, &params)?) / (2.0 * FD_STEP));
    }
    worst = worst.max(relative_error(&analytic, &numeric));
    for (slot, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).values().to_vec();
        let mut numeric = Vec::new();
        for j in 0..k * 3 {
            let shifted = |d: f64| {
                let mut p = params.clone();
                let field = [&mut p.translation, &mut p.log_scale, &mut p.axis_angle][slot].values_mut();
                field[j] += d;
                p
            };
            numeric.push((probe(&cloud, &shifted(FD_STEP))? - probe(&cloud, &shifted(-FD_STEP))?) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
