#![allow(dead_code)]

use datseg::autodiff::{Graph, NodeId};
use datseg::{Array, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-2, 2]`.
pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Uniform values in `[-2, 2]` at least `gap` away from zero, for ops with a
/// kink at the origin.
pub fn uniform_off_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Array::new(shape.to_vec(), values).unwrap()
}

fn weighted_loss<F>(graph: &mut Graph, leaves: &[NodeId], weights: &Array, build: &F) -> Result<NodeId>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let out = build(graph, leaves)?;
    let w = graph.constant(weights.clone());
    let prod = graph.mul(out, w)?;
    Ok(graph.sum(prod))
}

/// Worst relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over the inputs of
/// `build`, where the scalar probed is `Σ out ⊙ W` for a random `W`.
pub fn fd_check<F>(inputs: &[Array], seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let shape = {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|a| g.constant(a.clone())).collect();
        let out = build(&mut g, &ids)?;
        g.value(out).shape().to_vec()
    };
    let weights = uniform(&shape, &mut rng(seed ^ 0x5eed));

    let mut graph = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|a| graph.leaf(a.clone())).collect();
    let loss = weighted_loss(&mut graph, &leaves, &weights, &build)?;
    let grads = graph.backward(loss)?;

    let eval = |values: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = values.iter().map(|a| g.constant(a.clone())).collect();
        let loss = weighted_loss(&mut g, &ids, &weights, &build)?;
        Ok(g.scalar(loss))
    };

    let mut worst: f64 = 0.0;
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic =
            grads.try_get(*leaf).map(|a| a.values().to_vec()).unwrap_or_else(|| vec![0.0; inputs[which].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[which].len() {
            let x = inputs[which].values()[j];
            probe[which].values_mut()[j] = x + FD_STEP;
            let up = eval(&probe)?;
            probe[which].values_mut()[j] = x - FD_STEP;
            let down = eval(&probe)?;
            probe[which].values_mut()[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = datseg::array::norm(a).max(datseg::array::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub mod cases;
pub mod oracles;
