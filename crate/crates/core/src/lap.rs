//! Local adaptive perturbation: per-point adversarial offsets on coordinates
//! and features.
//!
//! Starting from random unit directions `d_c` (iid Gaussian) and `d_f`
//! (drawn from the pseudo-class feature covariance), the divergence
//! `KL(P_clean ‖ P(c + ξ_c d_c, f + ξ_f d_f))` is differentiated with respect
//! to the injected offsets. The final perturbation is `ε·g/‖g‖` per point.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::array::{norm, normalize_rows, Array};
use crate::autodiff::{Graph, GroupIndex};
use crate::backbone::{
    forward_nodes, infer_logits, predict_labels, predict_probabilities, register_params, ModelParams,
};
use crate::covariance::ClassCovarianceTracker;
use crate::error::{Error, Result};
use crate::scene::PointCloud;

/// Which adaptive directions are swapped for random noise of equal norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseBaseline {
    #[default]
    Off,
    Coords,
    Feats,
    Both,
}

impl NoiseBaseline {
    pub fn coords(self) -> bool {
        matches!(self, NoiseBaseline::Coords | NoiseBaseline::Both)
    }

    pub fn feats(self) -> bool {
        matches!(self, NoiseBaseline::Feats | NoiseBaseline::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseBaseline::Off => "off",
            NoiseBaseline::Coords => "coords",
            NoiseBaseline::Feats => "feats",
            NoiseBaseline::Both => "both",
        }
    }
}

impl FromStr for NoiseBaseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(NoiseBaseline::Off),
            "coords" => Ok(NoiseBaseline::Coords),
            "feats" => Ok(NoiseBaseline::Feats),
            "both" => Ok(NoiseBaseline::Both),
            other => Err(Error::invalid(format!("noise baseline must be off|coords|feats|both, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LapConfig {
    pub xi_c: f64,
    pub xi_f: f64,
    pub eps_c: f64,
    pub eps_f: f64,
    /// Gradient refinement rounds.
    pub ip: usize,
    /// Class-aware feature directions; iid Gaussian when off.
    pub use_cpg: bool,
    pub perturb_coords: bool,
    pub noise: NoiseBaseline,
}

impl Default for LapConfig {
    fn default() -> Self {
        Self {
            xi_c: 10.0,
            xi_f: 0.1,
            eps_c: 1.0,
            eps_f: 0.05,
            ip: 1,
            use_cpg: true,
            perturb_coords: true,
            noise: NoiseBaseline::Off,
        }
    }
}

impl LapConfig {
    pub fn validate(&self) -> Result<()> {
        let mags = [self.xi_c, self.xi_f, self.eps_c, self.eps_f];
        if mags.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::invalid("LAP magnitudes must be finite and non-negative"));
        }
        if self.ip == 0 {
            return Err(Error::invalid("ip must be at least 1"));
        }
        Ok(())
    }
}

/// `X^lap` together with the offsets that produced it.
#[derive(Clone, Debug)]
pub struct PerturbedCloud {
    pub cloud: PointCloud,
    pub coord_offsets: Array,
    pub feat_offsets: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LapDiagnostics {
    /// Divergence at the initial `ξ`-scaled perturbation.
    pub lds: f64,
    pub mean_norm_gc: f64,
    pub mean_norm_gf: f64,
    /// Points whose gradient row vanished and therefore were not perturbed.
    pub zero_rows_c: usize,
    pub zero_rows_f: usize,
    pub class_counts: Vec<usize>,
}

/// Random initial directions: `d_c` iid standard normal, `d_f` row `i` from
/// `N(0, Σ_{label(i)})` (or iid when `class_aware` is off). Rows are
/// normalized to unit length.
pub fn sample_directions<R: Rng + ?Sized>(
    tracker: &ClassCovarianceTracker,
    pseudo_labels: &[usize],
    class_aware: bool,
    rng: &mut R,
) -> Result<(Array, Array)> {
    let mut d_c = raw_directions(pseudo_labels.len(), 3, rng);
    let mut d_f = if class_aware {
        raw_class_directions(tracker, pseudo_labels, rng)?
    } else {
        raw_directions(pseudo_labels.len(), tracker.dim(), rng)
    };
    normalize_rows(&mut d_c);
    normalize_rows(&mut d_f);
    Ok((d_c, d_f))
}

/// Unnormalized iid standard-normal rows.
pub fn raw_directions<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array {
    let values = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Array::from_parts(rows, cols, values)
}

/// Unnormalized rows `L_k z` with `L_k L_kᵀ = Σ_k + λI`.
pub fn raw_class_directions<R: Rng + ?Sized>(
    tracker: &ClassCovarianceTracker,
    pseudo_labels: &[usize],
    rng: &mut R,
) -> Result<Array> {
    let d = tracker.dim();
    let factors = (0..tracker.num_classes()).map(|k| tracker.factor(k)).collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(pseudo_labels.len() * d);
    let mut z = vec![0.0; d];
    for (i, &k) in pseudo_labels.iter().enumerate() {
        let factor = factors.get(k).ok_or(Error::IndexOutOfRange {
            op: "sample_directions",
            position: i,
            index: k,
            bound: factors.len(),
        })?;
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        values.extend(ClassCovarianceTracker::correlate(factor, &z));
    }
    Ok(Array::from_parts(pseudo_labels.len(), d, values))
}

/// Unit-row random directions scaled to match the row norms of `like`.
pub fn equal_norm_noise<R: Rng + ?Sized>(like: &Array, rng: &mut R) -> Array {
    let mut noise = raw_directions(like.rows(), like.cols(), rng);
    normalize_rows(&mut noise);
    for i in 0..like.rows() {
        let n = norm(like.row(i));
        noise.row_mut(i).iter_mut().for_each(|x| *x *= n);
    }
    noise
}

fn add_scaled(base: &Array, dir: &Array, scale: f64) -> Array {
    if scale == 0.0 {
        return base.clone();
    }
    let values = base.values().iter().zip(dir.values()).map(|(b, d)| b + scale * d).collect();
    Array::from_parts(base.rows(), base.cols(), values)
}

fn mean_row_norm(a: &Array) -> f64 {
    (0..a.rows()).map(|i| norm(a.row(i))).sum::<f64>() / a.rows() as f64
}

/// Runs the full local perturbation: clean forward, covariance update with
/// the resulting pseudo-labels, direction sampling, `ip` gradient rounds and
/// the final `ε`-scaled offsets.
pub fn generate_lap<R: Rng + ?Sized>(
    cloud: &PointCloud,
    params: &ModelParams,
    config: &LapConfig,
    tracker: &mut ClassCovarianceTracker,
    rng: &mut R,
) -> Result<(PerturbedCloud, LapDiagnostics)> {
    let logits = infer_logits(cloud, params, None)?;
    generate_lap_from_logits(cloud, params, &logits, None, config, tracker, rng)
}

/// [`generate_lap`] reusing already computed clean logits (and optionally the
/// clean neighborhoods).
pub fn generate_lap_from_logits<R: Rng + ?Sized>(
    cloud: &PointCloud,
    params: &ModelParams,
    clean_logits: &Array,
    clean_neighbors: Option<&GroupIndex>,
    config: &LapConfig,
    tracker: &mut ClassCovarianceTracker,
    rng: &mut R,
) -> Result<(PerturbedCloud, LapDiagnostics)> {
    config.validate()?;
    let pseudo = predict_labels(clean_logits);
    tracker.update(cloud.feats(), &pseudo)?;
    let (mut d_c, mut d_f) = sample_directions(tracker, &pseudo, config.use_cpg, rng)?;
    let clean = predict_probabilities(clean_logits);

    let mut lds = 0.0;
    let mut g_c = Array::zeros(&[cloud.len(), 3]);
    let mut g_f = Array::zeros(cloud.feats().shape());
    for _ in 0..config.ip {
        let mut graph = Graph::new();
        let c = graph.constant(cloud.coords().clone());
        let f = graph.constant(cloud.feats().clone());
        let pn = register_params(&mut graph, params, false);
        let (cin, r_c) = if config.perturb_coords {
            let r = graph.leaf(d_c.map(|x| x * config.xi_c));
            (graph.add(c, r)?, Some(r))
        } else {
            (c, None)
        };
        let r_f = graph.leaf(d_f.map(|x| x * config.xi_f));
        let fin = graph.add(f, r_f)?;
        let neighbors = if config.perturb_coords { None } else { clean_neighbors };
        let logits = forward_nodes(&mut graph, cin, fin, &pn, params.knn_k(), neighbors)?;
        let qlog = graph.log_softmax_rows(logits)?;
        let target = graph.constant(clean.clone());
        let kl = graph.kl_divergence_rows(target, qlog)?;
        lds = graph.scalar(kl);
        let grads = graph.backward(kl)?;
        if let Some(r) = r_c {
            g_c = grads.get(r).clone();
        }
        g_f = grads.get(r_f).clone();
        d_c = g_c.clone();
        d_f = g_f.clone();
        normalize_rows(&mut d_c);
        normalize_rows(&mut d_f);
    }

    let mut zero_rows_c = (0..d_c.rows()).filter(|&i| d_c.row(i).iter().all(|&x| x == 0.0)).count();
    let zero_rows_f = (0..d_f.rows()).filter(|&i| d_f.row(i).iter().all(|&x| x == 0.0)).count();
    if !config.perturb_coords {
        zero_rows_c = 0;
    }

    let mut r_c = if config.perturb_coords { d_c.map(|x| x * config.eps_c) } else { Array::zeros(&[cloud.len(), 3]) };
    let mut r_f = d_f.map(|x| x * config.eps_f);
    if config.noise.coords() && config.perturb_coords {
        r_c = random_offsets(cloud.len(), 3, config.eps_c, rng);
    }
    if config.noise.feats() {
        r_f = random_offsets(cloud.len(), cloud.feat_dim(), config.eps_f, rng);
    }

    let coords = if config.perturb_coords && config.eps_c != 0.0 {
        add_scaled(cloud.coords(), &r_c, 1.0)
    } else {
        cloud.coords().clone()
    };
    let feats = if config.eps_f != 0.0 { add_scaled(cloud.feats(), &r_f, 1.0) } else { cloud.feats().clone() };

    let diagnostics = LapDiagnostics {
        lds,
        mean_norm_gc: mean_row_norm(&g_c),
        mean_norm_gf: mean_row_norm(&g_f),
        zero_rows_c,
        zero_rows_f,
        class_counts: tracker.counts(),
    };
    Ok((PerturbedCloud { cloud: PointCloud::new(coords, feats)?, coord_offsets: r_c, feat_offsets: r_f }, diagnostics))
}

/// Random `rows×cols` offsets with every row of norm `eps`.
pub fn random_offsets<R: Rng + ?Sized>(rows: usize, cols: usize, eps: f64, rng: &mut R) -> Array {
    let mut noise = raw_directions(rows, cols, rng);
    normalize_rows(&mut noise);
    noise.map(|x| x * eps)
}
