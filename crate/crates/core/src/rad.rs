//! Regional adaptive deformation: adversarial per-superpoint affine
//! transforms.
//!
//! Each region carries a translation, a per-axis log-scale and an
//! axis-angle rotation, all zero at the identity. Points move as
//! `p' = R(ω)·diag(exp s)·(p − c) + c + t` about their region centroid `c`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::array::{norm, normalize_rows, Array};
use crate::autodiff::Graph;
use crate::backbone::{forward_nodes, infer_logits, predict_probabilities, register_params, ModelParams};
use crate::error::{Error, Result};
use crate::lap::raw_directions;
use crate::scene::PointCloud;

/// Voxel cells with fewer points than this are merged into a neighbor.
pub const MIN_REGION_POINTS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpointPartition {
    region_of: Vec<usize>,
    centroids: Vec<[f64; 3]>,
}

impl SuperpointPartition {
    /// Builds a partition from region ids, computing centroids. Ids must be
    /// contiguous and every region non-empty.
    pub fn from_assignment(cloud: &PointCloud, region_of: Vec<usize>) -> Result<Self> {
        if region_of.len() != cloud.len() {
            return Err(Error::invalid("region assignment length differs from point count"));
        }
        let k = region_of.iter().max().map_or(0, |m| m + 1);
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, &r) in region_of.iter().enumerate() {
            let p = cloud.point(i);
            (0..3).for_each(|d| sums[r][d] += p[d]);
            counts[r] += 1;
        }
        if let Some(r) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("region {r} is empty")));
        }
        let centroids =
            sums.iter().zip(&counts).map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64]).collect();
        Ok(Self { region_of, centroids })
    }

    pub fn region_of(&self) -> &[usize] {
        &self.region_of
    }

    pub fn centroids(&self) -> &[[f64; 3]] {
        &self.centroids
    }

    pub fn num_regions(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_regions()];
        self.region_of.iter().for_each(|&r| sizes[r] += 1);
        sizes
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Voxel-grid oversegmentation. Cells are keyed from the cloud's minimum
/// corner; cells under [`MIN_REGION_POINTS`] join the large cell with the
/// nearest centroid. Region ids follow the cells' lexicographic order.
pub fn partition_superpoints(cloud: &PointCloud, cell_size: f64) -> Result<SuperpointPartition> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::invalid(format!("cell size must be positive, got {cell_size}")));
    }
    let n = cloud.len();
    let mut lo = [f64::INFINITY; 3];
    for i in 0..n {
        let p = cloud.point(i);
        (0..3).for_each(|d| lo[d] = lo[d].min(p[d]));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let p = cloud.point(i);
        let key = [0, 1, 2].map(|d| ((p[d] - lo[d]) / cell_size).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let cells: Vec<Vec<usize>> = cells.into_values().collect();
    let centroid = |members: &[usize]| {
        let mut s = [0.0; 3];
        for &i in members {
            let p = cloud.point(i);
            (0..3).for_each(|d| s[d] += p[d]);
        }
        s.map(|v| v / members.len() as f64)
    };
    let large: Vec<usize> = (0..cells.len()).filter(|&c| cells[c].len() >= MIN_REGION_POINTS).collect();
    let mut region_of = vec![0usize; n];
    if large.is_empty() {
        return SuperpointPartition::from_assignment(cloud, region_of);
    }
    let large_centroids: Vec<[f64; 3]> = large.iter().map(|&c| centroid(&cells[c])).collect();
    let mut region_of_cell = vec![usize::MAX; cells.len()];
    for (rid, &c) in large.iter().enumerate() {
        region_of_cell[c] = rid;
    }
    for (c, members) in cells.iter().enumerate() {
        if region_of_cell[c] != usize::MAX {
            continue;
        }
        let mc = centroid(members);
        let mut best = 0;
        for r in 1..large_centroids.len() {
            if dist2(mc, large_centroids[r]) < dist2(mc, large_centroids[best]) {
                best = r;
            }
        }
        region_of_cell[c] = best;
    }
    for (c, members) in cells.iter().enumerate() {
        for &i in members {
            region_of[i] = region_of_cell[c];
        }
    }
    SuperpointPartition::from_assignment(cloud, region_of)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TransformKind {
    Translation,
    Scale,
    Rotation,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [TransformKind::Translation, TransformKind::Scale, TransformKind::Rotation];
}

/// Subset of transform types applied by the deformation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformSet {
    pub translation: bool,
    pub scale: bool,
    pub rotation: bool,
}

impl TransformSet {
    pub const ALL: TransformSet = TransformSet { translation: true, scale: true, rotation: true };

    pub fn contains(&self, kind: TransformKind) -> bool {
        match kind {
            TransformKind::Translation => self.translation,
            TransformKind::Scale => self.scale,
            TransformKind::Rotation => self.rotation,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.translation || self.scale || self.rotation)
    }
}

impl Default for TransformSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for TransformSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.translation, "translation"), (self.scale, "scale"), (self.rotation, "rotation")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        write!(f, "{}", names.join("+"))
    }
}

impl FromStr for TransformSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = TransformSet { translation: false, scale: false, rotation: false };
        for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "translation" => set.translation = true,
                "scale" => set.scale = true,
                "rotation" => set.rotation = true,
                other => return Err(Error::invalid(format!("unknown transform '{other}'"))),
            }
        }
        if set.is_empty() {
            return Err(Error::invalid("at least one transform must be enabled"));
        }
        Ok(set)
    }
}

/// Per-region deformation parameters, each `K_s×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub translation: Array,
    pub log_scale: Array,
    pub axis_angle: Array,
}

impl AffineParams {
    pub fn identity(regions: usize) -> Self {
        Self {
            translation: Array::zeros(&[regions, 3]),
            log_scale: Array::zeros(&[regions, 3]),
            axis_angle: Array::zeros(&[regions, 3]),
        }
    }

    pub fn get(&self, kind: TransformKind) -> &Array {
        match kind {
            TransformKind::Translation => &self.translation,
            TransformKind::Scale => &self.log_scale,
            TransformKind::Rotation => &self.axis_angle,
        }
    }

    fn get_mut(&mut self, kind: TransformKind) -> &mut Array {
        match kind {
            TransformKind::Translation => &mut self.translation,
            TransformKind::Scale => &mut self.log_scale,
            TransformKind::Rotation => &mut self.axis_angle,
        }
    }

    pub fn regions(&self) -> usize {
        self.translation.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadConfig {
    pub xi_a: f64,
    pub eps_a: f64,
    pub transforms: TransformSet,
    pub cell_size: f64,
    pub ip: usize,
    /// Random unit directions instead of the adversarial ones.
    pub noise: bool,
}

impl Default for RadConfig {
    fn default() -> Self {
        Self { xi_a: 0.1, eps_a: 0.05, transforms: TransformSet::ALL, cell_size: 0.5, ip: 1, noise: false }
    }
}

impl RadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi_a >= 0.0 && self.eps_a >= 0.0 && self.xi_a.is_finite() && self.eps_a.is_finite()) {
            return Err(Error::invalid("RAD magnitudes must be finite and non-negative"));
        }
        if self.transforms.is_empty() {
            return Err(Error::invalid("at least one transform must be enabled"));
        }
        if self.cell_size.is_nan() || self.cell_size <= 0.0 {
            return Err(Error::invalid("cell size must be positive"));
        }
        if self.ip == 0 {
            return Err(Error::invalid("ip must be at least 1"));
        }
        Ok(())
    }
}

/// Deformed coordinates for the given per-region parameters. Features are
/// untouched.
pub fn apply_affine(cloud: &PointCloud, partition: &SuperpointPartition, params: &AffineParams) -> Result<Array> {
    let mut graph = Graph::new();
    let c = graph.constant(cloud.coords().clone());
    let t = graph.constant(params.translation.clone());
    let s = graph.constant(params.log_scale.clone());
    let w = graph.constant(params.axis_angle.clone());
    let out = graph.region_affine(c, t, s, w, partition.region_of(), partition.centroids())?;
    Ok(graph.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadDiagnostics {
    /// Divergence at the initial `ξ`-scaled deformation.
    pub lds: f64,
    /// `(region, kind)` pairs whose gradient vanished and stayed at identity.
    pub zero_pairs: Vec<(usize, TransformKind)>,
}

#[derive(Clone, Debug)]
pub struct RadOutput {
    pub cloud: PointCloud,
    pub params: AffineParams,
    pub diagnostics: RadDiagnostics,
}

/// Runs the regional deformation with a fresh clean forward.
pub fn generate_rad<R: Rng + ?Sized>(
    cloud: &PointCloud,
    partition: &SuperpointPartition,
    model: &ModelParams,
    config: &RadConfig,
    rng: &mut R,
) -> Result<RadOutput> {
    let logits = infer_logits(cloud, model, None)?;
    generate_rad_from_logits(cloud, partition, model, &logits, config, rng)
}

/// Initial directions are iid Gaussian per `(region, type)`, normalized and
/// scaled by `ξ_A`; the divergence gradient with respect to those scaled
/// parameters, renormalized per pair and scaled by `ε_A`, gives the final
/// deformation. Disabled types stay at identity.
pub fn generate_rad_from_logits<R: Rng + ?Sized>(
    cloud: &PointCloud,
    partition: &SuperpointPartition,
    model: &ModelParams,
    clean_logits: &Array,
    config: &RadConfig,
    rng: &mut R,
) -> Result<RadOutput> {
    config.validate()?;
    let ks = partition.num_regions();
    let clean = predict_probabilities(clean_logits);
    let mut dirs = AffineParams::identity(ks);
    for kind in TransformKind::ALL {
        if config.transforms.contains(kind) {
            let mut d = raw_directions(ks, 3, rng);
            normalize_rows(&mut d);
            *dirs.get_mut(kind) = d;
        }
    }

    let mut lds = 0.0;
    if !config.noise {
        for _ in 0..config.ip {
            let mut graph = Graph::new();
            let c = graph.constant(cloud.coords().clone());
            let f = graph.constant(cloud.feats().clone());
            let pn = register_params(&mut graph, model, false);
            let ids: Vec<_> = TransformKind::ALL
                .iter()
                .map(|&kind| {
                    let v = dirs.get(kind).map(|x| x * config.xi_a);
                    if config.transforms.contains(kind) {
                        graph.leaf(v)
                    } else {
                        graph.constant(v)
                    }
                })
                .collect();
            let deformed =
                graph.region_affine(c, ids[0], ids[1], ids[2], partition.region_of(), partition.centroids())?;
            let logits = forward_nodes(&mut graph, deformed, f, &pn, model.knn_k(), None)?;
            let qlog = graph.log_softmax_rows(logits)?;
            let target = graph.constant(clean.clone());
            let kl = graph.kl_divergence_rows(target, qlog)?;
            lds = graph.scalar(kl);
            let grads = graph.backward(kl)?;
            for (idx, kind) in TransformKind::ALL.into_iter().enumerate() {
                if config.transforms.contains(kind) {
                    let mut g = grads.get(ids[idx]).clone();
                    normalize_rows(&mut g);
                    *dirs.get_mut(kind) = g;
                }
            }
        }
    }

    let mut zero_pairs = Vec::new();
    let mut params = AffineParams::identity(ks);
    for kind in TransformKind::ALL {
        if !config.transforms.contains(kind) {
            continue;
        }
        let d = dirs.get(kind);
        for r in 0..ks {
            if d.row(r).iter().all(|&x| x == 0.0) {
                zero_pairs.push((r, kind));
            }
        }
        if config.eps_a != 0.0 {
            *params.get_mut(kind) = d.map(|x| x * config.eps_a);
        }
    }
    let coords = if config.eps_a == 0.0 { cloud.coords().clone() } else { apply_affine(cloud, partition, &params)? };
    Ok(RadOutput { cloud: cloud.with_coords(coords)?, params, diagnostics: RadDiagnostics { lds, zero_pairs } })
}

/// Per-pair norms of every enabled transform, `(region, kind, norm)`.
pub fn pair_norms(params: &AffineParams, transforms: TransformSet) -> Vec<(usize, TransformKind, f64)> {
    let mut out = Vec::new();
    for kind in TransformKind::ALL {
        if transforms.contains(kind) {
            let a = params.get(kind);
            out.extend((0..a.rows()).map(|r| (r, kind, norm(a.row(r)))));
        }
    }
    out
}
