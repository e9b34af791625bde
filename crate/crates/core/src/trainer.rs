//! Training loop with segmentation and consistency losses, and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::annotation::WeakLabels;
use crate::array::Array;
use crate::autodiff::{Graph, GroupIndex, NodeId};
use crate::backbone::{
    forward_nodes, infer_logits, knn_index, predict_labels, register_params, BackboneConfig, ModelParams, ParamNodes,
};
use crate::covariance::ClassCovarianceTracker;
use crate::error::{Error, Result};
use crate::lap::{generate_lap_from_logits, LapConfig, LapDiagnostics, NoiseBaseline};
use crate::metrics::Metrics;
use crate::rad::{generate_rad_from_logits, partition_superpoints, RadConfig, SuperpointPartition};
use crate::scene::{LabeledScene, PointCloud};
use crate::seed::derive_seed;

const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1;
const AUG_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_scenes: usize,
    pub steps: usize,
    /// Probability of the LAP branch when both modules are enabled.
    pub branch_prob: f64,
    pub use_lap: bool,
    pub use_rad: bool,
    /// Apply both consistency terms every step instead of drawing one.
    pub both_branches: bool,
    pub noise_baseline: NoiseBaseline,
    pub use_cpg: bool,
    /// Off means feature-only perturbation: LAP leaves coordinates alone and
    /// RAD is disabled.
    pub perturb_coords: bool,
    pub seed: u64,
    /// Validation period in steps; 0 disables validation.
    pub val_every: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub knn_k: usize,
    pub lap: LapConfig,
    pub rad: RadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 2.0,
            lr: 0.01,
            batch_scenes: 2,
            steps: 500,
            branch_prob: 0.5,
            use_lap: true,
            use_rad: true,
            both_branches: false,
            noise_baseline: NoiseBaseline::Off,
            use_cpg: true,
            perturb_coords: true,
            seed: 0,
            val_every: 0,
            hidden1: 32,
            hidden2: 32,
            knn_k: 8,
            lap: LapConfig::default(),
            rad: RadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn baseline() -> Self {
        Self { use_lap: false, use_rad: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::invalid("alpha and beta must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.batch_scenes == 0 {
            return Err(Error::invalid("batch_scenes must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(Error::invalid("branch_prob must lie in [0, 1]"));
        }
        if self.hidden1 == 0 || self.hidden2 == 0 || self.knn_k == 0 {
            return Err(Error::invalid("hidden sizes and knn_k must be positive"));
        }
        self.lap_config().validate()?;
        self.rad_config().validate()
    }

    /// LAP settings with the trainer-level toggles applied.
    pub fn lap_config(&self) -> LapConfig {
        LapConfig {
            use_cpg: self.use_cpg,
            perturb_coords: self.perturb_coords,
            noise: self.noise_baseline,
            ..self.lap.clone()
        }
    }

    /// RAD settings; the noise baseline deforms coordinates, so it follows the
    /// coordinate half of the noise mode.
    pub fn rad_config(&self) -> RadConfig {
        RadConfig { noise: self.noise_baseline.coords(), ..self.rad.clone() }
    }

    pub fn lap_enabled(&self) -> bool {
        self.use_lap
    }

    pub fn rad_enabled(&self) -> bool {
        self.use_rad && self.perturb_coords
    }

    pub fn backbone(&self, feat_dim: usize, num_classes: usize) -> BackboneConfig {
        BackboneConfig { feat_dim, num_classes, hidden1: self.hidden1, hidden2: self.hidden2, knn_k: self.knn_k }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    None,
    Lap,
    Rad,
    Both,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::None => "none",
            Branch::Lap => "lap",
            Branch::Rad => "rad",
            Branch::Both => "both",
        }
    }

    fn lap(self) -> bool {
        matches!(self, Branch::Lap | Branch::Both)
    }

    fn rad(self) -> bool {
        matches!(self, Branch::Rad | Branch::Both)
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Branch::None),
            "lap" => Ok(Branch::Lap),
            "rad" => Ok(Branch::Rad),
            "both" => Ok(Branch::Both),
            other => Err(Error::invalid(format!("unknown branch {other:?}"))),
        }
    }
}

/// Losses of one step, averaged over the scenes of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub branch: Branch,
    pub l_seg: f64,
    pub l_lc: f64,
    pub l_rc: f64,
    pub l_total: f64,
    pub lr: f64,
    /// One entry per scene when the LAP branch ran.
    pub lap: Vec<LapDiagnostics>,
}

/// A scene with its weak labels and the geometry cached for training.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub cloud: PointCloud,
    pub weak: WeakLabels,
    pub neighbors: GroupIndex,
    pub partition: SuperpointPartition,
}

impl TrainScene {
    pub fn new(cloud: PointCloud, weak: WeakLabels, knn_k: usize, cell_size: f64) -> Result<Self> {
        let neighbors = knn_index(cloud.coords(), knn_k)?;
        let partition = partition_superpoints(&cloud, cell_size)?;
        Ok(Self { cloud, weak, neighbors, partition })
    }
}

pub struct TrainState {
    pub params: ModelParams,
    pub tracker: ClassCovarianceTracker,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let tracker = ClassCovarianceTracker::new(params.num_classes(), params.feat_dim());
        Self { params, tracker, step: 0, rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, AUG_STREAM)) }
    }
}

/// Loss terms of one scene and the gradient of the weighted total.
#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub l_seg: f64,
    pub l_lc: f64,
    pub l_rc: f64,
    pub l_total: f64,
    pub grads: Vec<Array>,
}

/// Loss graph of one scene after the clean forward pass. The clean logits
/// are available before the perturbed branches are attached.
pub struct CleanPass {
    graph: Graph,
    params: ParamNodes,
    knn_k: usize,
    logits: NodeId,
    seg: NodeId,
    target: NodeId,
    target_log: NodeId,
}

impl CleanPass {
    /// `neighbors` must be the knn of the clean coordinates.
    pub fn new(
        cloud: &PointCloud,
        weak: &WeakLabels,
        params: &ModelParams,
        neighbors: Option<&GroupIndex>,
    ) -> Result<Self> {
        let mut graph = Graph::new();
        let pn = register_params(&mut graph, params, true);
        let c = graph.constant(cloud.coords().clone());
        let f = graph.constant(cloud.feats().clone());
        let logits = forward_nodes(&mut graph, c, f, &pn, params.knn_k(), neighbors)?;
        let seg = graph.cross_entropy_sparse(logits, weak)?;
        let detached = graph.detach(logits);
        let target_log = graph.log_softmax_rows(detached)?;
        let target = graph.softmax_rows(detached)?;
        Ok(Self { graph, params: pn, knn_k: params.knn_k(), logits, seg, target, target_log })
    }

    pub fn logits(&self) -> &Array {
        self.graph.value(self.logits)
    }

    /// Adds the consistency terms and backpropagates the weighted total.
    pub fn finish(
        mut self,
        cloud: &PointCloud,
        neighbors: Option<&GroupIndex>,
        lap: Option<&PointCloud>,
        rad: Option<&PointCloud>,
        alpha: f64,
        beta: f64,
    ) -> Result<SceneLoss> {
        let graph = &mut self.graph;
        let mut total = self.seg;
        let mut terms = [0.0; 2];
        for (slot, (input, weight)) in [(lap, alpha), (rad, beta)].into_iter().enumerate() {
            let Some(input) = input else { continue };
            let same_coords = input.coords() == cloud.coords();
            let pc = graph.constant(input.coords().clone());
            let pf = graph.constant(input.feats().clone());
            let reuse = if same_coords { neighbors } else { None };
            let plogits = forward_nodes(graph, pc, pf, &self.params, self.knn_k, reuse)?;
            let qlog = graph.log_softmax_rows(plogits)?;
            let kl = consistency_kl(graph, self.target, self.target_log, qlog)?;
            terms[slot] = graph.scalar(kl);
            let weighted = graph.scale(kl, weight);
            total = graph.add(total, weighted)?;
        }
        let grads = graph.backward(total)?;
        Ok(SceneLoss {
            l_seg: graph.scalar(self.seg),
            l_lc: terms[0],
            l_rc: terms[1],
            l_total: graph.scalar(total),
            grads: self.params.ids().iter().map(|&id| grads.get(id).clone()).collect(),
        })
    }
}

/// `L_seg + α·KL(P ‖ P(lap)) + β·KL(P ‖ P(rad))` for one scene, with the clean
/// prediction `P` detached inside the consistency terms. `neighbors` must be
/// the knn of the clean coordinates.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss(
    cloud: &PointCloud,
    weak: &WeakLabels,
    params: &ModelParams,
    neighbors: Option<&GroupIndex>,
    lap: Option<&PointCloud>,
    rad: Option<&PointCloud>,
    alpha: f64,
    beta: f64,
) -> Result<SceneLoss> {
    CleanPass::new(cloud, weak, params, neighbors)?.finish(cloud, neighbors, lap, rad, alpha, beta)
}

/// Row-mean `Σ p·(log p − log q)` from log-probabilities on both sides, so
/// identical predictions give exactly zero.
fn consistency_kl(graph: &mut Graph, p: NodeId, plog: NodeId, qlog: NodeId) -> Result<NodeId> {
    let rows = graph.value(p).rows() as f64;
    let neg = graph.scale(qlog, -1.0);
    let diff = graph.add(plog, neg)?;
    let terms = graph.mul(p, diff)?;
    let total = graph.sum(terms);
    Ok(graph.scale(total, 1.0 / rows))
}

fn draw_branch<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Branch {
    match (config.lap_enabled(), config.rad_enabled()) {
        (false, false) => Branch::None,
        (true, false) => Branch::Lap,
        (false, true) => Branch::Rad,
        (true, true) if config.both_branches => Branch::Both,
        (true, true) => {
            if rng.random::<f64>() < config.branch_prob {
                Branch::Lap
            } else {
                Branch::Rad
            }
        }
    }
}

fn non_finite(step: usize, config: &TrainConfig) -> Error {
    Error::NonFinite { step, config: format!("{config:?}") }
}

/// One SGD step on a batch of scenes.
pub fn train_step(batch: &[&TrainScene], state: &mut TrainState, config: &TrainConfig) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let branch = draw_branch(config, &mut state.rng);
    let lap_config = config.lap_config();
    let rad_config = config.rad_config();
    let scale = 1.0 / batch.len() as f64;
    let mut sum: Vec<Array> = state.params.tensors().iter().map(|t| Array::zeros(t.shape())).collect();
    let mut report = StepReport {
        step: state.step,
        branch,
        l_seg: 0.0,
        l_lc: 0.0,
        l_rc: 0.0,
        l_total: 0.0,
        lr: config.lr,
        lap: Vec::new(),
    };

    for scene in batch {
        let pass = CleanPass::new(&scene.cloud, &scene.weak, &state.params, Some(&scene.neighbors))?;
        let lap_cloud = if branch.lap() {
            let (out, diag) = generate_lap_from_logits(
                &scene.cloud,
                &state.params,
                pass.logits(),
                Some(&scene.neighbors),
                &lap_config,
                &mut state.tracker,
                &mut state.rng,
            )?;
            report.lap.push(diag);
            Some(out.cloud)
        } else {
            None
        };
        let rad_cloud = if branch.rad() {
            let out = generate_rad_from_logits(
                &scene.cloud,
                &scene.partition,
                &state.params,
                pass.logits(),
                &rad_config,
                &mut state.rng,
            )?;
            Some(out.cloud)
        } else {
            None
        };
        let loss = pass.finish(
            &scene.cloud,
            Some(&scene.neighbors),
            lap_cloud.as_ref(),
            rad_cloud.as_ref(),
            config.alpha,
            config.beta,
        )?;
        if !loss.l_total.is_finite() {
            return Err(non_finite(state.step, config));
        }
        report.l_seg += scale * loss.l_seg;
        report.l_lc += scale * loss.l_lc;
        report.l_rc += scale * loss.l_rc;
        report.l_total += scale * loss.l_total;
        for (acc, g) in sum.iter_mut().zip(&loss.grads) {
            acc.values_mut().iter_mut().zip(g.values()).for_each(|(a, b)| *a += scale * b);
        }
    }

    state.params.sgd_step(&sum, config.lr);
    if !state.params.is_finite() {
        return Err(non_finite(state.step, config));
    }
    state.step += 1;
    Ok(report)
}

/// Checks that all scenes agree on class count and feature width and
/// returns them.
pub fn dataset_dims(scenes: &[LabeledScene]) -> Result<(usize, usize)> {
    let first = scenes.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
    let dims = (first.cloud.feat_dim(), first.num_classes);
    for (i, s) in scenes.iter().enumerate() {
        if (s.cloud.feat_dim(), s.num_classes) != dims {
            return Err(Error::invalid(format!(
                "scene {i} has feat_dim {} and {} classes, expected {} and {}",
                s.cloud.feat_dim(),
                s.num_classes,
                dims.0,
                dims.1
            )));
        }
    }
    Ok(dims)
}

/// Initial weights for a run; independent of every other setting but the
/// seed and the network shape.
pub fn initial_params(config: &TrainConfig, feat_dim: usize, num_classes: usize) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM));
    ModelParams::init(&config.backbone(feat_dim, num_classes), &mut rng)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepReport>,
    /// `(step, metrics)` after every validation period.
    pub validations: Vec<(usize, Metrics)>,
}

pub fn train(
    scenes: &[LabeledScene],
    weak: &[WeakLabels],
    config: &TrainConfig,
    validation: Option<&[LabeledScene]>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (feat_dim, num_classes) = dataset_dims(scenes)?;
    if weak.len() != scenes.len() {
        return Err(Error::invalid(format!("{} weak label sets for {} scenes", weak.len(), scenes.len())));
    }
    if let Some(v) = validation {
        if dataset_dims(v)? != (feat_dim, num_classes) {
            return Err(Error::invalid("validation scenes do not match the training dimensions"));
        }
    }
    let prepared: Vec<TrainScene> = scenes
        .iter()
        .zip(weak)
        .map(|(s, w)| {
            w.check_against(s)?;
            TrainScene::new(s.cloud.clone(), w.clone(), config.knn_k, config.rad.cell_size)
        })
        .collect::<Result<_>>()?;

    let mut state = TrainState::new(initial_params(config, feat_dim, num_classes)?, config.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, ORDER_STREAM));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(config.steps);
    let mut validations = Vec::new();

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_scenes);
        for _ in 0..config.batch_scenes.min(prepared.len()) {
            if cursor == order.len() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&prepared[order[cursor]]);
            cursor += 1;
        }
        log.push(train_step(&batch, &mut state, config)?);
        if let Some(v) = validation {
            if config.val_every > 0 && (step + 1) % config.val_every == 0 {
                validations.push((step + 1, evaluate(v, &state.params)?));
            }
        }
    }
    Ok(TrainOutcome { params: state.params, log, validations })
}

/// Hard predictions against dense labels, accumulated over all scenes.
pub fn evaluate(scenes: &[LabeledScene], params: &ModelParams) -> Result<Metrics> {
    let (feat_dim, num_classes) = dataset_dims(scenes)?;
    if feat_dim != params.feat_dim() || num_classes != params.num_classes() {
        return Err(Error::invalid(format!(
            "checkpoint expects feat_dim {} and {} classes, data has {feat_dim} and {num_classes}",
            params.feat_dim(),
            params.num_classes()
        )));
    }
    let parts: Vec<Metrics> = scenes
        .par_iter()
        .map(|s| {
            let predicted = predict_labels(&infer_logits(&s.cloud, params, None)?);
            let mut m = Metrics::new(num_classes);
            m.accumulate(&predicted, &s.gt_classes)?;
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mut total = Metrics::new(num_classes);
    parts.iter().for_each(|m| total.merge(m));
    Ok(total)
}
