//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::parse_error;
use crate::annotation::AnnotationScheme;
use crate::error::{Error, Result};
use crate::lap::NoiseBaseline;
use crate::rad::TransformSet;
use crate::scenegen::SceneSpec;
use crate::trainer::TrainConfig;

/// Every accepted key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("alpha", "weight of the local consistency loss"),
    ("beta", "weight of the regional consistency loss"),
    ("lr", "SGD learning rate"),
    ("batch_scenes", "scenes per step"),
    ("steps", "number of SGD steps"),
    ("branch_prob", "probability of the LAP branch when both are enabled"),
    ("use_lap", "enable local adaptive perturbation"),
    ("use_rad", "enable regional adaptive deformation"),
    ("both_branches", "apply both consistency terms every step"),
    ("noise_baseline", "off|coords|feats|both: random equal-norm noise instead of adaptive directions"),
    ("use_cpg", "class-aware initial feature directions"),
    ("perturb_coords", "perturb coordinates (off also disables RAD)"),
    ("seed", "master seed"),
    ("val_every", "validation period in steps, 0 disables"),
    ("hidden1", "encoder width"),
    ("hidden2", "head width"),
    ("knn_k", "neighbors in the max-pool context"),
    ("xi_c", "LAP coordinate probe radius"),
    ("xi_f", "LAP feature probe radius"),
    ("eps_c", "LAP coordinate perturbation norm"),
    ("eps_f", "LAP feature perturbation norm"),
    ("lap_ip", "LAP gradient refinement rounds"),
    ("xi_a", "RAD probe magnitude"),
    ("eps_a", "RAD deformation norm per region and transform"),
    ("transforms", "RAD transforms joined by '+': translation, scale, rotation"),
    ("cell_size", "superpoint voxel size in meters"),
    ("rad_ip", "RAD gradient refinement rounds"),
    ("labels", "weak label scheme: otoc|ottc|points<K>"),
    ("n_points", "points per generated scene"),
    ("k_classes", "classes per generated scene (2..=6)"),
    ("room_x", "room extent along x in meters"),
    ("room_y", "room extent along y in meters"),
    ("room_z", "room height in meters"),
    ("boxes", "box instances per scene as min..max"),
    ("spheres", "sphere instances per scene as min..max"),
    ("cylinders", "cylinder instances per scene as min..max"),
    ("clutter", "clutter instances per scene as min..max"),
    ("noise_sigma", "surface jitter in meters"),
    ("data", "training data directory (empty: from the command line)"),
    ("val_data", "validation data directory (empty: none)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub labels: AnnotationScheme,
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            labels: AnnotationScheme::Otoc,
            data: None,
            val_data: None,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::invalid(format!("invalid value '{raw}' for '{key}'")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("invalid boolean '{raw}' for '{key}'"))),
    }
}

fn range(key: &str, raw: &str) -> Result<(usize, usize)> {
    let (lo, hi) = raw.split_once("..").unwrap_or((raw, raw));
    let (lo, hi): (usize, usize) = (value(key, lo.trim())?, value(key, hi.trim())?);
    if lo > hi {
        return Err(Error::invalid(format!("range '{raw}' for '{key}' has min > max")));
    }
    Ok((lo, hi))
}

fn path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        let t = &mut self.train;
        let s = &mut self.scene;
        match key {
            "alpha" => t.alpha = value(key, raw)?,
            "beta" => t.beta = value(key, raw)?,
            "lr" => t.lr = value(key, raw)?,
            "batch_scenes" => t.batch_scenes = value(key, raw)?,
            "steps" => t.steps = value(key, raw)?,
            "branch_prob" => t.branch_prob = value(key, raw)?,
            "use_lap" => t.use_lap = flag(key, raw)?,
            "use_rad" => t.use_rad = flag(key, raw)?,
            "both_branches" => t.both_branches = flag(key, raw)?,
            "noise_baseline" => t.noise_baseline = raw.parse::<NoiseBaseline>()?,
            "use_cpg" => t.use_cpg = flag(key, raw)?,
            "perturb_coords" => t.perturb_coords = flag(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "val_every" => t.val_every = value(key, raw)?,
            "hidden1" => t.hidden1 = value(key, raw)?,
            "hidden2" => t.hidden2 = value(key, raw)?,
            "knn_k" => t.knn_k = value(key, raw)?,
            "xi_c" => t.lap.xi_c = value(key, raw)?,
            "xi_f" => t.lap.xi_f = value(key, raw)?,
            "eps_c" => t.lap.eps_c = value(key, raw)?,
            "eps_f" => t.lap.eps_f = value(key, raw)?,
            "lap_ip" => t.lap.ip = value(key, raw)?,
            "xi_a" => t.rad.xi_a = value(key, raw)?,
            "eps_a" => t.rad.eps_a = value(key, raw)?,
            "transforms" => t.rad.transforms = raw.parse::<TransformSet>()?,
            "cell_size" => t.rad.cell_size = value(key, raw)?,
            "rad_ip" => t.rad.ip = value(key, raw)?,
            "labels" => self.labels = raw.parse()?,
            "n_points" => s.n_points = value(key, raw)?,
            "k_classes" => s.k_classes = value(key, raw)?,
            "room_x" => s.room[0] = value(key, raw)?,
            "room_y" => s.room[1] = value(key, raw)?,
            "room_z" => s.room[2] = value(key, raw)?,
            "boxes" => s.object_counts[0] = range(key, raw)?,
            "spheres" => s.object_counts[1] = range(key, raw)?,
            "cylinders" => s.object_counts[2] = range(key, raw)?,
            "clutter" => s.object_counts[3] = range(key, raw)?,
            "noise_sigma" => s.noise_sigma = value(key, raw)?,
            "data" => self.data = path(raw),
            "val_data" => self.val_data = path(raw),
            _ => return Err(Error::invalid(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        let s = &self.scene;
        let range = |(lo, hi): (usize, usize)| format!("{lo}..{hi}");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Ok(match key {
            "alpha" => t.alpha.to_string(),
            "beta" => t.beta.to_string(),
            "lr" => t.lr.to_string(),
            "batch_scenes" => t.batch_scenes.to_string(),
            "steps" => t.steps.to_string(),
            "branch_prob" => t.branch_prob.to_string(),
            "use_lap" => t.use_lap.to_string(),
            "use_rad" => t.use_rad.to_string(),
            "both_branches" => t.both_branches.to_string(),
            "noise_baseline" => t.noise_baseline.as_str().to_string(),
            "use_cpg" => t.use_cpg.to_string(),
            "perturb_coords" => t.perturb_coords.to_string(),
            "seed" => t.seed.to_string(),
            "val_every" => t.val_every.to_string(),
            "hidden1" => t.hidden1.to_string(),
            "hidden2" => t.hidden2.to_string(),
            "knn_k" => t.knn_k.to_string(),
            "xi_c" => t.lap.xi_c.to_string(),
            "xi_f" => t.lap.xi_f.to_string(),
            "eps_c" => t.lap.eps_c.to_string(),
            "eps_f" => t.lap.eps_f.to_string(),
            "lap_ip" => t.lap.ip.to_string(),
            "xi_a" => t.rad.xi_a.to_string(),
            "eps_a" => t.rad.eps_a.to_string(),
            "transforms" => t.rad.transforms.to_string(),
            "cell_size" => t.rad.cell_size.to_string(),
            "rad_ip" => t.rad.ip.to_string(),
            "labels" => self.labels.to_string(),
            "n_points" => s.n_points.to_string(),
            "k_classes" => s.k_classes.to_string(),
            "room_x" => s.room[0].to_string(),
            "room_y" => s.room[1].to_string(),
            "room_z" => s.room[2].to_string(),
            "boxes" => range(s.object_counts[0]),
            "spheres" => range(s.object_counts[1]),
            "cylinders" => range(s.object_counts[2]),
            "clutter" => range(s.object_counts[3]),
            "noise_sigma" => s.noise_sigma.to_string(),
            "data" => path(&self.data),
            "val_data" => path(&self.val_data),
            _ => return Err(Error::invalid(format!("unknown key '{key}'"))),
        })
    }

    /// Parses a config document; errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| parse_error(n + 1, "expected 'key = value'"))?;
            config.set(key.trim(), raw).map_err(|e| parse_error(n + 1, e.to_string()))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()
    }

    /// Full document with every key and its description.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in CONFIG_KEYS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed keys are known"));
        }
        out
    }
}
