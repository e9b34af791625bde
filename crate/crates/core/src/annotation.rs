//! Sparse weak-label sampling: one click per object, three clicks per
//! object, or a fixed number of points per scene.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scene::LabeledScene;

/// Labeled `(point index, class)` pairs. Indices are unique.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WeakLabels {
    entries: Vec<(usize, usize)>,
}

impl WeakLabels {
    pub fn new(entries: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for &(i, _) in &entries {
            if !seen.insert(i) {
                return Err(Error::invalid(format!("point {i} labeled twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks indices are in range and classes agree with the ground truth.
    pub fn check_against(&self, scene: &LabeledScene) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::NoSupervision);
        }
        for &(i, c) in &self.entries {
            if i >= scene.len() {
                return Err(Error::invalid(format!("labeled index {i} >= {}", scene.len())));
            }
            if scene.gt_classes[i] != c {
                return Err(Error::invalid(format!(
                    "label for point {i} says {c}, ground truth is {}",
                    scene.gt_classes[i]
                )));
            }
        }
        Ok(())
    }

    fn from_indices(scene: &LabeledScene, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        Self { entries: indices.into_iter().map(|i| (i, scene.gt_classes[i])).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationScheme {
    /// One point per object instance.
    Otoc,
    /// Up to three points per object instance.
    Ottc,
    /// A fixed number of points per scene (20 by default).
    FixedPoints(usize),
}

impl AnnotationScheme {
    pub fn sample<R: Rng + ?Sized>(&self, scene: &LabeledScene, rng: &mut R) -> Result<WeakLabels> {
        match *self {
            AnnotationScheme::Otoc => Ok(sample_otoc(scene, rng)),
            AnnotationScheme::Ottc => Ok(sample_ottc(scene, rng)),
            AnnotationScheme::FixedPoints(k) => sample_fixed_k(scene, rng, k),
        }
    }
}

impl fmt::Display for AnnotationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotationScheme::Otoc => write!(f, "otoc"),
            AnnotationScheme::Ottc => write!(f, "ottc"),
            AnnotationScheme::FixedPoints(k) => write!(f, "points{k}"),
        }
    }
}

impl FromStr for AnnotationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "otoc" => Ok(AnnotationScheme::Otoc),
            "ottc" => Ok(AnnotationScheme::Ottc),
            other => other
                .strip_prefix("points")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k > 0)
                .map(AnnotationScheme::FixedPoints)
                .ok_or_else(|| Error::invalid(format!("unknown label scheme '{other}' (otoc|ottc|points<K>)"))),
        }
    }
}

pub fn sample_otoc<R: Rng + ?Sized>(scene: &LabeledScene, rng: &mut R) -> WeakLabels {
    let picks = scene.instances().iter().map(|members| members[rng.random_range(0..members.len())]).collect();
    WeakLabels::from_indices(scene, picks)
}

pub fn sample_ottc<R: Rng + ?Sized>(scene: &LabeledScene, rng: &mut R) -> WeakLabels {
    let mut picks = Vec::new();
    for members in scene.instances() {
        let take = members.len().min(3);
        picks.extend(sample(rng, members.len(), take).into_iter().map(|j| members[j]));
    }
    WeakLabels::from_indices(scene, picks)
}

pub fn sample_fixed_k<R: Rng + ?Sized>(scene: &LabeledScene, rng: &mut R, k: usize) -> Result<WeakLabels> {
    let n = scene.len();
    if k > n {
        return Err(Error::invalid(format!("cannot label {k} points in a scene of {n}")));
    }
    Ok(WeakLabels::from_indices(scene, sample(rng, n, k).into_vec()))
}
