//! Independent reference implementations.

use std::collections::BTreeSet;

use datseg::io::{read_checkpoint, read_scene, read_weak, write_checkpoint, write_scene, write_weak};
use datseg::{Array, ClassCovarianceTracker, LabeledScene, ModelParams, Result, WeakLabels};

/// Mean over classes present in `truth` of `|P_c ∩ G_c| / |P_c ∪ G_c|`,
/// computed on explicit index sets.
pub fn set_miou(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let set =
        |labels: &[usize], c: usize| -> BTreeSet<usize> { (0..labels.len()).filter(|&i| labels[i] == c).collect() };
    let mut ious = Vec::new();
    for c in 0..classes {
        let (p, g) = (set(pred, c), set(truth, c));
        if g.is_empty() {
            continue;
        }
        ious.push(p.intersection(&g).count() as f64 / p.union(&g).count() as f64);
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Unbiased covariance of the chosen rows, two passes, no streaming.
pub fn direct_covariance(feats: &Array, rows: &[usize]) -> Vec<f64> {
    let d = feats.cols();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|a| rows.iter().map(|&i| feats.get(i, a)).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let s: f64 = rows.iter().map(|&i| (feats.get(i, a) - mean[a]) * (feats.get(i, b) - mean[b])).sum();
            cov[a * d + b] = s / (n - 1.0);
        }
    }
    cov
}

/// Feeds `feats` to a tracker in the batches delimited by `cuts` and returns
/// the largest deviation from the direct covariance. Also requires symmetry
/// and a successful factorization for every class.
pub fn covariance_split_error(feats: &Array, labels: &[usize], classes: usize, cuts: &[usize]) -> Result<f64> {
    let d = feats.cols();
    let mut tracker = ClassCovarianceTracker::new(classes, d);
    let mut bounds = vec![0];
    bounds.extend(cuts.iter().copied().filter(|&c| c > 0 && c < labels.len()));
    bounds.push(labels.len());
    bounds.sort_unstable();
    for w in bounds.windows(2) {
        if w[0] == w[1] {
            continue;
        }
        let rows: Vec<&[f64]> = (w[0]..w[1]).map(|i| feats.row(i)).collect();
        tracker.update(&Array::from_rows(&rows)?, &labels[w[0]..w[1]])?;
    }
    let mut worst: f64 = 0.0;
    for c in 0..classes {
        let cov = tracker.covariance(c);
        for a in 0..d {
            for b in 0..d {
                if cov[a * d + b] != cov[b * d + a] {
                    return Ok(f64::INFINITY);
                }
            }
        }
        tracker.factor(c)?;
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.len() < 2 {
            continue;
        }
        let direct = direct_covariance(feats, &rows);
        worst = cov.iter().zip(&direct).fold(worst, |m, (x, y)| m.max((x - y).abs()));
    }
    Ok(worst)
}

fn bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

/// write → read → write; true when both writes agree byte for byte.
pub fn scene_round_trip(scene: &LabeledScene) -> Result<bool> {
    let first = bytes(|w| write_scene(scene, w))?;
    let back = read_scene(first.as_slice())?;
    Ok(bytes(|w| write_scene(&back, w))? == first && &back == scene)
}

pub fn weak_round_trip(labels: &WeakLabels) -> Result<bool> {
    let first = bytes(|w| write_weak(labels, w))?;
    let back = read_weak(first.as_slice())?;
    Ok(bytes(|w| write_weak(&back, w))? == first && &back == labels)
}

pub fn checkpoint_round_trip(params: &ModelParams) -> Result<bool> {
    let first = bytes(|w| write_checkpoint(params, w))?;
    let back = read_checkpoint(&mut first.as_slice())?;
    Ok(bytes(|w| write_checkpoint(&back, w))? == first && &back == params)
}
