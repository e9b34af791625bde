//! Per-class intersection-over-union accumulated across scenes.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Ground-truth point count per class.
    pub support: Vec<u64>,
}

impl Metrics {
    pub fn new(num_classes: usize) -> Self {
        Self { intersection: vec![0; num_classes], union: vec![0; num_classes], support: vec![0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn accumulate(&mut self, predicted: &[usize], truth: &[usize]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} ground-truth labels",
                predicted.len(),
                truth.len()
            )));
        }
        let k = self.num_classes();
        let mut pred_count = vec![0u64; k];
        let mut gt_count = vec![0u64; k];
        let mut inter = vec![0u64; k];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= k || t >= k {
                return Err(Error::invalid(format!("class out of range: predicted {p}, truth {t}, classes {k}")));
            }
            pred_count[p] += 1;
            gt_count[t] += 1;
            if p == t {
                inter[t] += 1;
            }
        }
        for c in 0..k {
            self.intersection[c] += inter[c];
            self.union[c] += pred_count[c] + gt_count[c] - inter[c];
            self.support[c] += gt_count[c];
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Metrics) {
        for c in 0..self.num_classes() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
            self.support[c] += other.support[c];
        }
    }

    /// `None` when the union is empty.
    pub fn iou(&self, class: usize) -> Option<f64> {
        (self.union[class] > 0).then(|| self.intersection[class] as f64 / self.union[class] as f64)
    }

    /// Fraction of the class's ground-truth points predicted correctly.
    pub fn accuracy(&self, class: usize) -> Option<f64> {
        (self.support[class] > 0).then(|| self.intersection[class] as f64 / self.support[class] as f64)
    }

    /// Mean IoU over the classes present in the ground truth.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> =
            (0..self.num_classes()).filter(|&c| self.support[c] > 0).filter_map(|c| self.iou(c)).collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}
