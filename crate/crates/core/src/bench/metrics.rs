//! Confusion matrix and mean intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[gt][pred]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} labels vs {} predictions", gt.len(), pred.len()),
            ));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            for l in [g, p] {
                if l >= self.classes {
                    return Err(Error::Label {
                        label: l,
                        classes: self.classes,
                    });
                }
            }
            self.counts[g][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion merge", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Per-class IoU; `None` where the class is absent from both the
    /// ground truth and the predictions.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let gt: u64 = self.counts[c].iter().sum();
                let pred: u64 = self.counts.iter().map(|r| r[c]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::UndefinedMetric("miou of an empty confusion matrix"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("accuracy of an empty confusion matrix"));
        }
        let diag: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        Ok(diag as f64 / total as f64)
    }
}
