//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i * k + j]` is the number of pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixel_acc: f64,
    pub cls_acc: f64,
    pub mean_iou: f64,
    pub fw_iou: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("confusion matrix needs at least one class".into()));
        }
        Ok(Self {
            k,
            counts: vec![0; k * k],
        })
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        let mut cm = Self::new(k)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Shape(format!("row {i} has {} entries, want {k}", row.len())));
            }
            cm.counts[i * k..(i + 1) * k].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per non-ignored position. Validates everything before
    /// touching the counts, so a failed call leaves the matrix unchanged.
    pub fn accumulate(&mut self, pred: &[u8], label: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, labels {}",
                pred.len(),
                label.len()
            )));
        }
        for (&p, &l) in pred.iter().zip(label) {
            if l == ignore {
                continue;
            }
            if p as usize >= self.k || l as usize >= self.k {
                return Err(Error::Argument(format!(
                    "class id out of range (pred {p}, label {l}, k {})",
                    self.k
                )));
            }
        }
        for (&p, &l) in pred.iter().zip(label) {
            if l != ignore {
                self.counts[l as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("cannot merge {}-class into {}-class matrix", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes that are neither present nor predicted.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|i| {
                let t = self.row_sum(i);
                let p = self.col_sum(i);
                let n = self.get(i, i);
                let union = t + p - n;
                (union > 0).then(|| n as f64 / union as f64)
            })
            .collect()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.k..(i + 1) * self.k].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    /// Class accuracy averages over classes present in the ground truth; IoU
    /// averages over classes present or predicted.
    pub fn compute(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Evaluation("confusion matrix is empty".into()));
        }
        let total = total as f64;
        let diag: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        let ious = self.class_iou();
        let mut acc_sum = 0.0;
        let mut acc_n = 0usize;
        let mut iou_sum = 0.0;
        let mut iou_n = 0usize;
        let mut fw = 0.0;
        for (i, iou) in ious.iter().enumerate() {
            let t = self.row_sum(i);
            if t > 0 {
                acc_sum += self.get(i, i) as f64 / t as f64;
                acc_n += 1;
            }
            if let Some(iou) = iou {
                iou_sum += iou;
                iou_n += 1;
                fw += t as f64 * iou;
            }
        }
        Ok(Metrics {
            pixel_acc: diag as f64 / total,
            cls_acc: acc_sum / acc_n as f64,
            mean_iou: iou_sum / iou_n as f64,
            fw_iou: fw / total,
        })
    }
}
