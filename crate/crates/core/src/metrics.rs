//! Confusion matrix and overall accuracy, average accuracy and Cohen's kappa.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::raster::LabelMask;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction is {pred_w}x{pred_h}, truth is {truth_w}x{truth_h}")]
    ExtentMismatch {
        pred_w: usize,
        pred_h: usize,
        truth_w: usize,
        truth_h: usize,
    },
    #[error("prediction contains unknown (0) labels")]
    PredictionContainsUnknown,
    #[error("confusion matrix is empty (no labeled truth pixels)")]
    EmptyMatrix,
    #[error("confusion matrix shape: {0}")]
    InvalidShape(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Rows are ground truth, columns are predictions, both 1-based categories
/// stored at index `category - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(MetricsError::InvalidShape("rows must be square".into()));
        }
        Ok(ConfusionMatrix {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Count for truth `t` and prediction `p`, both 0-based.
    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.num_classes + p]
    }

    pub fn add(&mut self, truth: u8, pred: u8) {
        self.counts[(truth as usize - 1) * self.num_classes + pred as usize - 1] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(t, p)).sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, p)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    fn non_empty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(MetricsError::EmptyMatrix),
            n => Ok(n as f64),
        }
    }

    fn merge(mut self, other: &ConfusionMatrix) -> Self {
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        self
    }
}

/// Tallies every pixel whose truth is labeled. Rows of the image are split
/// into strips and the partial matrices summed.
pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<ConfusionMatrix> {
    confusion_with(pred, truth, Execution::default())
}

pub fn confusion_with(
    pred: &LabelMask,
    truth: &LabelMask,
    exec: Execution,
) -> Result<ConfusionMatrix> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(MetricsError::ExtentMismatch {
            pred_w: pred.width(),
            pred_h: pred.height(),
            truth_w: truth.width(),
            truth_h: truth.height(),
        });
    }
    if pred.labels().contains(&0) {
        return Err(MetricsError::PredictionContainsUnknown);
    }
    let c = pred.num_classes().max(truth.num_classes()) as usize;
    let n = pred.labels().len();
    let strip = 1 << 16;
    let parts = exec.map(n.div_ceil(strip), |k| {
        let mut cm = ConfusionMatrix::new(c);
        let range = k * strip..((k + 1) * strip).min(n);
        for (&p, &t) in pred.labels()[range.clone()]
            .iter()
            .zip(&truth.labels()[range])
        {
            if t != 0 {
                cm.add(t, p);
            }
        }
        cm
    });
    Ok(parts
        .iter()
        .fold(ConfusionMatrix::new(c), |acc, p| acc.merge(p)))
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.non_empty()?;
    Ok(cm.trace() as f64 / n)
}

/// Producer's accuracy (recall) of each class; `None` for classes absent
/// from the truth.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.num_classes)
        .map(|t| match cm.row_sum(t) {
            0 => None,
            r => Some(cm.get(t, t) as f64 / r as f64),
        })
        .collect()
}

/// Mean recall over classes present in the truth.
pub fn average_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.non_empty()?;
    let present: Vec<f64> = per_class_recall(cm).into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.non_empty()?;
    let po = cm.trace() as f64 / n;
    let pe = (0..cm.num_classes)
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (n * n);
    if pe == 1.0 {
        return Ok(if po == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

/// JSON report emitted by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(MetricsReport {
            oa: overall_accuracy(cm)?,
            aa: average_accuracy(cm)?,
            kappa: kappa(cm)?,
            per_class_recall: per_class_recall(cm),
            confusion: cm.rows(),
        })
    }
}

pub fn evaluate(pred: &LabelMask, truth: &LabelMask) -> Result<MetricsReport> {
    MetricsReport::from_confusion(&confusion(pred, truth)?)
}
