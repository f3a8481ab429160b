//! Segmentation scoring: per-class IoU and mean IoU via a confusion matrix.

use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::{LabelMap, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: usize, classes: usize },
    #[error("prediction shape {pred:?} does not match truth shape {truth:?}")]
    ShapeMismatch { pred: Vec<usize>, truth: Vec<usize> },
    #[error("no class is present; mean IoU is undefined")]
    NoPresentClasses,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which model output a report scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Top,
    Bottom,
    Ensemble,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Top => "top",
            Head::Bottom => "bottom",
            Head::Ensemble => "ensemble",
        }
    }

    pub fn parse(s: &str) -> Option<Head> {
        match s {
            "top" => Some(Head::Top),
            "bottom" => Some(Head::Bottom),
            "ensemble" => Some(Head::Ensemble),
            _ => None,
        }
    }
}

/// K x K pixel counts; entry `(i, j)` counts pixels of true class `i`
/// predicted as class `j`. Accumulation is integer addition, so batch
/// order never changes the result and per-thread matrices merge exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.count(i, i)).sum()
    }

    /// Adds per-pixel counts from one prediction/truth pair.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<(), MetricError> {
        if pred.shape() != truth.shape() {
            return Err(MetricError::ShapeMismatch {
                pred: pred.shape().to_vec(),
                truth: truth.shape().to_vec(),
            });
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            let (p, t) = (usize::from(p), usize::from(t));
            if p >= self.k || t >= self.k {
                return Err(MetricError::ClassOutOfRange {
                    id: p.max(t),
                    classes: self.k,
                });
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Elementwise merge of another matrix (associative and commutative).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `IoU_k = TP / (TP + FP + FN)`; a class absent from both prediction
    /// and truth has an undefined IoU and yields `None`.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.count(c, c);
                let row: u64 = (0..self.k).map(|j| self.count(c, j)).sum();
                let col: u64 = (0..self.k).map(|i| self.count(i, c)).sum();
                let denom = row + col - tp;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }
}

/// Arithmetic mean over present classes only.
pub fn mean_iou(ious: &[Option<f64>]) -> Result<f64, MetricError> {
    let present: Vec<f64> = ious.iter().filter_map(|v| *v).collect();
    if present.is_empty() {
        return Err(MetricError::NoPresentClasses);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-pixel argmax over the class axis of `[n, k, h, w]` scores. Ties go
/// to the lowest class id.
pub fn argmax_classes(scores: &Tensor) -> Result<LabelMap, MetricError> {
    let (n, k, h, w) = scores.dims4()?;
    let hw = h * w;
    let plane = k * hw;
    let mut out = vec![0u8; n * hw];
    let data = scores.data();
    for ni in 0..n {
        for p in 0..hw {
            let base = ni * plane + p;
            let mut best = data[base];
            let mut best_k = 0usize;
            for ki in 1..k {
                let v = data[base + ki * hw];
                if v > best {
                    best = v;
                    best_k = ki;
                }
            }
            out[ni * hw + p] = best_k as u8;
        }
    }
    Ok(LabelMap::new(vec![n, h, w], out)?)
}

/// One evaluation row: per-class IoU (absent classes omitted), their mean,
/// and the tags identifying what was scored.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub head: Head,
    pub epoch: usize,
    pub split: String,
    pub ious: Vec<Option<f64>>,
    pub miou: f64,
}

impl EvalReport {
    pub fn csv_header(k: usize) -> String {
        let mut s = String::from("method,seed,head,epoch,split");
        for i in 0..k {
            let _ = write!(s, ",iou_{i}");
        }
        s.push_str(",miou");
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{}",
            self.method,
            self.seed,
            self.head.as_str(),
            self.epoch,
            self.split
        );
        for iou in &self.ious {
            match iou {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push(','),
            }
        }
        let _ = write!(s, ",{:.6}", self.miou);
        s
    }
}

/// Expected mIoU of an independent uniform predictor on balanced K-class
/// data: each class's IoU tends to 1/(2K - 1).
pub fn chance_miou(k: usize) -> f64 {
    1.0 / (2.0 * k as f64 - 1.0)
}

/// Plausible mIoU range for chance-level predictors on balanced data.
/// Untrained networks sit somewhere between a constant predictor (mIoU
/// 1/K^2) and an independent uniform one (1/(2K - 1)); anything trained
/// clears the upper edge by a wide margin.
pub fn chance_band(k: usize) -> (f64, f64) {
    let kf = k as f64;
    ((1.0 / (kf * kf) - 0.03).max(0.0), chance_miou(k) + 0.05)
}
