//! Confusion matrices, per-class IoU, mIoU and the seen/unseen harmonic
//! mean.

use serde::{Deserialize, Serialize};

use crate::error::{PcaError, Result};
use diffcore::IGNORE_LABEL;

/// `N×N` counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not the ignore label.
    /// Any other out-of-range label in either map is an error and leaves the
    /// matrix untouched.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(diffcore::DiffError::ShapeMismatch {
                op: "accumulate_confusion",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            }
            .into());
        }
        for (&p, &g) in pred.iter().zip(gt) {
            for l in [p, g] {
                if l != IGNORE_LABEL && l as usize >= self.n {
                    return Err(PcaError::LabelOutOfRange { label: l, classes: self.n });
                }
            }
            if g != IGNORE_LABEL && p == IGNORE_LABEL {
                return Err(PcaError::LabelOutOfRange { label: p, classes: self.n });
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE_LABEL {
                self.counts[g as usize * self.n + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum, the deterministic merge for sharded accumulation.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n, "class counts differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `tp / (tp + fp + fn)` per class; `None` when the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.n).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.n).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean of the defined entries of `ious` restricted to `mask`; with
/// `undefined_as_zero` undefined classes count as 0 instead of being
/// skipped.
pub fn masked_mean(ious: &[Option<f64>], mask: &[bool], undefined_as_zero: bool) -> Option<f64> {
    let vals: Vec<f64> = ious
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .filter_map(|(v, _)| if undefined_as_zero { Some(v.unwrap_or(0.0)) } else { *v })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn compute_miou(cm: &ConfusionMatrix, undefined_as_zero: bool) -> Result<MiouReport> {
    let per_class = cm.per_class_iou();
    if per_class.iter().all(Option::is_none) {
        return Err(PcaError::UndefinedMiou);
    }
    let miou = masked_mean(&per_class, &vec![true; cm.classes()], undefined_as_zero).ok_or(PcaError::UndefinedMiou)?;
    Ok(MiouReport { per_class, miou })
}

/// Harmonic mean `2su/(s+u)`; 0 with a warning when both are 0.
pub fn compute_hiou(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        log::warn!("h-IoU of two zero scores defined as 0");
        return 0.0;
    }
    2.0 * seen * unseen / (seen + unseen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    pub hiou: Option<f64>,
    pub samples: u64,
}

/// Full report for one prediction map. Seen/unseen scores and h-IoU are
/// present only when both class groups are non-empty and defined.
pub fn evaluate_predictions(pred: &[u8], gt: &[u8], seen: &[bool], undefined_as_zero: bool) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(seen.len());
    cm.accumulate(pred, gt)?;
    let MiouReport { per_class, miou } = compute_miou(&cm, undefined_as_zero)?;
    let unseen: Vec<bool> = seen.iter().map(|s| !s).collect();
    let split = seen.iter().any(|&s| s) && unseen.iter().any(|&u| u);
    let (seen_miou, unseen_miou) = if split {
        (
            masked_mean(&per_class, seen, undefined_as_zero),
            masked_mean(&per_class, &unseen, undefined_as_zero),
        )
    } else {
        (None, None)
    };
    let hiou = match (seen_miou, unseen_miou) {
        (Some(s), Some(u)) => Some(compute_hiou(s, u)),
        _ => None,
    };
    Ok(EvalReport {
        per_class,
        miou,
        seen_miou,
        unseen_miou,
        hiou,
        samples: cm.total(),
    })
}
