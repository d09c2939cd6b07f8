use serde::{Deserialize, Serialize};

use crate::datasets::Mask;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts over raw 0/1 buffers; any other byte is a contract violation.
pub fn confusion_raw(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    const OP: &str = "confusion";
    ensure!(
        pred.len() == gt.len(),
        OP,
        "prediction has {} pixels, ground truth {}",
        pred.len(),
        gt.len()
    );
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => {
                return Err(crate::Error::contract(
                    OP,
                    format!("non-binary pixel pair ({p}, {g})"),
                ))
            }
        }
    }
    Ok(c)
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    ensure!(
        pred.height() == gt.height() && pred.width() == gt.width(),
        "confusion",
        "prediction {}x{} vs ground truth {}x{}",
        pred.height(),
        pred.width(),
        gt.height(),
        gt.width()
    );
    confusion_raw(pred.data(), gt.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Undefined unless the ground truth holds both classes.
    pub balanced_accuracy: Option<f64>,
    pub iou: f64,
    pub f1: f64,
}

pub fn metrics(c: &ConfusionCounts) -> Scores {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let balanced_accuracy =
        (c.tp + c.fn_ > 0 && c.tn + c.fp > 0).then(|| (tp / (tp + fn_) + tn / (tn + fp)) / 2.0);
    let iou = if c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        tp / (tp + fp + fn_)
    };
    let f1 = if 2 * c.tp + c.fp + c.fn_ == 0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    Scores {
        balanced_accuracy,
        iou,
        f1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub sample_id: u64,
    pub balanced_accuracy: Option<f64>,
    pub iou: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl MetricsRecord {
    pub fn new(sample_id: u64, counts: ConfusionCounts) -> Self {
        let s = metrics(&counts);
        Self {
            sample_id,
            balanced_accuracy: s.balanced_accuracy,
            iou: s.iou,
            f1: s.f1,
            counts,
        }
    }
}

/// `sample_id,tp,fp,tn,fn,balanced_accuracy,iou,f1`; undefined balanced
/// accuracy is left empty.
pub fn records_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("sample_id,tp,fp,tn,fn,balanced_accuracy,iou,f1\n");
    for r in records {
        let ba = r
            .balanced_accuracy
            .map(|v| v.to_string())
            .unwrap_or_default();
        let c = &r.counts;
        out.push_str(&format!(
            "{},{},{},{},{},{ba},{},{}\n",
            r.sample_id, c.tp, c.fp, c.tn, c.fn_, r.iou, r.f1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_counts() {
        let s = metrics(&ConfusionCounts {
            tp: 3,
            fp: 1,
            tn: 10,
            fn_: 2,
        });
        assert!((s.balanced_accuracy.unwrap() - (3.0 / 5.0 + 10.0 / 11.0) / 2.0).abs() < 1e-15);
        assert!((s.balanced_accuracy.unwrap() - 0.754545).abs() < 1e-6);
        assert_eq!(s.iou, 0.5);
        assert!((s.f1 - 6.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_conventions() {
        let empty_empty = metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 16,
            fn_: 0,
        });
        assert_eq!(
            (
                empty_empty.balanced_accuracy,
                empty_empty.iou,
                empty_empty.f1
            ),
            (None, 1.0, 1.0)
        );
        let all_bg = metrics(&ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 12,
            fn_: 4,
        });
        assert_eq!(all_bg.balanced_accuracy, Some(0.5));
        assert_eq!((all_bg.iou, all_bg.f1), (0.0, 0.0));
        let full_gt = metrics(&ConfusionCounts {
            tp: 5,
            fp: 0,
            tn: 0,
            fn_: 3,
        });
        assert_eq!(full_gt.balanced_accuracy, None);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let gt = Mask::new(2, 3, vec![1, 0, 0, 1, 1, 0]).unwrap();
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let s = metrics(&c);
        assert_eq!((s.balanced_accuracy, s.iou, s.f1), (Some(1.0), 1.0, 1.0));
        let c = confusion(&gt.inverted(), &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 6);
    }

    #[test]
    fn non_binary_and_mismatched_inputs_are_rejected() {
        assert!(confusion_raw(&[0, 2], &[0, 1]).is_err());
        assert!(confusion_raw(&[0], &[0, 1]).is_err());
        assert!(confusion(&Mask::zeros(2, 2), &Mask::zeros(1, 4)).is_err());
    }

    #[test]
    fn csv_leaves_undefined_accuracy_empty() {
        let r = MetricsRecord::new(
            4,
            ConfusionCounts {
                tp: 0,
                fp: 1,
                tn: 3,
                fn_: 0,
            },
        );
        assert_eq!(
            records_csv(&[r]),
            "sample_id,tp,fp,tn,fn,balanced_accuracy,iou,f1\n4,0,1,3,0,,0,0\n"
        );
    }
}
