//! Segmentation metrics: per-class IoU, mIoU and micro precision / F1.
//!
//! Label maps use global class ids: 0 is background, any other value a class.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::MetricsConfig;
use crate::{Error, Result};

pub const BACKGROUND: usize = 0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pixel_counts: BTreeMap<usize, Counts>,
    pub options: MetricsConfig,
}

fn ratio(num: u64, denom: u64, empty: f64) -> f64 {
    if denom == 0 {
        empty
    } else {
        num as f64 / denom as f64
    }
}

impl EvalReport {
    pub fn from_counts(pixel_counts: BTreeMap<usize, Counts>, options: MetricsConfig) -> Self {
        let mut per_class_iou = BTreeMap::new();
        for (&c, counts) in &pixel_counts {
            if c == BACKGROUND && !options.background_in_miou {
                continue;
            }
            match counts.iou() {
                Some(iou) => {
                    per_class_iou.insert(c, iou);
                }
                None if options.include_absent => {
                    per_class_iou.insert(c, 1.0);
                }
                None => {}
            }
        }
        let miou = if per_class_iou.is_empty() {
            1.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        let mut fg = Counts::default();
        for (_, counts) in pixel_counts.iter().filter(|(&c, _)| c != BACKGROUND) {
            fg.add(counts);
        }
        // no foreground anywhere is a perfect score; otherwise 0/0 is a miss
        let nothing = fg.tp + fg.fp + fg.fn_ == 0;
        let empty = if nothing { 1.0 } else { 0.0 };
        let precision = ratio(fg.tp, fg.tp + fg.fp, empty);
        let recall = ratio(fg.tp, fg.tp + fg.fn_, empty);
        let f1 = if nothing {
            1.0
        } else if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            per_class_iou,
            miou,
            precision,
            recall,
            f1,
            pixel_counts,
            options,
        }
    }
}

/// Compares two label maps. `declared` lists the class ids of the scene so
/// that classes absent from both maps are still known to the report.
pub fn evaluate(pred: &Array2<usize>, gt: &Array2<usize>, declared: &[usize], options: MetricsConfig) -> Result<EvalReport> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(&[gt.nrows(), gt.ncols()], &[pred.nrows(), pred.ncols()]));
    }
    let mut counts: BTreeMap<usize, Counts> = declared.iter().map(|&c| (c, Counts::default())).collect();
    counts.entry(BACKGROUND).or_default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p == g {
            counts.entry(p).or_default().tp += 1;
        } else {
            counts.entry(p).or_default().fp += 1;
            counts.entry(g).or_default().fn_ += 1;
        }
    }
    Ok(EvalReport::from_counts(counts, options))
}

/// Dataset-level micro aggregation: counts are summed, metrics recomputed.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    if reports.iter().any(|r| r.options != first.options) {
        return Err(Error::Config("reports were computed with different metric options".into()));
    }
    let mut total: BTreeMap<usize, Counts> = BTreeMap::new();
    for r in reports {
        for (&c, counts) in &r.pixel_counts {
            total.entry(c).or_default().add(counts);
        }
    }
    Ok(EvalReport::from_counts(total, first.options))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    const OPTS: MetricsConfig = MetricsConfig {
        include_absent: false,
        background_in_miou: true,
    };

    #[test]
    fn perfect_prediction() {
        let gt = array![[0, 1, 1], [2, 2, 0]];
        let r = evaluate(&gt, &gt, &[1, 2], OPTS).unwrap();
        assert_eq!((r.miou, r.precision, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let gt = array![[1, 1], [2, 2]];
        let pred = array![[2, 2], [1, 1]];
        let r = evaluate(&pred, &gt, &[1, 2], OPTS).unwrap();
        assert_eq!(r.per_class_iou[&1], 0.0);
        assert_eq!(r.per_class_iou[&2], 0.0);
        assert!(!r.per_class_iou.contains_key(&BACKGROUND));
    }

    #[test]
    fn hand_counted_four_by_four() {
        // gt: 12 class pixels (first three rows). pred: 8 of them plus 2 in the last row.
        let mut gt = Array2::zeros((4, 4));
        let mut pred = Array2::zeros((4, 4));
        for i in 0..3 {
            for j in 0..4 {
                gt[(i, j)] = 1;
            }
        }
        for i in 0..2 {
            for j in 0..4 {
                pred[(i, j)] = 1;
            }
        }
        pred[(3, 0)] = 1;
        pred[(3, 1)] = 1;
        let r = evaluate(&pred, &gt, &[1], OPTS).unwrap();
        assert_eq!(r.pixel_counts[&1], Counts { tp: 8, fp: 2, fn_: 4 });
        assert_relative_eq!(r.per_class_iou[&1], 4.0 / 7.0, max_relative = 1e-15);

        // independent double loop
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..4 {
            for j in 0..4 {
                match (pred[(i, j)] == 1, gt[(i, j)] == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        assert_eq!((tp, fp, fn_), (8, 2, 4));
    }

    #[test]
    fn absent_class_handling() {
        let gt = array![[0, 1]];
        let excluded = evaluate(&gt, &gt, &[1, 5], OPTS).unwrap();
        assert!(!excluded.per_class_iou.contains_key(&5));
        let included = evaluate(&gt, &gt, &[1, 5], MetricsConfig { include_absent: true, ..OPTS }).unwrap();
        assert_eq!(included.per_class_iou[&5], 1.0);
        let no_bg = evaluate(&gt, &gt, &[1], MetricsConfig { background_in_miou: false, ..OPTS }).unwrap();
        assert!(!no_bg.per_class_iou.contains_key(&BACKGROUND));
    }

    #[test]
    fn aggregation_examples() {
        let gt = array![[0, 1], [1, 1]];
        let pred = array![[1, 1], [0, 1]];
        let r = evaluate(&pred, &gt, &[1], OPTS).unwrap();
        assert_eq!(aggregate(std::slice::from_ref(&r)).unwrap(), r);
        let twice = aggregate(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(twice.miou, r.miou);
        assert_eq!(twice.f1, r.f1);

        let gt2 = array![[3, 3], [0, 0]];
        let pred2 = array![[3, 0], [0, 0]];
        let r2 = evaluate(&pred2, &gt2, &[3], OPTS).unwrap();
        let pooled = aggregate(&[r.clone(), r2.clone()]).unwrap();
        // pooled counting over both scenes by hand
        assert_eq!(pooled.pixel_counts[&1], Counts { tp: 2, fp: 1, fn_: 1 });
        assert_eq!(pooled.pixel_counts[&3], Counts { tp: 1, fp: 0, fn_: 1 });
        assert_eq!(pooled.pixel_counts[&0], Counts { tp: 2, fp: 2, fn_: 1 });
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(matches!(
            evaluate(&Array2::zeros((2, 2)), &Array2::zeros((2, 3)), &[], OPTS),
            Err(Error::Shape { .. })
        ));
    }

    fn masks(n: usize) -> impl Strategy<Value = (Array2<usize>, Array2<usize>)> {
        (
            prop::collection::vec(0..n, 36),
            prop::collection::vec(0..n, 36),
        )
            .prop_map(|(a, b)| (Array2::from_shape_vec((6, 6), a).unwrap(), Array2::from_shape_vec((6, 6), b).unwrap()))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded((a, b) in masks(4)) {
            let ab = evaluate(&a, &b, &[1, 2, 3], OPTS).unwrap();
            let ba = evaluate(&b, &a, &[1, 2, 3], OPTS).unwrap();
            prop_assert_eq!(&ab.per_class_iou, &ba.per_class_iou);
            for (c, counts) in &ab.pixel_counts {
                if let (Some(iou), Some(f1)) = (counts.iou(), counts.f1()) {
                    prop_assert!((0.0..=1.0).contains(&iou));
                    prop_assert!(iou <= f1 + 1e-15);
                    prop_assert!((iou - f1 / (2.0 - f1)).abs() < 1e-12, "class {}", c);
                }
            }
            for v in [ab.miou, ab.precision, ab.recall, ab.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
