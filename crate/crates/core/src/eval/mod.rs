//! Confusion counts, segmentation metrics, ROC-AUC and accuracy maps.

mod report;

use std::fmt;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;

pub use report::{
    evaluate_dataset, macro_average, predict_sample, render_table, reports_csv, DatasetEvaluation, Evaluator,
    ImageReport, MetricsReport, Prediction,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: lengths {left} and {right} differ")]
    Shape {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{what} contains non-binary value {value}")]
    NonBinary { what: &'static str, value: u8 },
    #[error("no counted pixels")]
    Empty,
    #[error("score {0} is not a finite probability")]
    Score(f64),
    #[error("evaluation needs a two-class model, got {0} classes")]
    Classes(usize),
    #[error("sample {id:?}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A metric value, or the reason it cannot be computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Defined(f64),
    Undefined(&'static str),
}

impl Score {
    pub fn value(self) -> Option<f64> {
        match self {
            Score::Defined(v) => Some(v),
            Score::Undefined(_) => None,
        }
    }

    fn ratio(num: u64, den: u64, reason: &'static str) -> Score {
        if den == 0 {
            Score::Undefined(reason)
        } else {
            Score::Defined(num as f64 / den as f64)
        }
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::Defined(v) => match f.precision() {
                Some(p) => write!(f, "{v:.p$}"),
                None => write!(f, "{v}"),
            },
            Score::Undefined(_) => f.write_str("NA"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn check_binary(what: &'static str, v: &[u8]) -> Result<(), EvalError> {
    match v.iter().find(|&&x| x > 1) {
        Some(&value) => Err(EvalError::NonBinary { what, value }),
        None => Ok(()),
    }
}

fn check_len(what: &'static str, left: usize, right: usize) -> Result<(), EvalError> {
    if left == right {
        Ok(())
    } else {
        Err(EvalError::Shape { what, left, right })
    }
}

/// Pixelwise tallies, restricted to `mask` when given.
pub fn confusion(pred: &[u8], gt: &[u8], mask: Option<&[bool]>) -> Result<ConfusionCounts, EvalError> {
    check_len("prediction vs ground truth", pred.len(), gt.len())?;
    if let Some(m) = mask {
        check_len("mask vs ground truth", m.len(), gt.len())?;
    }
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)?;
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if !mask.map_or(true, |m| m[i]) {
            continue;
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub se: Score,
    pub sp: Score,
    pub acc: Score,
    pub f1: Score,
    pub jaccard: Score,
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Result<Metrics, EvalError> {
    if c.total() == 0 {
        return Err(EvalError::Empty);
    }
    Ok(Metrics {
        se: Score::ratio(c.tp, c.tp + c.fn_, "no positive pixels in ground truth"),
        sp: Score::ratio(c.tn, c.tn + c.fp, "no negative pixels in ground truth"),
        acc: Score::ratio(c.tp + c.tn, c.total(), "no counted pixels"),
        f1: Score::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "no positives predicted or present"),
        jaccard: Score::ratio(c.tp, c.tp + c.fp + c.fn_, "no positives predicted or present"),
    })
}

/// Foreground scores split by ground-truth class, for pooled AUC.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AucAccumulator {
    positives: Vec<f64>,
    negatives: Vec<f64>,
}

impl AucAccumulator {
    pub fn add(&mut self, prob: &[f64], gt: &[u8], mask: Option<&[bool]>) -> Result<(), EvalError> {
        check_len("scores vs ground truth", prob.len(), gt.len())?;
        if let Some(m) = mask {
            check_len("mask vs ground truth", m.len(), gt.len())?;
        }
        check_binary("ground truth", gt)?;
        if let Some(&bad) = prob.iter().find(|p| !p.is_finite()) {
            return Err(EvalError::Score(bad));
        }
        for (i, (&p, &g)) in prob.iter().zip(gt).enumerate() {
            if mask.map_or(true, |m| m[i]) {
                if g == 1 {
                    self.positives.push(p);
                } else {
                    self.negatives.push(p);
                }
            }
        }
        Ok(())
    }

    /// Mann-Whitney statistic: P(score⁺ > score⁻) + ½·P(score⁺ = score⁻).
    pub fn auc(&self) -> Score {
        if self.positives.is_empty() {
            return Score::Undefined("no positive pixels in ground truth");
        }
        if self.negatives.is_empty() {
            return Score::Undefined("no negative pixels in ground truth");
        }
        let mut neg = self.negatives.clone();
        neg.sort_unstable_by(f64::total_cmp);
        let mut pos = self.positives.clone();
        pos.sort_unstable_by(f64::total_cmp);
        // both sorted: sweep once, counting negatives below and equal to each positive
        let (mut below, mut upto) = (0usize, 0usize);
        let mut twice_wins: u128 = 0;
        for &p in &pos {
            while below < neg.len() && neg[below] < p {
                below += 1;
            }
            upto = upto.max(below);
            while upto < neg.len() && neg[upto] <= p {
                upto += 1;
            }
            twice_wins += (2 * below + (upto - below)) as u128;
        }
        let pairs = pos.len() as f64 * neg.len() as f64;
        Score::Defined(twice_wins as f64 / (2.0 * pairs))
    }
}

/// Exact rank-based ROC-AUC over in-mask pixels.
pub fn roc_auc(prob: &[f64], gt: &[u8], mask: Option<&[bool]>) -> Result<Score, EvalError> {
    let mut acc = AucAccumulator::default();
    acc.add(prob, gt, mask)?;
    Ok(acc.auc())
}

pub const TP_COLOR: [u8; 3] = [0, 0, 0];
pub const TN_COLOR: [u8; 3] = [255, 255, 255];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [255, 255, 0];
pub const OUTSIDE_COLOR: [u8; 3] = [128, 128, 128];

/// Colour-coded outcome per pixel, as RGB triples.
pub fn render_accuracy_map(pred: &[u8], gt: &[u8], mask: Option<&[bool]>) -> Result<Vec<[u8; 3]>, EvalError> {
    check_len("prediction vs ground truth", pred.len(), gt.len())?;
    if let Some(m) = mask {
        check_len("mask vs ground truth", m.len(), gt.len())?;
    }
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (&p, &g))| {
            if !mask.map_or(true, |m| m[i]) {
                return OUTSIDE_COLOR;
            }
            match (p, g) {
                (1, 1) => TP_COLOR,
                (0, 0) => TN_COLOR,
                (1, 0) => FP_COLOR,
                _ => FN_COLOR,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_pixel_case() {
        let pred = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let gt = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
        let c = confusion(&pred, &gt, None).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, tn: 5, fp: 1, fn_: 1 });
        let m = metrics_from_counts(&c).unwrap();
        assert_eq!(m.se, Score::Defined(0.75));
        assert!((m.sp.value().unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.acc, Score::Defined(0.8));
        assert_eq!(m.f1, Score::Defined(0.75));
        assert_eq!(m.jaccard, Score::Defined(0.6));
    }

    #[test]
    fn perfect_and_inverted() {
        let gt = [0, 1, 1, 0, 1];
        let perfect = metrics_from_counts(&confusion(&gt, &gt, None).unwrap()).unwrap();
        for s in [perfect.se, perfect.sp, perfect.acc, perfect.f1, perfect.jaccard] {
            assert_eq!(s, Score::Defined(1.0));
        }
        let inv: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
        let c = confusion(&inv, &gt, None).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let m = metrics_from_counts(&ConfusionCounts { tp: 0, tn: 4, fp: 0, fn_: 0 }).unwrap();
        assert!(matches!(m.se, Score::Undefined(_)));
        assert!(matches!(m.f1, Score::Undefined(_)));
        assert_eq!(m.sp, Score::Defined(1.0));
        assert!(matches!(metrics_from_counts(&ConfusionCounts::default()), Err(EvalError::Empty)));
        assert!(matches!(confusion(&[0, 2], &[0, 1], None), Err(EvalError::NonBinary { .. })));
        assert!(matches!(confusion(&[0], &[0, 1], None), Err(EvalError::Shape { .. })));
    }

    #[test]
    fn mask_restricts_counts() {
        let c = confusion(&[1, 1, 0], &[1, 0, 0], Some(&[true, false, true])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn auc_edge_cases() {
        let gt = [0, 0, 1, 1];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &gt, None).unwrap(), Score::Defined(1.0));
        assert_eq!(roc_auc(&[0.5; 4], &gt, None).unwrap(), Score::Defined(0.5));
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &gt, None).unwrap(), Score::Defined(0.0));
        // one tie between classes: (3 wins + ½) / 4
        assert_eq!(roc_auc(&[0.1, 0.5, 0.5, 0.9], &gt, None).unwrap(), Score::Defined(0.875));
        assert!(matches!(roc_auc(&[0.1, 0.2], &[0, 0], None).unwrap(), Score::Undefined(_)));
        assert!(roc_auc(&[f64::NAN, 0.2], &[0, 1], None).is_err());
    }

    #[test]
    fn accuracy_map_colors() {
        let pred = [1, 0, 1, 0, 1];
        let gt = [1, 0, 0, 1, 1];
        let mask = [true, true, true, true, false];
        let map = render_accuracy_map(&pred, &gt, Some(&mask)).unwrap();
        assert_eq!(map, vec![TP_COLOR, TN_COLOR, FP_COLOR, FN_COLOR, OUTSIDE_COLOR]);
    }

    #[test]
    fn score_display() {
        assert_eq!(format!("{:.4}", Score::Defined(0.5)), "0.5000");
        assert_eq!(format!("{:.4}", Score::Undefined("x")), "NA");
    }
}
