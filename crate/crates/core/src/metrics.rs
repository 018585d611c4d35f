//! Confusion matrices, the five summary scores, and DfB-binned analyses.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tiling::ClassLabel;

/// `counts[true][pred]`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_predictions(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(invalid(format!("{} true labels but {} predictions", y_true.len(), y_pred.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn from_labels(pairs: impl IntoIterator<Item = (ClassLabel, ClassLabel)>) -> Self {
        let mut cm = Self::new(ClassLabel::COUNT);
        for (t, p) in pairs {
            cm.counts[t.index() * ClassLabel::COUNT + p.index()] += 1;
        }
        cm
    }

    pub fn record(&mut self, t: usize, p: usize) -> Result<()> {
        if t >= self.classes || p >= self.classes {
            return Err(invalid(format!("label {} out of range for {} classes", t.max(p), self.classes)));
        }
        self.counts[t * self.classes + p] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.classes + p]
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        self.counts[t * self.classes..(t + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, p)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Rows divided by their totals; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|t| {
                let n = self.row_sum(t);
                (0..self.classes).map(|p| if n == 0 { 0.0 } else { self.get(t, p) as f64 / n as f64 }).collect()
            })
            .collect()
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.classes, rhs.classes, "adding confusion matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub m_recall: f64,
    pub m_precision: f64,
    pub f1: f64,
    pub m_iou: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub iou: Vec<f64>,
    /// Classes whose recall, precision or IoU had a zero denominator and
    /// were scored 0.
    pub degenerate_classes: Vec<usize>,
}

/// Harmonic mean of mean recall and mean precision (0 when both are 0).
pub fn f1_score(m_recall: f64, m_precision: f64) -> f64 {
    let denom = m_recall + m_precision;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * m_recall * m_precision / denom
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(invalid("metrics of an empty confusion matrix"));
    }
    let m = cm.classes();
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let (mut recall, mut precision, mut iou) = (Vec::new(), Vec::new(), Vec::new());
    let mut degenerate = Vec::new();
    for c in 0..m {
        let tp = cm.get(c, c);
        let fn_ = cm.row_sum(c) - tp;
        let fp = cm.col_sum(c) - tp;
        let r = ratio(tp, tp + fn_);
        let p = ratio(tp, tp + fp);
        let i = ratio(tp, tp + fp + fn_);
        if r.is_none() || p.is_none() || i.is_none() {
            degenerate.push(c);
        }
        recall.push(r.unwrap_or(0.0));
        precision.push(p.unwrap_or(0.0));
        iou.push(i.unwrap_or(0.0));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / m as f64;
    let (m_recall, m_precision) = (mean(&recall), mean(&precision));
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        m_recall,
        m_precision,
        f1: f1_score(m_recall, m_precision),
        m_iou: mean(&iou),
        recall,
        precision,
        iou,
        degenerate_classes: degenerate,
    })
}

/// One scored patch positioned by its mean DfB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub dfb_mean: f64,
    pub true_label: ClassLabel,
    pub pred_label: ClassLabel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallAveraging {
    /// Mean of the per-class recalls of the classes present in the bin.
    #[default]
    Macro,
    /// Fraction of correct records in the bin.
    Micro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinValue {
    pub bin_low: f64,
    pub value: f64,
}

fn bin_index(dfb: f64, bin_width: f64) -> i64 {
    (dfb / bin_width).floor() as i64
}

/// Mean recall per DfB bin. Empty bins are omitted.
pub fn recall_by_distance(
    records: &[DistanceRecord],
    bin_width: f64,
    averaging: RecallAveraging,
) -> Result<Vec<BinValue>> {
    if !(bin_width > 0.0) {
        return Err(invalid("bin width must be positive"));
    }
    let mut bins: BTreeMap<i64, ConfusionMatrix> = BTreeMap::new();
    for r in records {
        let cm =
            bins.entry(bin_index(r.dfb_mean, bin_width)).or_insert_with(|| ConfusionMatrix::new(ClassLabel::COUNT));
        cm.counts[r.true_label.index() * ClassLabel::COUNT + r.pred_label.index()] += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(b, cm)| {
            let value = match averaging {
                RecallAveraging::Micro => cm.trace() as f64 / cm.total() as f64,
                RecallAveraging::Macro => {
                    let present: Vec<f64> = (0..cm.classes())
                        .filter(|&c| cm.row_sum(c) > 0)
                        .map(|c| cm.get(c, c) as f64 / cm.row_sum(c) as f64)
                        .collect();
                    present.iter().sum::<f64>() / present.len() as f64
                }
            };
            BinValue { bin_low: b as f64 * bin_width, value }
        })
        .collect())
}

/// `method − baseline` over the bins both curves share.
pub fn curve_difference(method: &[BinValue], baseline: &[BinValue]) -> Vec<BinValue> {
    method
        .iter()
        .filter_map(|m| {
            baseline
                .iter()
                .find(|b| b.bin_low == m.bin_low)
                .map(|b| BinValue { bin_low: m.bin_low, value: m.value - b.value })
        })
        .collect()
}

/// Per-class DfB histograms, each normalised by its class total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub bin_width: f64,
    /// `per_class[c][b]` is the fraction of class `c` in bin `b`. Classes
    /// without records have an empty vector.
    pub per_class: Vec<Vec<f64>>,
}

pub fn dfb_class_histogram(records: &[(f64, ClassLabel)], bin_width: f64) -> Result<ClassHistogram> {
    if !(bin_width > 0.0) {
        return Err(invalid("bin width must be positive"));
    }
    if records.iter().any(|(d, _)| !(*d >= 0.0)) {
        return Err(invalid("DfB values must be non-negative"));
    }
    let n_bins = records.iter().map(|(d, _)| bin_index(*d, bin_width) as usize + 1).max().unwrap_or(0);
    let mut counts = vec![vec![0usize; n_bins]; ClassLabel::COUNT];
    for (d, l) in records {
        counts[l.index()][bin_index(*d, bin_width) as usize] += 1;
    }
    let per_class = counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                Vec::new()
            } else {
                row.into_iter().map(|c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(ClassHistogram { bin_width, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use ClassLabel::*;

    #[test]
    fn hand_enumerated_confusion() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0], 3).unwrap();
        let rows: Vec<Vec<u64>> = (0..3).map(|t| (0..3).map(|p| cm.get(t, p)).collect()).collect();
        assert_eq!(rows, vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 1]]);

        let r = compute_metrics(&cm).unwrap();
        assert_abs_diff_eq!(r.accuracy, 4.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.m_recall, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.m_precision, (0.5 + 2.0 / 3.0 + 1.0) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.f1, 0.693_333, epsilon = 1e-6);
        assert_abs_diff_eq!(r.m_iou, 0.5, epsilon = 1e-12);
        assert!(r.degenerate_classes.is_empty());
    }

    #[test]
    fn degenerate_inputs() {
        let cm = ConfusionMatrix::from_predictions(&[], &[], 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(compute_metrics(&cm).is_err());
        assert!(ConfusionMatrix::from_predictions(&[0], &[], 3).is_err());
        assert!(ConfusionMatrix::from_predictions(&[3], &[0], 3).is_err());

        let perfect = ConfusionMatrix::from_predictions(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        let r = compute_metrics(&perfect).unwrap();
        for v in [r.accuracy, r.m_recall, r.m_precision, r.f1, r.m_iou] {
            assert_eq!(v, 1.0);
        }

        // class 2 never occurs: scored 0 and flagged
        let r = compute_metrics(&ConfusionMatrix::from_predictions(&[0, 1], &[0, 1], 3).unwrap()).unwrap();
        assert_eq!(r.degenerate_classes, vec![2]);
        assert_abs_diff_eq!(r.m_recall, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn f1_of_reference_transfer_row() {
        assert_abs_diff_eq!(f1_score(0.911, 0.751), 0.823, epsilon = 5e-4);
    }

    #[test]
    fn normalized_rows() {
        let cm = ConfusionMatrix::from_labels([(NonNeop, NonNeop), (NonNeop, Lsil), (Hsil, Hsil)]);
        let n = cm.row_normalized();
        assert_eq!(n[0], vec![0.5, 0.5, 0.0]);
        assert_eq!(n[1], vec![0.0, 0.0, 0.0]);
        assert_eq!(n[2], vec![0.0, 0.0, 1.0]);
    }

    fn rec(d: f64, t: ClassLabel, p: ClassLabel) -> DistanceRecord {
        DistanceRecord { dfb_mean: d, true_label: t, pred_label: p }
    }

    #[test]
    fn recall_bins() {
        let correct = [rec(0.2, Lsil, Lsil), rec(3.5, NonNeop, NonNeop), rec(9.0, Hsil, Hsil)];
        let curve = recall_by_distance(&correct, 1.0, RecallAveraging::Macro).unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve.iter().all(|b| b.value == 1.0));
        assert!(curve_difference(&curve, &curve).iter().all(|b| b.value == 0.0));

        let half = [rec(4.1, Lsil, Lsil), rec(4.9, Lsil, NonNeop)];
        let curve = recall_by_distance(&half, 1.0, RecallAveraging::Macro).unwrap();
        assert_eq!(curve, vec![BinValue { bin_low: 4.0, value: 0.5 }]);

        // macro vs micro differ with unequal class support
        let mixed =
            [rec(0.0, Lsil, Lsil), rec(0.0, NonNeop, Lsil), rec(0.0, NonNeop, NonNeop), rec(0.0, NonNeop, NonNeop)];
        let mac = recall_by_distance(&mixed, 1.0, RecallAveraging::Macro).unwrap();
        let mic = recall_by_distance(&mixed, 1.0, RecallAveraging::Micro).unwrap();
        assert_abs_diff_eq!(mac[0].value, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mic[0].value, 0.75, epsilon = 1e-12);
        assert!(recall_by_distance(&mixed, 0.0, RecallAveraging::Macro).is_err());
    }

    #[test]
    fn histograms() {
        let h = dfb_class_histogram(&[(0.0, Lsil), (0.3, Lsil)], 1.0).unwrap();
        assert_eq!(h.per_class[Lsil.index()], vec![1.0]);
        assert!(h.per_class[NonNeop.index()].is_empty());
    }

    proptest! {
        #[test]
        fn metric_identities(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200),
            split in any::<prop::sample::Index>(),
        ) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let cm = ConfusionMatrix::from_predictions(&t, &p, 3).unwrap();
            let r = compute_metrics(&cm).unwrap();
            let correct = t.iter().zip(&p).filter(|(a, b)| a == b).count();
            prop_assert_eq!(r.accuracy, correct as f64 / t.len() as f64);
            for c in 0..3 {
                prop_assert!(r.iou[c] <= r.precision[c] + 1e-15 || cm.col_sum(c) == 0);
                prop_assert!(r.iou[c] <= r.recall[c] + 1e-15 || cm.row_sum(c) == 0);
            }
            let k = split.index(t.len() + 1);
            let mut a = ConfusionMatrix::from_predictions(&t[..k], &p[..k], 3).unwrap();
            a += &ConfusionMatrix::from_predictions(&t[k..], &p[k..], 3).unwrap();
            prop_assert_eq!(a, cm);
        }

        #[test]
        fn histograms_normalised(recs in prop::collection::vec((0.0f64..140.0, 0usize..3), 1..300), w in 0.5f64..20.0) {
            let recs: Vec<(f64, ClassLabel)> = recs.into_iter().map(|(d, c)| (d, ClassLabel::from_index(c).unwrap())).collect();
            let h = dfb_class_histogram(&recs, w).unwrap();
            for row in &h.per_class {
                if !row.is_empty() {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
