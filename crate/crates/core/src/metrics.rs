//! Binary classification metrics: confusion counts, macro F1, AUC-ROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `confusion[actual][predicted]`.
pub type Confusion = [[usize; 2]; 2];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    /// Absent when the labels contain a single class.
    pub auc_roc: Option<f64>,
    pub per_class: [ClassStats; 2],
    pub confusion: Confusion,
    pub n_cases: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Usage("metrics need at least one case".into()));
    }
    if a != b {
        return Err(Error::Usage(format!(
            "length mismatch: {a} predictions, {b} labels"
        )));
    }
    Ok(())
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<Confusion> {
    check_lengths(predictions.len(), labels.len())?;
    let mut m = [[0usize; 2]; 2];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p > 1 || l > 1 {
            return Err(Error::Usage(format!(
                "class index out of range: prediction {p}, label {l}"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1 with `0/0 = 0`.
pub fn class_stats(m: &Confusion) -> [ClassStats; 2] {
    let stats = |c: usize| {
        let tp = m[c][c];
        let predicted = m[0][c] + m[1][c];
        let actual = m[c][0] + m[c][1];
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = ratio(2 * tp, predicted + actual);
        ClassStats {
            precision,
            recall,
            f1,
        }
    };
    [stats(0), stats(1)]
}

/// Unweighted mean of the two per-class F1 scores.
pub fn macro_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    let m = confusion(predictions, labels)?;
    let [a, b] = class_stats(&m);
    Ok((a.f1 + b.f1) / 2.0)
}

fn class_sizes(labels: &[usize]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC-ROC needs both classes in the labels".into(),
        ));
    }
    Ok((pos, neg))
}

/// `u / total` and `(total - u) / total` sum to exactly one in floating
/// point when the larger share is computed as the complement of the smaller.
fn share(twice_u: u128, twice_total: u128) -> f64 {
    if 2 * twice_u > twice_total {
        1.0 - (twice_total - twice_u) as f64 / twice_total as f64
    } else {
        twice_u as f64 / twice_total as f64
    }
}

/// Mann–Whitney estimate of `P(score_pos > score_neg)`, ties counted ½,
/// via average ranks.
pub fn auc_roc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Usage("NaN score".into()));
    }
    let (pos, neg) = class_sizes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Twice the rank sum of positives, with ranks starting at 1; tied groups
    // share their average rank, so doubling keeps everything integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let twice_avg_rank = (start + 1 + end) as u128;
        let group_pos = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count() as u128;
        twice_rank_sum += group_pos * twice_avg_rank;
        start = end;
    }
    let pos = pos as u128;
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(share(twice_u, 2 * pos * neg as u128))
}

/// Area under the empirical ROC curve by the trapezoidal rule over all
/// distinct thresholds.
pub fn auc_trapezoid(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let (pos, neg) = class_sizes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Full report from hard predictions and positive-class scores.
pub fn report(predictions: &[usize], scores: &[f64], labels: &[usize]) -> Result<MetricsReport> {
    check_lengths(scores.len(), labels.len())?;
    let m = confusion(predictions, labels)?;
    let per_class = class_stats(&m);
    let auc = match auc_roc(scores, labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        macro_f1: (per_class[0].f1 + per_class[1].f1) / 2.0,
        auc_roc: auc,
        per_class,
        confusion: m,
        n_cases: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counts() {
        let m = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m, [[1, 1], [0, 2]]);
        assert_eq!(confusion(&[0, 1], &[0, 1]).unwrap(), [[1, 0], [0, 1]]);
        assert_eq!(confusion(&[1, 0], &[0, 1]).unwrap(), [[0, 1], [1, 0]]);
        assert!(confusion(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        let v = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((v - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        let one_class = macro_f1(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((one_class - (0.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(one_class < 0.5);
        assert!(matches!(macro_f1(&[], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        let v = auc_roc(&[0.9, 0.4, 0.3, 0.5], &[1, 1, 0, 0]).unwrap();
        assert_eq!(v, 0.75);
        assert!(matches!(
            auc_roc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn single_class_report_has_no_auc() {
        let r = report(&[1, 1], &[0.7, 0.8], &[1, 1]).unwrap();
        assert!(r.auc_roc.is_none());
        assert_eq!(r.n_cases, 2);
    }
}
