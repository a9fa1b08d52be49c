use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `k × k` count matrix, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> usize {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Comma-separated grid with a header row of class names.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = String::from("true\\pred");
        for n in names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(names.get(i).copied().unwrap_or("?"));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(labels: &[usize], preds: &[usize], k: usize) -> Result<Confusion> {
    if labels.len() != preds.len() {
        return Err(invalid!("{} labels but {} predictions", labels.len(), preds.len()));
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&t, &p) in labels.iter().zip(preds) {
        if t >= k || p >= k {
            return Err(invalid!("class index {} outside 0..{k}", t.max(p)));
        }
        counts[t][p] += 1;
    }
    Ok(Confusion { k, counts })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averaged,
    pub micro_avg: Averaged,
    pub weighted_avg: Averaged,
}

/// One-vs-rest counts per class, then macro, micro and support-weighted
/// averages. Undefined ratios (0/0) count as 0.
pub fn metrics(c: &Confusion) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(invalid!("confusion matrix is empty"));
    }
    let per_class: Vec<ClassMetrics> = (0..c.k)
        .map(|i| {
            let tp = c.get(i, i);
            let fn_ = c.row_sum(i) - tp;
            let fp = c.col_sum(i) - tp;
            let tn = total - tp - fn_ - fp;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassMetrics {
                tp,
                fp,
                fn_,
                tn,
                precision,
                recall,
                f1: f1(precision, recall),
                fpr: ratio(fp, fp + tn),
                support: tp + fn_,
            }
        })
        .collect();
    let k = c.k as f64;
    let macro_avg = Averaged {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
    };
    let (tp, fp, fn_) = per_class
        .iter()
        .fold((0, 0, 0), |(a, b, d), m| (a + m.tp, b + m.fp, d + m.fn_));
    let (mp, mr) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let micro_avg = Averaged {
        precision: mp,
        recall: mr,
        f1: f1(mp, mr),
    };
    let w = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64;
    let weighted_avg = Averaged {
        precision: w(|m| m.precision),
        recall: w(|m| m.recall),
        f1: w(|m| m.f1),
    };
    Ok(Metrics {
        accuracy: ratio(c.trace(), total),
        per_class,
        macro_avg,
        micro_avg,
        weighted_avg,
    })
}

/// ROC points from sweeping a threshold over the unique scores in
/// descending order; starts at (0, 0) and ends at (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores but {} labels", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid!("ROC needs both positive and negative labels ({pos} positive, {neg} negative)"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(curve)
}

/// Trapezoidal area under a curve given as (x, y) points sorted by x.
pub fn auc(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2; 5]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn confusion_cases() {
        let c = confusion(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4], 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(c.get(i, j), usize::from(i == j));
            }
        }
        let c = confusion(&[0], &[4], 5).unwrap();
        assert_eq!(c.get(0, 4), 1);
        assert_eq!(c.total(), 1);
        assert!(confusion(&[5], &[0], 5).is_err());
        assert!(confusion(&[0, 1], &[0], 5).is_err());
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let c = confusion(&[0, 1, 2, 3, 4, 0], &[0, 1, 2, 3, 4, 0], 5).unwrap();
        let m = metrics(&c).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_avg, Averaged { precision: 1.0, recall: 1.0, f1: 1.0 });
    }

    #[test]
    fn binary_hand_case() {
        let c = Confusion {
            k: 2,
            counts: vec![vec![50, 10], vec![5, 35]],
        };
        let m = metrics(&c).unwrap();
        assert!((m.per_class[0].precision - 50.0 / 55.0).abs() < 1e-15);
        assert!((m.per_class[0].recall - 50.0 / 60.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.85);
        assert!((m.per_class[1].fpr - 10.0 / 60.0).abs() < 1e-15);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let c = confusion(&[0, 0], &[0, 0], 3).unwrap();
        let m = metrics(&c).unwrap();
        assert_eq!(m.per_class[1].precision, 0.0);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert!(metrics(&confusion(&[], &[], 3).unwrap()).is_err());
    }

    #[test]
    fn roc_hand_sweep() {
        let curve = roc_curve(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4], &[true, true, false, true, false, false]).unwrap();
        let t = 1.0 / 3.0;
        let want = [(0.0, 0.0), (0.0, t), (0.0, 2.0 * t), (t, 2.0 * t), (t, 1.0), (2.0 * t, 1.0), (1.0, 1.0)];
        assert_eq!(curve.len(), want.len());
        for (a, b) in curve.iter().zip(&want) {
            assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-15);
        }
        assert!((auc(&curve) - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn roc_degenerate_cases() {
        let tied = roc_curve(&[0.5; 4], &[true, false, true, false]).unwrap();
        assert_eq!(tied, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&tied), 0.5);
        let sep = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!(sep.contains(&(0.0, 1.0)));
        assert_eq!(auc(&sep), 1.0);
        assert!(roc_curve(&[0.1, 0.2], &[true, true]).is_err());
    }
}
