use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUC of `scores` for the positive class; tied pairs earn half
/// credit. Computed from mid-ranks, O(n log n).
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!("{} labels vs {} scores", labels.len(), scores.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined("only one class present".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Hard label by argmax, ties to the lower class index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    m
}

pub fn balanced_accuracy(cm: &[Vec<usize>]) -> f64 {
    let recalls: Vec<f64> = cm
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().sum::<usize>() > 0)
        .map(|(i, row)| row[i] as f64 / row.iter().sum::<usize>() as f64)
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// Unweighted mean per-class F1; 0/0 counts as 0.
pub fn macro_f1(cm: &[Vec<usize>]) -> f64 {
    let k = cm.len();
    let mut total = 0.0;
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let fp: f64 = (0..k).filter(|&r| r != c).map(|r| cm[r][c] as f64).sum();
        let fn_: f64 = (0..k).filter(|&p| p != c).map(|p| cm[c][p] as f64).sum();
        let denom = 2.0 * tp + fp + fn_;
        total += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    total / k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// None when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub confusion_matrix: Vec<Vec<usize>>,
}

/// Metrics for `k`-class probabilities. Binary AUC scores class 1; with more
/// classes it is the unweighted mean of one-vs-rest AUCs.
pub fn compute_metrics(y_true: &[usize], y_prob: &[Vec<f64>], k: usize) -> Result<Metrics> {
    if y_true.len() != y_prob.len() {
        return Err(Error::Shape(format!("{} labels vs {} probability rows", y_true.len(), y_prob.len())));
    }
    if y_true.iter().any(|&y| y >= k) || y_prob.iter().any(|p| p.len() != k) {
        return Err(Error::Shape(format!("labels and probability rows must have {k} classes")));
    }
    let pred: Vec<usize> = y_prob.iter().map(|p| argmax(p)).collect();
    let cm = confusion_matrix(y_true, &pred, k);
    let auc = if k == 2 {
        let labels: Vec<bool> = y_true.iter().map(|&y| y == 1).collect();
        let s: Vec<f64> = y_prob.iter().map(|p| p[1]).collect();
        auc(&labels, &s)
    } else {
        let mut sum = 0.0;
        let mut res = Ok(());
        for c in 0..k {
            let labels: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
            let s: Vec<f64> = y_prob.iter().map(|p| p[c]).collect();
            match auc(&labels, &s) {
                Ok(a) => sum += a,
                Err(e) => {
                    res = Err(e);
                    break;
                }
            }
        }
        res.map(|_| sum / k as f64)
    };
    let auc = match auc {
        Ok(a) => Some(a),
        Err(Error::AucUndefined(msg)) => {
            log::warn!("AUC undefined: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(Metrics { auc, balanced_accuracy: balanced_accuracy(&cm), macro_f1: macro_f1(&cm), confusion_matrix: cm })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[false, false, true, true], &[0.1, 0.4, 0.35, 0.8]).unwrap(), 0.75);
        assert_eq!(auc(&[false, true, false, true], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[false, false, true], &[0.1, 0.2, 0.9]).unwrap(), 1.0);
        assert!(matches!(auc(&[true, true], &[0.1, 0.2]), Err(Error::AucUndefined(_))));
    }

    #[test]
    fn single_class_still_reports_other_metrics() {
        let m = compute_metrics(&[1, 1], &[vec![0.2, 0.8], vec![0.6, 0.4]], 2).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.confusion_matrix, vec![vec![0, 0], vec![1, 1]]);
        assert_eq!(m.balanced_accuracy, 0.5);
    }

    #[test]
    fn three_class_metrics() {
        let y = [0, 0, 1, 1, 2, 2];
        let p = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.4, 0.4, 0.2],
            vec![0.2, 0.7, 0.1],
            vec![0.5, 0.3, 0.2],
            vec![0.1, 0.1, 0.8],
            vec![0.1, 0.5, 0.4],
        ];
        let m = compute_metrics(&y, &p, 3).unwrap();
        // Tie in row 1 goes to class 0.
        assert_eq!(m.confusion_matrix, vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 1, 1]]);
        assert!((m.balanced_accuracy - (1.0 + 0.5 + 0.5) / 3.0).abs() < 1e-12);
        let f1 = (0.8 + 0.5 + 2.0 / 3.0) / 3.0;
        assert!((m.macro_f1 - f1).abs() < 1e-12);
        assert!(m.auc.unwrap() > 0.5);
    }
}
