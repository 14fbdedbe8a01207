//! Thresholding, voting and classification metrics.

use serde::{Deserialize, Serialize};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Abnormal iff `score >= threshold`.
pub fn classify(score: f64, threshold: f64) -> bool {
    score >= threshold
}

/// Abnormal at `i` iff at least `k` of the last `m` scores (up to and
/// including `i`) reach the threshold.
pub fn classify_votes(scores: &[f64], threshold: f64, k: usize, m: usize) -> Vec<bool> {
    (0..scores.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(m.max(1));
            scores[lo..=i].iter().filter(|&&s| classify(s, threshold)).count() >= k
        })
        .collect()
}

/// ROC-AUC as the Mann-Whitney rank statistic with tied ranks averaged.
/// `None` when only one class is present.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(l, _)| **l).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Mann-Whitney U test (normal approximation with tie
/// correction). Returns the p-value.
pub fn mann_whitney_p(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&all);
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u - n1 * n2 / 2.0).abs() / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2)
}

/// Confusion counts and derived metrics for one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

impl ClassificationReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Metrics of `predictions` against `labels`; AUC from `scores`. A ratio
/// with a zero denominator is reported as 0.
pub fn metrics(labels: &[bool], predictions: &[bool], scores: &[f64], threshold: f64) -> Result<ClassificationReport> {
    if labels.len() != predictions.len() || labels.len() != scores.len() {
        return Err(Error::shape("labels, predictions and scores differ in length"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&l, &p) in labels.iter().zip(predictions) {
        match (l, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(ClassificationReport {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, labels.len()),
        precision,
        recall,
        f1,
        auc: roc_auc(labels, scores),
    })
}

/// Threshold maximizing F1 on (`labels`, `scores`); candidates are the
/// observed scores. Ties go to the larger threshold.
pub fn calibrate_threshold(labels: &[bool], scores: &[f64]) -> f64 {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for &t in &cands {
        let pred: Vec<bool> = scores.iter().map(|&s| classify(s, t)).collect();
        let f1 = metrics(labels, &pred, scores, t).map(|r| r.f1).unwrap_or(0.0);
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        assert!(classify(0.9, 0.5));
        assert!(classify(0.5, 0.5));
        assert!(!classify(0.49, 0.5));
        assert_eq!(classify_votes(&[0.6, 0.4, 0.7], 0.5, 2, 3), vec![false, false, true]);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[false, false, true, true], &[0.1, 0.4, 0.35, 0.8]), Some(0.75));
        assert_eq!(roc_auc(&[false, true], &[0.2, 0.9]), Some(1.0));
        assert_eq!(roc_auc(&[true, true], &[0.2, 0.9]), None);
        assert_eq!(roc_auc(&[false, true], &[0.5, 0.5]), Some(0.5));
    }

    #[test]
    fn metric_examples() {
        let labels = [true, false, true, false];
        let scores = [0.9, 0.1, 0.8, 0.2];
        let perfect = metrics(&labels, &[true, false, true, false], &scores, 0.5).unwrap();
        assert_eq!((perfect.accuracy, perfect.auc), (1.0, Some(1.0)));
        let inverted = metrics(&labels, &[false, true, false, true], &scores, 0.5).unwrap();
        assert_eq!(inverted.accuracy, 0.0);
        assert_eq!(perfect.total(), 4);
    }

    #[test]
    fn mann_whitney_sanity() {
        let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..50).map(|i| i as f64 + 100.0).collect();
        assert!(mann_whitney_p(&a, &b) < 1e-10);
        let c: Vec<f64> = (0..50).map(|i| (i * 2) as f64).collect();
        let d: Vec<f64> = (0..50).map(|i| (i * 2 + 1) as f64).collect();
        assert!(mann_whitney_p(&c, &d) > 0.5);
    }

    #[test]
    fn calibration_picks_separating_threshold() {
        let labels = [false, false, true, true];
        let scores = [0.1, 0.3, 0.6, 0.7];
        assert_eq!(calibrate_threshold(&labels, &scores), 0.6);
    }
}
