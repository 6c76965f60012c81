//! Per-sample evaluation metrics: accuracy, ROC AUC, EER and the gradient
//! cosine diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores are the predicted probability of class 1 ("fake").
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPredictions {
    scores: Vec<f64>,
    labels: Vec<usize>,
}

impl ScoredPredictions {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Metric(format!("score {s} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Metric(format!("label {l} is not binary")));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Metric("both classes must be present".into()));
        }
        Ok((pos, neg))
    }
}

/// Fraction of samples where `(score >= threshold) == label`.
pub fn accuracy(p: &ScoredPredictions, threshold: f64) -> f64 {
    let hits = p
        .scores
        .iter()
        .zip(&p.labels)
        .filter(|(&s, &l)| usize::from(s >= threshold) == l)
        .count();
    hits as f64 / p.scores.len() as f64
}

/// Mann-Whitney AUC with half credit for ties, via mid-ranks.
pub fn roc_auc(p: &ScoredPredictions) -> Result<f64> {
    let (pos, neg) = p.class_counts()?;
    let mut idx: Vec<usize> = (0..p.scores.len()).collect();
    idx.sort_by(|&a, &b| p.scores[a].total_cmp(&p.scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && p.scores[idx[j + 1]] == p.scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie group [i, j] shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let group_pos = idx[i..=j].iter().filter(|&&k| p.labels[k] == 1).count();
        pos_rank_sum += mid * group_pos as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Equal error rate, interpolated linearly between the two thresholds
/// where `FPR - FNR` changes sign. A sample is predicted fake when
/// `score >= threshold`.
pub fn eer(p: &ScoredPredictions) -> Result<f64> {
    let (pos, neg) = p.class_counts()?;
    let mut pairs: Vec<(f64, usize)> = p.scores.iter().cloned().zip(p.labels.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep thresholds upward over unique scores. At the lowest threshold
    // everything is predicted fake: FPR = 1, FNR = 0.
    let mut points = Vec::with_capacity(pairs.len() + 1);
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        points.push((1.0 - neg_below as f64 / neg as f64, pos_below as f64 / pos as f64));
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 == 1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push((0.0, 1.0));
    Ok(crossing(&points))
}

/// Intersection of the polyline `(fpr, fnr)` with `fpr == fnr`; the
/// polyline must start with `fpr >= fnr` and end with `fpr < fnr`.
pub(crate) fn crossing(points: &[(f64, f64)]) -> f64 {
    for w in points.windows(2) {
        let (f1, n1) = w[0];
        let (f2, n2) = w[1];
        let (d1, d2) = (f1 - n1, f2 - n2);
        if d1 >= 0.0 && d2 < 0.0 {
            if d1 == 0.0 {
                return f1;
            }
            let lam = d1 / (d1 - d2);
            return f1 + lam * (f2 - f1);
        }
    }
    // unreachable for well-formed input; last point always has fpr < fnr
    points.last().map(|p| p.0).unwrap_or(0.0)
}

pub fn grad_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("cosine of a zero vector is undefined".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Accuracy, AUC and EER of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub auc: f64,
    pub eer: f64,
}

impl EvalMetrics {
    pub fn compute(p: &ScoredPredictions) -> Result<Self> {
        Ok(Self { accuracy: accuracy(p, 0.5), auc: roc_auc(p)?, eer: eer(p)? })
    }
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp(s: &[f64], l: &[usize]) -> ScoredPredictions {
        ScoredPredictions::new(s.to_vec(), l.to_vec()).unwrap()
    }

    fn all_pairs_auc(p: &ScoredPredictions) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in p.labels().iter().enumerate() {
            for (j, &lj) in p.labels().iter().enumerate() {
                if li == 1 && lj == 0 {
                    den += 1.0;
                    let (a, b) = (p.scores()[i], p.scores()[j]);
                    if a > b {
                        num += 1.0;
                    } else if a == b {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&sp(&[0.9, 0.1, 0.7], &[1, 0, 1]), 0.5), 1.0);
        // ties at the threshold count as "fake"
        assert_eq!(accuracy(&sp(&[0.5; 4], &[0, 1, 0, 1]), 0.5), 0.5);
    }

    #[test]
    fn accuracy_matches_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
        let l: Vec<usize> = (0..100).map(|_| rng.gen_range(0..2)).collect();
        let mut hits = 0;
        for i in 0..100 {
            let pred = if s[i] >= 0.5 { 1 } else { 0 };
            if pred == l[i] {
                hits += 1;
            }
        }
        assert_eq!(accuracy(&sp(&s, &l), 0.5), hits as f64 / 100.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&sp(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&sp(&[0.3; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
        assert!(matches!(roc_auc(&sp(&[0.1, 0.2], &[1, 1])), Err(Error::Metric(_))));
    }

    #[test]
    fn auc_equals_all_pairs_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let s: Vec<f64> = (0..200).map(|_| (rng.gen::<f64>() * 20.0).round() / 20.0).collect();
        let l: Vec<usize> = (0..200).map(|_| rng.gen_range(0..2)).collect();
        let p = sp(&s, &l);
        assert_eq!(roc_auc(&p).unwrap(), all_pairs_auc(&p));
    }

    #[test]
    fn eer_cases() {
        assert_eq!(eer(&sp(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(eer(&sp(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1])).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let s: Vec<f64> = (0..20000).map(|_| rng.gen()).collect();
        let l: Vec<usize> = (0..20000).map(|_| rng.gen_range(0..2)).collect();
        let e = eer(&sp(&s, &l)).unwrap();
        assert!((e - 0.5).abs() < 0.02, "{e}");
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        assert!((grad_cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let nv: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((grad_cosine(&v, &nv).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(grad_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(grad_cosine(&[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
