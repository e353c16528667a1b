//! Evaluation statistics: rank-based AUC and paired significance tests.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels must be 0 or 1, found {0}")]
    BadLabel(f64),
    #[error("AUC needs both classes, found only one")]
    SingleClass,
    #[error("paired test needs series of equal length >= 2, got {a} and {b}")]
    BadPairs { a: usize, b: usize },
}

/// Area under the ROC curve via midranks: Mann-Whitney U divided by
/// n_pos * n_neg, with ties counted half. Agrees exactly with the
/// all-pairs computation.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64, StatsError> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    let mut n_pos = 0usize;
    for &l in labels {
        if l == 1.0 {
            n_pos += 1;
        } else if l != 0.0 {
            return Err(StatsError::BadLabel(l));
        }
    }
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks over tie groups; ranks are 1-based.
    let mut rank_pos_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1.0 {
                rank_pos_sum += midrank;
            }
        }
        i = j;
    }
    let u = rank_pos_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Significance test outcome. `p` is `None` when the differences have
/// zero variance (the statistic is undefined).
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceResult {
    pub statistic: f64,
    pub df: usize,
    pub p: Option<f64>,
    pub zero_variance: bool,
}

/// Two-sided paired t-test with df = n-1; the p-value comes from the
/// incomplete-beta form of the t CDF.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<SignificanceResult, StatsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(StatsError::BadPairs { a: a.len(), b: b.len() });
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(SignificanceResult {
            statistic: f64::NAN,
            df,
            p: None,
            zero_variance: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let x = df as f64 / (df as f64 + t * t);
    let p = beta_reg(df as f64 / 2.0, 0.5, x);
    Ok(SignificanceResult { statistic: t, df, p: Some(p), zero_variance: false })
}

/// Wilcoxon signed-rank test with the normal approximation (no tie or
/// continuity correction); zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<SignificanceResult, StatsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(StatsError::BadPairs { a: a.len(), b: b.len() });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(SignificanceResult {
            statistic: f64::NAN,
            df: 0,
            p: None,
            zero_variance: true,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = midrank;
        }
        i = j;
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0).sqrt();
    let z = (w_plus - mean) / sd;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = 2.0 * normal.cdf(-z.abs());
    Ok(SignificanceResult { statistic: z, df: n, p: Some(p.min(1.0)), zero_variance: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// All-pairs oracle: wins + half-ties over pos x neg.
    pub(crate) fn auc_brute_force(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0usize;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            if li != 1.0 {
                continue;
            }
            let _ = i;
            for (&sj, &lj) in scores.iter().zip(labels) {
                if lj != 0.0 {
                    continue;
                }
                pairs += 1;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs as f64
    }

    #[test]
    fn auc_hand_example() {
        // 4 pairs: 3 wins, 1 loss.
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn auc_perfect_and_tied() {
        let labels = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert_eq!(auc(&[0.1, 0.2], &[1.0, 1.0]).unwrap_err(), StatsError::SingleClass);
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..300 {
            let n = rng.gen_range(2..=60);
            let mut scores: Vec<f64> = Vec::with_capacity(n);
            let mut labels: Vec<f64> = Vec::with_capacity(n);
            for _ in 0..n {
                // Coarse grid forces plenty of ties.
                scores.push((rng.gen_range(0..8) as f64) / 8.0);
                labels.push(if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
            }
            if !labels.contains(&1.0) || !labels.contains(&0.0) {
                continue;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_brute_force(&scores, &labels);
            assert_eq!(fast.to_bits(), slow.to_bits(), "trial {trial}");
        }
    }

    #[test]
    fn ttest_hand_example() {
        // diffs [1,1,1,-1]: mean 0.5, sd 1 -> t = 1.0, df 3, p ~ 0.391
        let a = [1.0, 1.0, 1.0, -1.0];
        let b = [0.0, 0.0, 0.0, 0.0];
        let r = paired_ttest(&a, &b).unwrap();
        assert!((r.statistic - 1.0).abs() < 1e-12);
        assert_eq!(r.df, 3);
        let p = r.p.unwrap();
        assert!((p - 0.391).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn ttest_zero_variance_flagged() {
        let a = [0.7, 0.8, 0.9];
        let r = paired_ttest(&a, &a).unwrap();
        assert!(r.zero_variance);
        assert_eq!(r.p, None);
    }

    #[test]
    fn ttest_swap_negates_t_keeps_p() {
        let a = [0.9, 0.85, 0.8, 0.95, 0.7];
        let b = [0.8, 0.8, 0.75, 0.9, 0.72];
        let ab = paired_ttest(&a, &b).unwrap();
        let ba = paired_ttest(&b, &a).unwrap();
        assert!((ab.statistic + ba.statistic).abs() < 1e-12);
        assert_eq!(ab.p, ba.p);
    }

    #[test]
    fn wilcoxon_sanity() {
        let a = [0.9, 0.85, 0.8, 0.95, 0.7, 0.88];
        let b = [0.8, 0.8, 0.75, 0.9, 0.72, 0.8];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.p.unwrap() > 0.0 && r.p.unwrap() <= 1.0);
        // Identical series -> all zero diffs -> flagged.
        let z = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(z.zero_variance);
    }
}
