//! Click-prediction metrics and the weighted training objective.

use crate::error::{Error, Result};
use crate::numerics::LOGLOSS_CLAMP;

fn check_lengths(predictions: &[f64], labels: &[f64]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("metrics need at least one example".into()));
    }
    Ok(())
}

/// Pairwise summation; the result does not depend on how a caller chunked
/// the terms as long as the order is kept.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let (a, b) = values.split_at(values.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Mean binary cross-entropy with predictions clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn logloss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let terms: Vec<f64> = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .collect();
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

/// Area under the ROC curve from the Mann-Whitney rank statistic; tied
/// scores share their average rank, so each tied positive/negative pair
/// counts one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Stats(format!(
            "AUC is undefined with {positives} positive and {negatives} negative labels"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) → average 1-based rank
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            if labels[i] > 0.5 {
                positive_rank_sum += rank;
            }
        }
        start = end;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `logloss + λ_expert·Σ expert_losses + λ_depth·depth_loss`.
pub fn total_loss(logloss: f64, expert_losses: &[f64], depth_loss: Option<f64>, lambda_expert: f64, lambda_depth: f64) -> f64 {
    logloss + lambda_expert * expert_losses.iter().sum::<f64>() + lambda_depth * depth_loss.unwrap_or(0.0)
}

/// Cross-entropy of always predicting the base rate.
pub fn constant_predictor_logloss(labels: &[f64]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("no labels".into()));
    }
    let rate = labels.iter().sum::<f64>() / labels.len() as f64;
    logloss(&vec![rate; labels.len()], labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn logloss_examples() {
        let y = [1.0, 0.0, 1.0, 0.0];
        assert!((logloss(&[0.5; 4], &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = logloss(&[1.0, 0.0, 1.0, 0.0], &y).unwrap();
        assert!((perfect - 1.000_000_05e-7).abs() < 1e-12, "{perfect}");

        let mut rng = Rng::seed(1);
        let p: Vec<f64> = (0..50).map(|_| rng.uniform(0.01, 0.99)).collect();
        let y: Vec<f64> = (0..50).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        let mut direct = 0.0;
        for i in 0..50 {
            direct -= if y[i] == 1.0 { p[i].ln() } else { (1.0 - p[i]).ln() };
        }
        assert!((logloss(&p, &y).unwrap() - direct / 50.0).abs() < 1e-12);
        assert!(matches!(logloss(&p[..3], &y[..4]), Err(Error::Input(_))));
    }

    #[test]
    fn auc_examples() {
        let y = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &y).unwrap(), 0.5);
        let s = [0.3, 0.7, 0.7, 0.1, 0.9, 0.3];
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert!((auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() < 1e-15);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::Stats(_))));
    }

    #[test]
    fn auc_random_cases_match_pairwise() {
        let mut rng = Rng::seed(2);
        for _ in 0..20 {
            let n = 2 + rng.index(40);
            // coarse scores force ties
            let s: Vec<f64> = (0..n).map(|_| rng.index(5) as f64).collect();
            let mut y: Vec<f64> = (0..n).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            y[0] = 1.0;
            y[1] = 0.0;
            assert!((auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.4, &[1.0, 1.0], Some(1.0), 0.0, 0.0), 0.4);
        // uniform routing at uniform targets: every load loss sits at 1
        assert!((total_loss(0.4, &[1.0, 1.0, 1.0], Some(1.0), 0.01, 0.02) - (0.4 + 0.03 + 0.02)).abs() < 1e-15);
        let got = total_loss(0.3, &[0.7, 1.9], Some(1.4), 0.5, 0.25);
        assert!((got - (0.3 + 0.5 * 0.7 + 0.5 * 1.9 + 0.25 * 1.4)).abs() < 1e-15);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }
}
