use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
}

/// Area under the ROC curve via the rank-sum statistic, tied scores sharing
/// their average rank (so a tied positive/negative pair counts one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count();
        pos_rank_sum += mid_rank * pos_in_group as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Mean binary cross-entropy with predictions clamped to
/// `[clamp_eps, 1 - clamp_eps]`.
pub fn logloss(scores: &[f64], labels: &[bool], clamp_eps: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !(clamp_eps > 0.0 && clamp_eps < 0.5) {
        return Err(Error::Metric(format!(
            "clamp_eps {clamp_eps} outside (0, 0.5)"
        )));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(clamp_eps, 1.0 - clamp_eps);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Relative change of `new` against `base`, in percent.
pub fn relative_improvement(base: f64, new: f64) -> f64 {
    (new - base) / base * 100.0
}

/// Relative reduction of `new` against `base`, in percent.
pub fn relative_reduction(base: f64, new: f64) -> f64 {
    (base - new) / base * 100.0
}
