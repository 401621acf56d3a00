//! Paired-evaluator agreement statistics and single-evaluator summaries.
//!
//! Every function sorts its input into a canonical order before summing, so
//! results do not depend on the order the pairs arrive in.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::StatsError;
use crate::model::{EvaluationRecord, ScoreDimension, MAX_SCORE, MIN_SCORE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Mean of (reference - other); positive means `other` scores lower.
    pub offset: f64,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub spearman_rho: f64,
    pub weighted_kappa: f64,
    pub kendall_tau: f64,
    pub exact_match_pct: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[r - 1][e - 1]`: reference bin r, evaluator bin e.
    pub counts: [[u64; 5]; 5],
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn diagonal(&self) -> u64 {
        (0..5).map(|i| self.counts[i][i]).sum()
    }

    pub fn exact_match_pct(&self) -> Result<f64, StatsError> {
        if self.total == 0 {
            return Err(StatsError::EmptySample);
        }
        Ok(100.0 * self.diagonal() as f64 / self.total as f64)
    }
}

fn canonical(pairs: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    sorted
}

fn check_range(value: f64) -> Result<(), StatsError> {
    if (MIN_SCORE..=MAX_SCORE).contains(&value) {
        Ok(())
    } else {
        Err(StatsError::OutOfRange(value))
    }
}

pub fn offset_rmse(pairs: &[(f64, f64)]) -> Result<ErrorReport, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let n = pairs.len() as f64;
    let (sum, sum_sq) = canonical(pairs)
        .iter()
        .fold((0.0, 0.0), |(s, ss), &(r, o)| {
            let d = r - o;
            (s + d, ss + d * d)
        });
    Ok(ErrorReport {
        offset: sum / n,
        rmse: (sum_sq / n).sqrt(),
        n: pairs.len(),
    })
}

/// Average (fractional) ranks, 1-based; ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of two equal-length columns.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: pairs.len(),
        });
    }
    let sorted = canonical(pairs);
    let n = sorted.len() as f64;
    let mean_x = sorted.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = sorted.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &sorted {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ConstantColumn);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: pairs.len(),
        });
    }
    let sorted = canonical(pairs);
    let xs: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let ranked: Vec<(f64, f64)> = average_ranks(&xs)
        .into_iter()
        .zip(average_ranks(&ys))
        .collect();
    pearson(&ranked)
}

/// Quadratic-weighted Cohen's kappa on the 1..=5 scale.
///
/// With weights ((i - j) / 4)^2 the observed disagreement is the mean squared
/// difference and the expected disagreement, from the product of marginals,
/// is the mean squared difference over all cross pairs. Both are evaluated
/// from moments, which also accepts unrounded jury means.
pub fn weighted_kappa(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::EmptySample);
    }
    for &(r, o) in pairs {
        check_range(r)?;
        check_range(o)?;
    }
    let sorted = canonical(pairs);
    let n = sorted.len() as f64;
    let mut observed = 0.0;
    let (mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in &sorted {
        observed += (x - y) * (x - y);
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
    }
    observed /= n;
    // (1/n^2) sum_i sum_j (x_i - y_j)^2
    let expected = (sxx + syy) / n - 2.0 * (sx / n) * (sy / n);
    if expected <= 1e-15 {
        return Err(StatsError::DegenerateAgreement);
    }
    Ok(1.0 - observed / expected)
}

/// Kendall's tau-b with tie correction.
pub fn kendall_tau(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: pairs.len(),
        });
    }
    let sorted = canonical(pairs);
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut tied_x, mut tied_y) = (0i64, 0i64);
    for i in 0..sorted.len() {
        for j in (i + 1)..sorted.len() {
            let dx = sorted[i].0.partial_cmp(&sorted[j].0).unwrap_or(Ordering::Equal);
            let dy = sorted[i].1.partial_cmp(&sorted[j].1).unwrap_or(Ordering::Equal);
            match (dx, dy) {
                (Ordering::Equal, Ordering::Equal) => {
                    tied_x += 1;
                    tied_y += 1;
                }
                (Ordering::Equal, _) => tied_x += 1,
                (_, Ordering::Equal) => tied_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n = sorted.len() as i64;
    let total = n * (n - 1) / 2;
    let denom = ((total - tied_x) as f64 * (total - tied_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(StatsError::ConstantColumn);
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Round half-up to the nearest score bin in 1..=5.
pub fn score_bin(value: f64) -> Result<usize, StatsError> {
    check_range(value)?;
    Ok(((value + 0.5).floor() as usize).clamp(1, 5))
}

pub fn confusion_matrix(pairs: &[(f64, f64)]) -> Result<ConfusionMatrix, StatsError> {
    let mut counts = [[0u64; 5]; 5];
    for &(r, o) in pairs {
        counts[score_bin(r)? - 1][score_bin(o)? - 1] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        total: pairs.len() as u64,
    })
}

/// Histogram of binned scores, `counts[s - 1]` for s in 1..=5.
pub fn score_distribution(values: &[f64]) -> Result<[u64; 5], StatsError> {
    let mut counts = [0u64; 5];
    for &v in values {
        counts[score_bin(v)? - 1] += 1;
    }
    Ok(counts)
}

pub fn agreement_report(pairs: &[(f64, f64)]) -> Result<AgreementReport, StatsError> {
    Ok(AgreementReport {
        spearman_rho: spearman_rho(pairs)?,
        weighted_kappa: weighted_kappa(pairs)?,
        kendall_tau: kendall_tau(pairs)?,
        exact_match_pct: confusion_matrix(pairs)?.exact_match_pct()?,
        n: pairs.len(),
    })
}

/// Pairwise Pearson correlations between the four dimensions of one
/// evaluator's records, using pairwise-complete observations.
/// `None` marks an undefined entry (fewer than two rows or a constant column).
pub fn inter_score_correlations(records: &[EvaluationRecord]) -> [[Option<f64>; 4]; 4] {
    let mut out = [[None; 4]; 4];
    for (i, a) in ScoreDimension::ALL.into_iter().enumerate() {
        for (j, b) in ScoreDimension::ALL.into_iter().enumerate() {
            if j < i {
                out[i][j] = out[j][i];
                continue;
            }
            let pairs: Vec<(f64, f64)> = records
                .iter()
                .filter_map(|r| Some((r.scores.get(a)?, r.scores.get(b)?)))
                .collect();
            out[i][j] = match pearson(&pairs) {
                Ok(_) if i == j => Some(1.0),
                Ok(c) => Some(c),
                Err(_) => None,
            };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvStd {
    pub cv: f64,
    pub std: f64,
}

/// Coefficient of variation and sample standard deviation (n - 1 denominator).
pub fn cv_std(values: &[f64]) -> Result<CvStd, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(StatsError::NonPositiveMean(mean));
    }
    let ss = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let std = (ss / (n - 1.0)).sqrt();
    Ok(CvStd {
        cv: std / mean,
        std,
    })
}
