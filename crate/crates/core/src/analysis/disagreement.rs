use serde::{Deserialize, Serialize};

use crate::error::StatsError;
use crate::metrics::pearson;
use crate::model::{MAX_SCORE, MIN_SCORE};

pub const KDE_GRID_POINTS: usize = 256;
const KDE_PADDING: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    /// Trapezoid-rule integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Silverman's rule of thumb: 0.9 min(sd, IQR / 1.34) n^(-1/5).
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: values.len(),
        });
    }
    let sd = sample_std(values);
    if sd <= 0.0 || !sd.is_finite() {
        return Err(StatsError::ConstantColumn);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = crate::resampling::quantile_sorted(&sorted, 0.75)
        - crate::resampling::quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (values.len() as f64).powf(-0.2))
}

/// Gaussian kernel density on a 256-point grid over the score range
/// (widened to cover the data) padded by three bandwidths on each side.
pub fn gaussian_kde(values: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: values.len(),
        });
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(StatsError::Invalid(format!("bandwidth {h} must be positive"))),
        None => silverman_bandwidth(values)?,
    };
    let data_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let data_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = MIN_SCORE.min(data_min) - KDE_PADDING * h;
    let hi = MAX_SCORE.max(data_max) + KDE_PADDING * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&x| {
            values
                .iter()
                .map(|&v| {
                    let z = (x - v) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(KdeCurve {
        bandwidth: h,
        grid,
        density,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementBin {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    pub n: usize,
    pub k: usize,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementCurve {
    pub bins: Vec<DisagreementBin>,
    /// Pearson r between bin centres and empirical probabilities.
    pub pearson_r: Option<f64>,
    pub pearson_note: Option<String>,
    /// Least-squares line P(disagree) = intercept + slope * safety fitted to
    /// the individual 0/1 outcomes.
    pub linear_fit: Option<(f64, f64)>,
    pub n_agree: usize,
    pub n_disagree: usize,
    pub kde_agree: Option<KdeCurve>,
    pub kde_disagree: Option<KdeCurve>,
}

/// Unit-width bins [1,2), [2,3), [3,4), [4,5].
pub fn safety_bin(score: f64) -> Result<usize, StatsError> {
    if !(MIN_SCORE..=MAX_SCORE).contains(&score) {
        return Err(StatsError::OutOfRange(score));
    }
    Ok(((score - MIN_SCORE).floor() as usize).min(3))
}

/// Empirical P(disagreement) by safety bin, from (safety, disagreed) samples.
pub fn disagreement_curve(
    samples: &[(f64, bool)],
    bandwidth: Option<f64>,
) -> Result<DisagreementCurve, StatsError> {
    let mut bins: Vec<DisagreementBin> = (0..4)
        .map(|i| DisagreementBin {
            lo: MIN_SCORE + i as f64,
            hi: MIN_SCORE + i as f64 + 1.0,
            center: MIN_SCORE + i as f64 + 0.5,
            n: 0,
            k: 0,
            p: None,
        })
        .collect();
    for &(score, disagreed) in samples {
        let b = &mut bins[safety_bin(score)?];
        b.n += 1;
        b.k += usize::from(disagreed);
    }
    for b in &mut bins {
        b.p = (b.n > 0).then(|| b.k as f64 / b.n as f64);
    }
    let points: Vec<(f64, f64)> = bins.iter().filter_map(|b| Some((b.center, b.p?))).collect();
    if points.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: points.len(),
        });
    }
    let (pearson_r, pearson_note) = match pearson(&points) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let outcomes: Vec<(f64, f64)> = samples
        .iter()
        .map(|&(s, d)| (s, if d { 1.0 } else { 0.0 }))
        .collect();
    let linear_fit = least_squares_line(&outcomes);
    let agree: Vec<f64> = samples.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let disagree: Vec<f64> = samples.iter().filter(|s| s.1).map(|s| s.0).collect();
    Ok(DisagreementCurve {
        bins,
        pearson_r,
        pearson_note,
        linear_fit,
        n_agree: agree.len(),
        n_disagree: disagree.len(),
        kde_agree: gaussian_kde(&agree, bandwidth).ok(),
        kde_disagree: gaussian_kde(&disagree, bandwidth).ok(),
    })
}

fn least_squares_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}
