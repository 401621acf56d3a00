//! Seeded case-level bootstrap, paired win rates and beta-binomial exceedance.
//!
//! Resample `i` draws from its own ChaCha20 stream (`seed`, stream `i`), so
//! parallel and serial evaluation produce identical output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::StatsError;
use crate::metrics;

pub const RNG_NAME: &str = "chacha20-stream-v1";
pub const INTERVAL_METHOD: &str = "percentile";
const MAX_SKIP_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    Case,
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub unit: ResampleUnit,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        BootstrapSpec {
            n_resamples: 1000,
            level: 0.95,
            seed: 0,
            unit: ResampleUnit::Case,
        }
    }
}

impl BootstrapSpec {
    pub fn with_level(self, level: f64) -> Self {
        BootstrapSpec { level, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        BootstrapSpec { seed, ..self }
    }

    fn validate(&self) -> Result<(), StatsError> {
        if self.n_resamples == 0 {
            return Err(StatsError::Invalid("n_resamples must be >= 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(StatsError::Invalid(format!(
                "level {} outside (0, 1)",
                self.level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub skipped: usize,
    pub seed: u64,
}

/// Index draws for resample `index`: `n` picks with replacement from `0..n`.
pub fn resample_indices(seed: u64, index: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Statistic values over all resamples (in resample order), `None` where the
/// statistic was undefined.
pub fn bootstrap_distribution<T, F>(
    groups: &[T],
    statistic: F,
    spec: &BootstrapSpec,
) -> Vec<Option<f64>>
where
    T: Sync,
    F: Fn(&[&T]) -> Option<f64> + Sync,
{
    (0..spec.n_resamples)
        .into_par_iter()
        .map(|i| {
            let draw: Vec<&T> = resample_indices(spec.seed, i as u64, groups.len())
                .into_iter()
                .map(|j| &groups[j])
                .collect();
            statistic(&draw).filter(|v| v.is_finite())
        })
        .collect()
}

/// Linear-interpolation quantile of sorted data (numpy's default).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lower = pos.floor() as usize;
    let upper = pos.ceil() as usize;
    let frac = pos - lower as f64;
    sorted[lower] + (sorted[upper] - sorted[lower]) * frac
}

fn check_skips(skipped: usize, total: usize) -> Result<(), StatsError> {
    if skipped as f64 > MAX_SKIP_FRACTION * total as f64 || skipped == total {
        Err(StatsError::TooManySkipped { skipped, total })
    } else {
        Ok(())
    }
}

/// Percentile bootstrap interval over groups (normally cases).
///
/// `statistic` returns `None` when undefined on a draw; such resamples are
/// skipped and counted, and more than 10% skipped is an error.
pub fn bootstrap_ci<T, F>(
    groups: &[T],
    statistic: F,
    spec: &BootstrapSpec,
) -> Result<BootstrapInterval, StatsError>
where
    T: Sync,
    F: Fn(&[&T]) -> Option<f64> + Sync,
{
    spec.validate()?;
    if groups.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: groups.len(),
        });
    }
    let all: Vec<&T> = groups.iter().collect();
    let point = statistic(&all)
        .filter(|v| v.is_finite())
        .ok_or_else(|| StatsError::Invalid("statistic undefined on the full sample".into()))?;
    let dist = bootstrap_distribution(groups, &statistic, spec);
    let mut values: Vec<f64> = dist.iter().flatten().copied().collect();
    let skipped = dist.len() - values.len();
    check_skips(skipped, dist.len())?;
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - spec.level) / 2.0;
    Ok(BootstrapInterval {
        point,
        lo: quantile_sorted(&values, alpha),
        hi: quantile_sorted(&values, 1.0 - alpha),
        level: spec.level,
        n_resamples: spec.n_resamples,
        skipped,
        seed: spec.seed,
    })
}

/// Metric used to decide which evaluator "wins" a resample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinMetric {
    /// Smaller |offset| wins.
    Offset,
    /// Smaller RMSE wins.
    Rmse,
    Spearman,
    Kappa,
}

impl WinMetric {
    pub const ALL: [WinMetric; 4] = [
        WinMetric::Offset,
        WinMetric::Rmse,
        WinMetric::Spearman,
        WinMetric::Kappa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WinMetric::Offset => "offset",
            WinMetric::Rmse => "rmse",
            WinMetric::Spearman => "spearman_rho",
            WinMetric::Kappa => "weighted_kappa",
        }
    }

    /// Metric value on a sample of (reference, evaluator) pairs.
    pub fn evaluate(self, pairs: &[(f64, f64)]) -> Option<f64> {
        match self {
            WinMetric::Offset => metrics::offset_rmse(pairs).ok().map(|r| r.offset),
            WinMetric::Rmse => metrics::offset_rmse(pairs).ok().map(|r| r.rmse),
            WinMetric::Spearman => metrics::spearman_rho(pairs).ok(),
            WinMetric::Kappa => metrics::weighted_kappa(pairs).ok(),
        }
    }

    /// Signed advantage of `a` over `b`: positive when `a` is better.
    pub fn advantage(self, a: f64, b: f64) -> f64 {
        match self {
            WinMetric::Offset => b.abs() - a.abs(),
            WinMetric::Rmse => b - a,
            WinMetric::Spearman | WinMetric::Kappa => a - b,
        }
    }
}

/// One case's paired observations for the two evaluators being compared.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CasePairs {
    pub case_id: String,
    pub a: Vec<(f64, f64)>,
    pub b: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub metric: WinMetric,
    /// Percentage of resamples won by A; ties count half.
    pub win_pct: f64,
    /// Mean over resamples of A's advantage (positive favours A).
    pub delta: f64,
    pub n_resamples: usize,
    pub skipped: usize,
    pub seed: u64,
}

/// Paired case-level bootstrap comparison of evaluators A and B.
pub fn bootstrap_win_rate(
    cases: &[CasePairs],
    metric: WinMetric,
    spec: &BootstrapSpec,
) -> Result<WinRateReport, StatsError> {
    spec.validate()?;
    if cases.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: cases.len(),
        });
    }
    let outcomes: Vec<Option<(f64, f64)>> = (0..spec.n_resamples)
        .into_par_iter()
        .map(|i| {
            let idx = resample_indices(spec.seed, i as u64, cases.len());
            let a: Vec<(f64, f64)> = idx.iter().flat_map(|&j| cases[j].a.iter().copied()).collect();
            let b: Vec<(f64, f64)> = idx.iter().flat_map(|&j| cases[j].b.iter().copied()).collect();
            let ma = metric.evaluate(&a)?;
            let mb = metric.evaluate(&b)?;
            let adv = metric.advantage(ma, mb);
            let credit = if adv > 0.0 {
                1.0
            } else if adv == 0.0 {
                0.5
            } else {
                0.0
            };
            Some((credit, adv))
        })
        .collect();
    let valid: Vec<(f64, f64)> = outcomes.iter().flatten().copied().collect();
    let skipped = outcomes.len() - valid.len();
    check_skips(skipped, outcomes.len())?;
    let n = valid.len() as f64;
    Ok(WinRateReport {
        metric,
        win_pct: 100.0 * valid.iter().map(|v| v.0).sum::<f64>() / n,
        delta: valid.iter().map(|v| v.1).sum::<f64>() / n,
        n_resamples: spec.n_resamples,
        skipped,
        seed: spec.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaPosterior {
    /// Flat-prior posterior for `k` events in `n` trials.
    pub fn flat(k: u64, n: u64) -> Result<Self, StatsError> {
        if n == 0 || k > n {
            return Err(StatsError::InvalidCounts { k, n });
        }
        Ok(BetaPosterior {
            alpha: 1.0 + k as f64,
            beta: 1.0 + (n - k) as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceReport {
    /// Posterior probability that group B's rate exceeds group A's.
    pub p_exceed: f64,
    pub posterior_a: BetaPosterior,
    pub posterior_b: BetaPosterior,
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// P(p_B > p_A) for flat-prior beta posteriors, exact finite sum.
///
/// For integer alpha_B:
/// P(X_B > X_A) = sum_{i=0}^{alpha_B - 1} B(alpha_A + i, beta_A + beta_B)
///                / ((beta_B + i) B(1 + i, beta_B) B(alpha_A, beta_A)).
pub fn beta_binomial_exceedance(
    k_a: u64,
    n_a: u64,
    k_b: u64,
    n_b: u64,
) -> Result<ExceedanceReport, StatsError> {
    let pa = BetaPosterior::flat(k_a, n_a)?;
    let pb = BetaPosterior::flat(k_b, n_b)?;
    let p_exceed = if (k_a, n_a) == (k_b, n_b) {
        0.5
    } else {
        // P(X_A > X_B) summed over the integer alpha of A, then complemented.
        let mut p_a_gt_b = 0.0;
        let ln_b_b = ln_beta(pb.alpha, pb.beta);
        for i in 0..(pa.alpha as u64) {
            let i = i as f64;
            p_a_gt_b += (ln_beta(pb.alpha + i, pb.beta + pa.beta)
                - (pa.beta + i).ln()
                - ln_beta(1.0 + i, pa.beta)
                - ln_b_b)
                .exp();
        }
        (1.0 - p_a_gt_b).clamp(0.0, 1.0)
    };
    Ok(ExceedanceReport {
        p_exceed,
        posterior_a: pa,
        posterior_b: pb,
    })
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - regularized_incomplete_beta(1.0 - x, b, a);
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp() / a;
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..=500 {
        let m = m as f64;
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + num / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        f *= c * d;
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + num / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            break;
        }
    }
    front * f
}

/// Same probability as [`beta_binomial_exceedance`] by adaptive Simpson
/// quadrature of f_A(x) (1 - I_x(alpha_B, beta_B)).
pub fn beta_binomial_exceedance_quadrature(
    k_a: u64,
    n_a: u64,
    k_b: u64,
    n_b: u64,
) -> Result<f64, StatsError> {
    let pa = BetaPosterior::flat(k_a, n_a)?;
    let pb = BetaPosterior::flat(k_b, n_b)?;
    let ln_norm = ln_beta(pa.alpha, pa.beta);
    let integrand = |x: f64| {
        if x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        let density =
            ((pa.alpha - 1.0) * x.ln() + (pa.beta - 1.0) * (1.0 - x).ln() - ln_norm).exp();
        density * (1.0 - regularized_incomplete_beta(x, pb.alpha, pb.beta))
    };
    // Split at many panels so each adaptive call sees a smooth piece.
    let panels = 64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = p as f64 / panels as f64;
        let hi = (p + 1) as f64 / panels as f64;
        total += adaptive_simpson(&integrand, lo, hi, 1e-12 / panels as f64, 40);
    }
    Ok(total.clamp(0.0, 1.0))
}

pub(crate) fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, depth)
}
