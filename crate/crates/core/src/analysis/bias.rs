//! Same-provider scoring bias with a case random intercept.
//!
//! Model: score = mu + beta * same_provider + judge effects + u_case + e,
//! u_case ~ N(0, lambda sigma^2), e ~ N(0, sigma^2). Within a case the
//! covariance is sigma^2 (I + lambda 11'), whose inverse and determinant are
//! closed form, so the restricted likelihood profiles down to a function of
//! lambda alone and is minimised by a log-scale grid plus golden section.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::StatsError;
use crate::model::{EvaluationRecord, EvaluatorId, ScoreDimension};

const LOG_LAMBDA_MIN: f64 = -14.0;
const LOG_LAMBDA_MAX: f64 = 9.0;
const GRID_STEPS: usize = 92;
const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate {
    pub beta: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub case_variance: f64,
    pub residual_variance: f64,
    /// case_variance / residual_variance at the optimum.
    pub variance_ratio: f64,
    pub n_obs: usize,
    pub n_cases: usize,
    pub n_same_provider: usize,
}

/// One observation of the bias model.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasObservation {
    pub case_id: String,
    pub judge: EvaluatorId,
    pub same_provider: bool,
    pub score: f64,
}

/// Judge-model observations on `dimension` with a known agent provider.
/// Repetitions of a (case, agent, judge) are averaged. With `judge` set,
/// only that judge's records are used.
pub fn bias_observations(
    records: &[EvaluationRecord],
    dimension: ScoreDimension,
    judge: Option<&EvaluatorId>,
) -> Vec<BiasObservation> {
    let mut groups: BTreeMap<(String, String, EvaluatorId), (bool, f64, f64)> = BTreeMap::new();
    for r in records {
        if !r.evaluator.is_judge() || judge.is_some_and(|j| j != &r.evaluator) {
            continue;
        }
        let (Some(agent_provider), Some(score)) = (&r.agent_provider, r.scores.get(dimension)) else {
            continue;
        };
        let same = r.evaluator.provider.as_deref() == Some(agent_provider.as_str());
        let e = groups
            .entry((r.case_id.clone(), r.agent_id.clone(), r.evaluator.clone()))
            .or_insert((same, 0.0, 0.0));
        e.1 += score;
        e.2 += 1.0;
    }
    groups
        .into_iter()
        .map(|((case_id, _, judge), (same, sum, n))| BiasObservation {
            case_id,
            judge,
            same_provider: same,
            score: sum / n,
        })
        .collect()
}

struct CaseBlock {
    n: f64,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    col_sums: DVector<f64>,
    y_sum: f64,
}

struct Profile {
    objective: f64,
    beta: DVector<f64>,
    sigma2: f64,
    a_inv: DMatrix<f64>,
}

struct Problem {
    blocks: Vec<CaseBlock>,
    n_obs: usize,
    p: usize,
}

impl Problem {
    fn profile(&self, lambda: f64) -> Result<Profile, StatsError> {
        let p = self.p;
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        let mut yy = 0.0;
        let mut log_det_h = 0.0;
        for blk in &self.blocks {
            let c = lambda / (1.0 + blk.n * lambda);
            a += &blk.xtx - (&blk.col_sums * blk.col_sums.transpose()) * c;
            b += &blk.xty - &blk.col_sums * (c * blk.y_sum);
            yy += blk.yty - c * blk.y_sum * blk.y_sum;
            log_det_h += (1.0 + blk.n * lambda).ln();
        }
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| StatsError::Singular("fixed-effect design is rank deficient".into()))?;
        let beta = chol.solve(&b);
        let q = yy - beta.dot(&b);
        let dof = (self.n_obs - p) as f64;
        if q <= 0.0 {
            return Err(StatsError::Singular("zero residual sum of squares".into()));
        }
        let log_det_a: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Profile {
            objective: dof * q.ln() + log_det_h + log_det_a,
            beta,
            sigma2: q / dof,
            a_inv: chol.inverse(),
        })
    }
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Fits the bias model by restricted maximum likelihood.
pub fn same_provider_bias(observations: &[BiasObservation]) -> Result<BiasEstimate, StatsError> {
    let n_same = observations.iter().filter(|o| o.same_provider).count();
    if n_same == 0 {
        return Err(StatsError::Invalid("no same-provider observations".into()));
    }
    if n_same == observations.len() {
        return Err(StatsError::Invalid("no cross-provider observations".into()));
    }
    let mut judges: Vec<&EvaluatorId> = observations.iter().map(|o| &o.judge).collect();
    judges.sort();
    judges.dedup();
    // intercept, same-provider, then one dummy per judge after the first
    let p = 2 + judges.len() - 1;
    let mut by_case: BTreeMap<&str, Vec<&BiasObservation>> = BTreeMap::new();
    for o in observations {
        by_case.entry(o.case_id.as_str()).or_default().push(o);
    }
    if by_case.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: by_case.len(),
        });
    }
    if observations.len() <= p {
        return Err(StatsError::TooFew {
            needed: p + 1,
            got: observations.len(),
        });
    }
    let blocks = by_case
        .values()
        .map(|obs| {
            let x = DMatrix::<f64>::from_fn(obs.len(), p, |i, j| match j {
                0 => 1.0,
                1 => f64::from(u8::from(obs[i].same_provider)),
                _ => f64::from(u8::from(*judges[j - 1] == obs[i].judge)),
            });
            let y = DVector::<f64>::from_iterator(obs.len(), obs.iter().map(|o| o.score));
            CaseBlock {
                n: obs.len() as f64,
                xtx: x.transpose() * &x,
                xty: x.transpose() * &y,
                yty: y.dot(&y),
                col_sums: x.row_sum().transpose(),
                y_sum: y.sum(),
            }
        })
        .collect();
    let problem = Problem {
        blocks,
        n_obs: observations.len(),
        p,
    };

    let objective = |log_lambda: f64| {
        problem
            .profile(log_lambda.exp())
            .map(|pr| pr.objective)
            .unwrap_or(f64::INFINITY)
    };
    let step = (LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / GRID_STEPS as f64;
    let grid: Vec<(f64, f64)> = (0..=GRID_STEPS)
        .map(|i| {
            let t = LOG_LAMBDA_MIN + step * i as f64;
            (t, objective(t))
        })
        .collect();
    let (best_idx, &(best_t, best_val)) = grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty grid");
    if !best_val.is_finite() {
        // Surfaces the underlying linear-algebra failure.
        problem.profile(best_t.exp())?;
    }
    if best_idx == GRID_STEPS {
        return Err(StatsError::NotConverged(format!(
            "variance ratio at the upper search bound (log lambda = {LOG_LAMBDA_MAX}); objective {best_val}"
        )));
    }
    let zero = problem.profile(0.0)?;
    let lambda = if best_idx == 0 {
        0.0
    } else {
        let lo = grid[best_idx - 1].0;
        let hi = grid[(best_idx + 1).min(GRID_STEPS)].0;
        let t = golden_section(objective, lo, hi, 1e-10);
        if zero.objective <= objective(t) {
            0.0
        } else {
            t.exp()
        }
    };
    let fit = problem.profile(lambda)?;
    if !fit.objective.is_finite() {
        return Err(StatsError::NotConverged(format!(
            "non-finite restricted likelihood at lambda = {lambda}"
        )));
    }
    let beta = fit.beta[1];
    let std_error = (fit.sigma2 * fit.a_inv[(1, 1)]).sqrt();
    Ok(BiasEstimate {
        beta,
        std_error,
        ci95: (beta - Z_95 * std_error, beta + Z_95 * std_error),
        case_variance: lambda * fit.sigma2,
        residual_variance: fit.sigma2,
        variance_ratio: lambda,
        n_obs: observations.len(),
        n_cases: by_case.len(),
        n_same_provider: n_same,
    })
}
