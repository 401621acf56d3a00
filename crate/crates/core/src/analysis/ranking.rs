use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::{composite_score, CompositeWeights};
use crate::error::StatsError;
use crate::metrics::kendall_tau;
use crate::model::{EvaluationRecord, EvaluatorId};
use crate::resampling::{bootstrap_ci, BootstrapSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub agent_id: String,
    pub rank: usize,
    pub mean: f64,
    pub n: usize,
    /// Bootstrap interval of the mean; absent with fewer than two cases.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRanking {
    pub evaluator: EvaluatorId,
    pub reference: EvaluatorId,
    pub top_k: usize,
    pub entries: Vec<RankEntry>,
    /// Reference-evaluator mean for each ranked agent, in `entries` order.
    pub reference_means: Vec<f64>,
    pub kendall_tau: Option<f64>,
    /// Why tau is missing, when it is.
    pub tau_error: Option<String>,
    /// Agents dropped because they fell outside the top-k by sample size
    /// or had no composite-scorable records.
    pub excluded: Vec<String>,
}

/// Composite score per agent per case for one evaluator; repetitions of the
/// same (case, agent) are averaged. Records the weights cannot score (for
/// example missing Reasoning under S4) are skipped.
pub fn agent_composites(
    records: &[EvaluationRecord],
    evaluator: &EvaluatorId,
    weights: &CompositeWeights,
) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| &r.evaluator == evaluator) {
        let Ok(score) = composite_score(&r.scores, weights) else {
            continue;
        };
        let e = sums
            .entry(r.agent_id.clone())
            .or_default()
            .entry(r.case_id.clone())
            .or_insert((0.0, 0.0));
        e.0 += score;
        e.1 += 1.0;
    }
    sums.into_iter()
        .map(|(agent, cases)| (agent, cases.into_iter().map(|(c, (s, n))| (c, s / n)).collect()))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Ranks agents by mean composite score under `evaluator`, restricted to the
/// `top_k` agents with the most `reference` evaluations, and compares the
/// ordering with `reference` by Kendall's tau-b.
pub fn rank_agents(
    records: &[EvaluationRecord],
    evaluator: &EvaluatorId,
    reference: &EvaluatorId,
    weights: &CompositeWeights,
    top_k: usize,
    spec: &BootstrapSpec,
) -> Result<AgentRanking, StatsError> {
    let scored = agent_composites(records, evaluator, weights);
    let reference_scored = agent_composites(records, reference, weights);
    let mut candidates: Vec<(&String, usize)> = reference_scored
        .iter()
        .filter(|(agent, _)| scored.get(*agent).is_some_and(|c| !c.is_empty()))
        .map(|(agent, cases)| (agent, cases.len()))
        .collect();
    if top_k == 0 || top_k > candidates.len() {
        return Err(StatsError::Invalid(format!(
            "top_k = {top_k} but {} agents are scored by both evaluators",
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let chosen: Vec<&String> = candidates.iter().take(top_k).map(|c| c.0).collect();
    let mut excluded: Vec<String> = scored
        .keys()
        .chain(reference_scored.keys())
        .filter(|a| !chosen.contains(a))
        .cloned()
        .collect();
    excluded.sort();
    excluded.dedup();
    for agent in &excluded {
        log::warn!("agent {agent} excluded from ranking");
    }

    let mut entries = Vec::with_capacity(top_k);
    for agent in &chosen {
        let values: Vec<f64> = scored[*agent].values().copied().collect();
        let (lo, hi) = if values.len() >= 2 {
            let ci = bootstrap_ci(&values, |draw: &[&f64]| {
                Some(draw.iter().copied().sum::<f64>() / draw.len() as f64)
            }, spec)?;
            (Some(ci.lo), Some(ci.hi))
        } else {
            (None, None)
        };
        entries.push(RankEntry {
            agent_id: (*agent).clone(),
            rank: 0,
            mean: mean(&values),
            n: values.len(),
            lo,
            hi,
        });
    }
    entries.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.agent_id.cmp(&b.agent_id)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    let reference_means: Vec<f64> = entries
        .iter()
        .map(|e| mean(&reference_scored[&e.agent_id].values().copied().collect::<Vec<_>>()))
        .collect();
    let pairs: Vec<(f64, f64)> = entries
        .iter()
        .zip(&reference_means)
        .map(|(e, &r)| (e.mean, r))
        .collect();
    let (kendall_tau, tau_error) = match kendall_tau(&pairs) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(AgentRanking {
        evaluator: evaluator.clone(),
        reference: reference.clone(),
        top_k,
        entries,
        reference_means,
        kendall_tau,
        tau_error,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScoreVector, Split};

    fn rec(evaluator: &EvaluatorId, case: &str, agent: &str, v: f64) -> EvaluationRecord {
        EvaluationRecord {
            case_id: case.into(),
            agent_id: agent.into(),
            agent_provider: None,
            evaluator: evaluator.clone(),
            scores: ScoreVector::new(v, v, None, v),
            repetition: 0,
            split: Split::Evaluation,
            ward_agreement: None,
        }
    }

    fn spec() -> BootstrapSpec {
        BootstrapSpec::default().with_level(0.68)
    }

    #[test]
    fn two_agents_ranked_by_mean() {
        let panel = EvaluatorId::primary_panel();
        let records: Vec<_> = (0..4)
            .flat_map(|i| {
                let c = format!("c{i}");
                [rec(&panel, &c, "A", 4.0), rec(&panel, &c, "B", 3.0)]
            })
            .collect();
        let r = rank_agents(&records, &panel, &panel, &CompositeWeights::S3, 2, &spec()).unwrap();
        assert_eq!(r.entries[0].agent_id, "A");
        assert_eq!(r.entries[1].agent_id, "B");
        assert_eq!(r.kendall_tau, Some(1.0));
        assert_eq!((r.entries[0].lo, r.entries[0].hi), (Some(4.0), Some(4.0)));
    }

    #[test]
    fn identical_agents_surface_tau_error() {
        let panel = EvaluatorId::primary_panel();
        let records: Vec<_> = (0..5)
            .flat_map(|i| {
                let c = format!("c{i}");
                ["A", "B", "C"].map(|a| rec(&panel, &c, a, 3.0))
            })
            .collect();
        let r = rank_agents(&records, &panel, &panel, &CompositeWeights::S3, 3, &spec()).unwrap();
        assert!(r.kendall_tau.is_none() && r.tau_error.is_some());
        assert!(r.entries.windows(2).all(|w| w[0].lo == w[1].lo && w[0].hi == w[1].hi));
    }

    #[test]
    fn top_k_keeps_best_covered_agents() {
        let panel = EvaluatorId::primary_panel();
        let mut records: Vec<_> = (0..6).map(|i| rec(&panel, &format!("c{i}"), "A", 4.0)).collect();
        records.extend((0..5).map(|i| rec(&panel, &format!("c{i}"), "B", 3.0)));
        records.push(rec(&panel, "c0", "C", 5.0));
        let r = rank_agents(&records, &panel, &panel, &CompositeWeights::S3, 2, &spec()).unwrap();
        assert_eq!(r.excluded, vec!["C".to_string()]);
        assert!(rank_agents(&records, &panel, &panel, &CompositeWeights::S3, 4, &spec()).is_err());
    }

    #[test]
    fn affine_transform_preserves_ranking() {
        let panel = EvaluatorId::primary_panel();
        let jury = EvaluatorId::jury();
        let vals = [("A", [3.0, 4.0]), ("B", [2.0, 2.5]), ("C", [4.5, 3.5]), ("D", [1.0, 1.5])];
        let mut records = Vec::new();
        let mut shifted = Vec::new();
        for (agent, vs) in vals {
            for (i, v) in vs.iter().enumerate() {
                records.push(rec(&panel, &format!("c{i}"), agent, *v));
                records.push(rec(&jury, &format!("c{i}"), agent, *v));
                shifted.push(rec(&panel, &format!("c{i}"), agent, *v));
                shifted.push(rec(&jury, &format!("c{i}"), agent, 1.0 + 0.5 * (*v - 1.0)));
            }
        }
        let a = rank_agents(&records, &jury, &panel, &CompositeWeights::S3, 4, &spec()).unwrap();
        let b = rank_agents(&shifted, &jury, &panel, &CompositeWeights::S3, 4, &spec()).unwrap();
        let order = |r: &AgentRanking| r.entries.iter().map(|e| e.agent_id.clone()).collect::<Vec<_>>();
        assert_eq!(order(&a), order(&b));
        assert_eq!(a.kendall_tau, b.kendall_tau);
    }
}
