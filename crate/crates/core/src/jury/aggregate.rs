use std::collections::BTreeMap;

use crate::calibration::calibrated_jury_score;
use crate::error::DataError;
use crate::model::{EvaluationRecord, EvaluatorId, ScoreVector};

/// Builds synthetic `LLM-Jury` records holding the unrounded per-dimension
/// mean of `judges`' scores for every (case, agent) any judge scored.
///
/// Repetitions of a judge are averaged first. Every listed judge must cover
/// every (case, agent).
pub fn aggregate_jury(
    records: &[EvaluationRecord],
    judges: &[EvaluatorId],
) -> Result<Vec<EvaluationRecord>, DataError> {
    if judges.is_empty() {
        return Err(DataError::Coverage("empty jury".into()));
    }
    // (case, agent) -> judge index -> (template record, summed vector, count)
    let mut grid: BTreeMap<(String, String), BTreeMap<usize, (EvaluationRecord, ScoreVector, f64)>> =
        BTreeMap::new();
    for r in records {
        let Some(j) = judges.iter().position(|j| j == &r.evaluator) else {
            continue;
        };
        let slot = grid
            .entry((r.case_id.clone(), r.agent_id.clone()))
            .or_default();
        match slot.get_mut(&j) {
            None => {
                slot.insert(j, (r.clone(), r.scores, 1.0));
            }
            Some((_, sum, n)) => {
                sum.dx += r.scores.dx;
                sum.ddx += r.scores.ddx;
                sum.safety += r.scores.safety;
                sum.reasoning = match (sum.reasoning, r.scores.reasoning) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                };
                *n += 1.0;
            }
        }
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut missing = Vec::new();
    for ((case_id, agent_id), slot) in grid {
        if slot.len() != judges.len() {
            for (j, judge) in judges.iter().enumerate() {
                if !slot.contains_key(&j) {
                    missing.push(format!("({case_id}, {agent_id}, {judge})"));
                }
            }
            continue;
        }
        let means: Vec<ScoreVector> = slot
            .values()
            .map(|(_, s, n)| ScoreVector {
                dx: s.dx / n,
                ddx: s.ddx / n,
                reasoning: s.reasoning.map(|r| r / n),
                safety: s.safety / n,
            })
            .collect();
        let scores = calibrated_jury_score(&means).map_err(|_| {
            DataError::Coverage(format!(
                "({case_id}, {agent_id}): reasoning scored by some judges only"
            ))
        })?;
        let template = &slot.values().next().expect("non-empty").0;
        out.push(EvaluationRecord {
            case_id,
            agent_id,
            agent_provider: template.agent_provider.clone(),
            evaluator: EvaluatorId::jury(),
            scores,
            repetition: 0,
            split: template.split,
            ward_agreement: None,
        });
    }
    if !missing.is_empty() {
        return Err(DataError::Coverage(missing.join(", ")));
    }
    Ok(out)
}
