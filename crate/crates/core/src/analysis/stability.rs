use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::StatsError;
use crate::metrics::cv_std;
use crate::model::{collect_scores, EvaluationRecord, EvaluatorId, RepetitionFilter, ScoreDimension};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityGroup {
    pub case_id: String,
    pub agent_id: String,
    pub evaluator: String,
    pub dimension: ScoreDimension,
    pub n: usize,
    pub mean: f64,
    pub cv: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub evaluator: String,
    pub dimension: ScoreDimension,
    pub n_groups: usize,
    pub mean_cv: f64,
    pub mean_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StabilityReport {
    pub groups: Vec<StabilityGroup>,
    /// Mean over groups per (evaluator, dimension).
    pub rows: Vec<StabilityRow>,
    /// Groups dropped for having a single value.
    pub skipped: usize,
}

type GroupKey = (String, String, String, ScoreDimension);

fn summarise(values: BTreeMap<GroupKey, Vec<f64>>) -> Result<StabilityReport, StatsError> {
    let mut report = StabilityReport::default();
    for ((case_id, agent_id, evaluator, dimension), vs) in values {
        if vs.len() < 2 {
            log::warn!("stability group ({case_id}, {agent_id}, {evaluator}, {dimension}) has one repetition; skipped");
            report.skipped += 1;
            continue;
        }
        let cs = cv_std(&vs)?;
        report.groups.push(StabilityGroup {
            case_id,
            agent_id,
            evaluator,
            dimension,
            n: vs.len(),
            mean: vs.iter().sum::<f64>() / vs.len() as f64,
            cv: cs.cv,
            std: cs.std,
        });
    }
    let mut acc: BTreeMap<(String, ScoreDimension), (usize, f64, f64)> = BTreeMap::new();
    for g in &report.groups {
        let e = acc.entry((g.evaluator.clone(), g.dimension)).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += g.cv;
        e.2 += g.std;
    }
    report.rows = acc
        .into_iter()
        .map(|((evaluator, dimension), (n, cv, std))| StabilityRow {
            evaluator,
            dimension,
            n_groups: n,
            mean_cv: cv / n as f64,
            mean_std: std / n as f64,
        })
        .collect();
    Ok(report)
}

/// Repeated-inference variability of judge models: one group per
/// (case, agent, judge, dimension) across repetitions.
pub fn stability_summary(records: &[EvaluationRecord]) -> Result<StabilityReport, StatsError> {
    let mut values: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.evaluator.is_judge()) {
        for dim in ScoreDimension::ALL {
            if let Some(v) = r.scores.get(dim) {
                values
                    .entry((r.case_id.clone(), r.agent_id.clone(), r.evaluator.to_string(), dim))
                    .or_default()
                    .push(v);
            }
        }
    }
    summarise(values)
}

/// Variability between two human panels on their shared (case, agent)
/// items: each group holds one score from each panel.
pub fn panel_stability(
    records: &[EvaluationRecord],
    first: &EvaluatorId,
    second: &EvaluatorId,
) -> Result<StabilityReport, StatsError> {
    let label = format!("{first} vs {second}");
    let mut values: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for dim in ScoreDimension::ALL {
        let a = collect_scores(records, first, dim, RepetitionFilter::CollapseMean);
        let b = collect_scores(records, second, dim, RepetitionFilter::CollapseMean);
        for ((case_id, agent_id), va) in a {
            if let Some(&vb) = b.get(&(case_id.clone(), agent_id.clone())) {
                values.insert((case_id, agent_id, label.clone(), dim), vec![va, vb]);
            }
        }
    }
    if values.is_empty() {
        return Err(StatsError::EmptySample);
    }
    summarise(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScoreVector, Split};

    fn rec(evaluator: EvaluatorId, case: &str, rep: u32, v: f64) -> EvaluationRecord {
        EvaluationRecord {
            case_id: case.into(),
            agent_id: "ward".into(),
            agent_provider: None,
            evaluator,
            scores: ScoreVector::new(v, v, None, v),
            repetition: rep,
            split: Split::Evaluation,
            ward_agreement: None,
        }
    }

    #[test]
    fn deterministic_judge_has_zero_cv() {
        let j = EvaluatorId::judge("m", "p");
        let records: Vec<_> = (0..30).map(|i| rec(j.clone(), "c1", i, 4.0)).collect();
        let r = stability_summary(&records).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.groups.iter().all(|g| g.cv == 0.0 && g.std == 0.0));
    }

    #[test]
    fn twenty_nine_fours_and_one_five() {
        let j = EvaluatorId::judge("m", "p");
        let records: Vec<_> = (0..30)
            .map(|i| rec(j.clone(), "c1", i, if i == 29 { 5.0 } else { 4.0 }))
            .collect();
        let r = stability_summary(&records).unwrap();
        let mean = 121.0 / 30.0;
        let ss = 29.0 * (4.0f64 - mean).powi(2) + (5.0f64 - mean).powi(2);
        let std = (ss / 29.0).sqrt();
        let g = &r.groups[0];
        assert!((g.std - std).abs() < 1e-12);
        assert!((g.cv - std / mean).abs() < 1e-12);
    }

    #[test]
    fn two_panels_three_and_five() {
        let records = vec![
            rec(EvaluatorId::primary_panel(), "c1", 0, 3.0),
            rec(EvaluatorId::rescore_panel(), "c1", 0, 5.0),
            rec(EvaluatorId::primary_panel(), "c2", 0, 3.0),
        ];
        let r = panel_stability(&records, &EvaluatorId::primary_panel(), &EvaluatorId::rescore_panel()).unwrap();
        assert_eq!(r.groups.len(), 3);
        for g in &r.groups {
            assert!((g.std - 2f64.sqrt()).abs() < 1e-12);
            assert!((g.cv - 2f64.sqrt() / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_repetition_skipped() {
        let j = EvaluatorId::judge("m", "p");
        let mut records = vec![rec(j.clone(), "c1", 0, 4.0)];
        records.extend((0..2).map(|i| rec(j.clone(), "c2", i, 3.0)));
        let r = stability_summary(&records).unwrap();
        assert_eq!(r.skipped, 3);
        assert_eq!(r.groups.len(), 3);
    }
}
