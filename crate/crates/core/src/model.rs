//! Evaluation records, corpus ingestion and evaluator pairing.
//!
//! A corpus is a line-delimited JSON file, one [`EvaluationRecord`] per line,
//! each line carrying its schema version in the `v` field.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub const SCHEMA_VERSION: &str = "1";
pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreDimension {
    Dx,
    DDx,
    Reasoning,
    Safety,
}

impl ScoreDimension {
    pub const ALL: [ScoreDimension; 4] = [
        ScoreDimension::Dx,
        ScoreDimension::DDx,
        ScoreDimension::Reasoning,
        ScoreDimension::Safety,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreDimension::Dx => "Dx",
            ScoreDimension::DDx => "DDx",
            ScoreDimension::Reasoning => "Reasoning",
            ScoreDimension::Safety => "Safety",
        }
    }

    fn field(self) -> &'static str {
        match self {
            ScoreDimension::Dx => "dx",
            ScoreDimension::DDx => "ddx",
            ScoreDimension::Reasoning => "reasoning",
            ScoreDimension::Safety => "safety",
        }
    }
}

impl fmt::Display for ScoreDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.field())
    }
}

impl std::str::FromStr for ScoreDimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dx" => Ok(ScoreDimension::Dx),
            "ddx" => Ok(ScoreDimension::DDx),
            "reasoning" => Ok(ScoreDimension::Reasoning),
            "safety" => Ok(ScoreDimension::Safety),
            other => Err(format!("unknown score dimension {other:?}")),
        }
    }
}

/// The four rubric scores for one (case, agent, evaluator) triple.
///
/// Single-evaluator scores are integers in 1..=5; jury means and calibrated
/// scores are reals in the same range. `reasoning` is absent for answers
/// that carry no clinical reasoning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub dx: f64,
    pub ddx: f64,
    pub reasoning: Option<f64>,
    pub safety: f64,
}

impl ScoreVector {
    pub fn new(dx: f64, ddx: f64, reasoning: Option<f64>, safety: f64) -> Self {
        ScoreVector {
            dx,
            ddx,
            reasoning,
            safety,
        }
    }

    pub fn get(&self, dimension: ScoreDimension) -> Option<f64> {
        match dimension {
            ScoreDimension::Dx => Some(self.dx),
            ScoreDimension::DDx => Some(self.ddx),
            ScoreDimension::Reasoning => self.reasoning,
            ScoreDimension::Safety => Some(self.safety),
        }
    }

    /// Sets a dimension. Setting `Reasoning` to a value always succeeds; the
    /// mandatory dimensions ignore `None`.
    pub fn set(&mut self, dimension: ScoreDimension, value: Option<f64>) {
        match (dimension, value) {
            (ScoreDimension::Dx, Some(v)) => self.dx = v,
            (ScoreDimension::DDx, Some(v)) => self.ddx = v,
            (ScoreDimension::Safety, Some(v)) => self.safety = v,
            (ScoreDimension::Reasoning, v) => self.reasoning = v,
            (_, None) => {}
        }
    }

    /// Checks every present score lies in [1, 5], and with `integral` that it
    /// is a whole number.
    pub fn validate(&self, case_id: &str, integral: bool) -> Result<(), DataError> {
        for dim in ScoreDimension::ALL {
            let Some(value) = self.get(dim) else { continue };
            let reason = if !value.is_finite() {
                Some("not finite")
            } else if !(MIN_SCORE..=MAX_SCORE).contains(&value) {
                Some("outside 1..=5")
            } else if integral && value.fract() != 0.0 {
                Some("raw scores must be integers")
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(DataError::Score {
                    case_id: case_id.to_string(),
                    dimension: dim,
                    value,
                    reason,
                });
            }
        }
        Ok(())
    }
}

/// Converts a negative treatment risk (1..=5) to a safety score.
pub fn safety_from_risk(risk: f64) -> Result<f64, DataError> {
    if !(MIN_SCORE..=MAX_SCORE).contains(&risk) || risk.fract() != 0.0 {
        return Err(DataError::Risk(risk));
    }
    Ok(6.0 - risk)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    PrimaryPanel,
    RescorePanel,
    JudgeModel,
    /// Synthetic evaluator holding the unrounded mean of the judge models.
    Jury,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvaluatorId {
    pub kind: EvaluatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
}

impl EvaluatorId {
    pub fn primary_panel() -> Self {
        EvaluatorId {
            kind: EvaluatorKind::PrimaryPanel,
            model_id: None,
            provider: None,
        }
    }

    pub fn rescore_panel() -> Self {
        EvaluatorId {
            kind: EvaluatorKind::RescorePanel,
            model_id: None,
            provider: None,
        }
    }

    pub fn jury() -> Self {
        EvaluatorId {
            kind: EvaluatorKind::Jury,
            model_id: None,
            provider: None,
        }
    }

    pub fn judge(model_id: impl Into<String>, provider: impl Into<String>) -> Self {
        EvaluatorId {
            kind: EvaluatorKind::JudgeModel,
            model_id: Some(model_id.into()),
            provider: Some(provider.into()),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let has_model = self.model_id.as_deref().is_some_and(|m| !m.is_empty());
        let has_provider = self.provider.as_deref().is_some_and(|p| !p.is_empty());
        let is_judge = self.kind == EvaluatorKind::JudgeModel;
        if is_judge != has_model || is_judge != has_provider {
            return Err(DataError::Evaluator(format!(
                "{self}: model_id and provider must be set exactly for judge models"
            )));
        }
        Ok(())
    }

    pub fn is_judge(&self) -> bool {
        self.kind == EvaluatorKind::JudgeModel
    }
}

impl fmt::Display for EvaluatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EvaluatorKind::PrimaryPanel => f.write_str("primary-panel"),
            EvaluatorKind::RescorePanel => f.write_str("rescore-panel"),
            EvaluatorKind::Jury => f.write_str("LLM-Jury"),
            EvaluatorKind::JudgeModel => write!(
                f,
                "{}/{}",
                self.provider.as_deref().unwrap_or("?"),
                self.model_id.as_deref().unwrap_or("?")
            ),
        }
    }
}

impl std::str::FromStr for EvaluatorId {
    type Err = String;

    /// Accepts `primary-panel`, `rescore-panel`, `jury` or `provider/model`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "primary-panel" | "primary_panel" | "primary" => Ok(EvaluatorId::primary_panel()),
            "rescore-panel" | "rescore_panel" | "rescore" => Ok(EvaluatorId::rescore_panel()),
            "jury" | "LLM-Jury" => Ok(EvaluatorId::jury()),
            other => match other.split_once('/') {
                Some((provider, model)) if !provider.is_empty() && !model.is_empty() => {
                    Ok(EvaluatorId::judge(model, provider))
                }
                _ => Err(format!(
                    "unknown evaluator {other:?} (use primary-panel, rescore-panel, jury or provider/model)"
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Calibration,
    Evaluation,
}

/// One evaluator's scored judgement of one agent's answer on one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub case_id: String,
    pub agent_id: String,
    #[serde(default)]
    pub agent_provider: Option<String>,
    pub evaluator: EvaluatorId,
    pub scores: ScoreVector,
    #[serde(default)]
    pub repetition: u32,
    pub split: Split,
    #[serde(default)]
    pub ward_agreement: Option<bool>,
}

impl EvaluationRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        self.evaluator.validate()?;
        let integral = self.evaluator.kind != EvaluatorKind::Jury;
        self.scores.validate(&self.case_id, integral)?;
        if self.ward_agreement.is_some() && self.evaluator.kind != EvaluatorKind::PrimaryPanel {
            return Err(DataError::WardAgreement {
                case_id: self.case_id.clone(),
                agent_id: self.agent_id.clone(),
            });
        }
        Ok(())
    }

    pub fn key(&self) -> RecordKey<'_> {
        (
            self.case_id.as_str(),
            self.agent_id.as_str(),
            &self.evaluator,
            self.repetition,
        )
    }
}

pub type RecordKey<'a> = (&'a str, &'a str, &'a EvaluatorId, u32);

/// A diagnostic agent's answer for one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerBundle {
    pub case_id: String,
    pub agent_id: String,
    pub primary_dx: String,
    #[serde(default)]
    pub secondary_dx: Vec<String>,
    #[serde(default)]
    pub differential_dx: Vec<String>,
    #[serde(default)]
    pub clinical_reasoning: Option<String>,
}

#[derive(Serialize)]
struct VersionedRef<'a> {
    v: &'a str,
    #[serde(flatten)]
    record: &'a EvaluationRecord,
}

#[derive(Deserialize)]
struct Versioned {
    v: String,
    #[serde(flatten)]
    record: EvaluationRecord,
}

/// Parses and validates a corpus from any reader.
pub fn read_records<R: BufRead>(
    reader: R,
    schema_version: &str,
) -> Result<Vec<EvaluationRecord>, DataError> {
    let mut records = Vec::new();
    let mut seen: HashSet<(String, String, EvaluatorId, u32)> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Versioned = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.v != schema_version {
            return Err(DataError::SchemaVersion {
                line: line_no,
                found: parsed.v,
                expected: schema_version.to_string(),
            });
        }
        let record = parsed.record;
        record.validate()?;
        let key = (
            record.case_id.clone(),
            record.agent_id.clone(),
            record.evaluator.clone(),
            record.repetition,
        );
        if !seen.insert(key) {
            return Err(DataError::Duplicate {
                case_id: record.case_id,
                agent_id: record.agent_id,
                evaluator: record.evaluator.to_string(),
                repetition: record.repetition,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Reads a corpus file, validating every record.
pub fn ingest_records(
    path: impl AsRef<Path>,
    schema_version: &str,
) -> Result<Vec<EvaluationRecord>, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_records(BufReader::new(file), schema_version)
}

pub fn write_records<W: Write>(mut out: W, records: &[EvaluationRecord]) -> std::io::Result<()> {
    for record in records {
        let line = serde_json::to_string(&VersionedRef {
            v: SCHEMA_VERSION,
            record,
        })
        .map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn serialize_records(records: &[EvaluationRecord]) -> String {
    let mut buf = Vec::new();
    write_records(&mut buf, records).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// One paired observation produced by [`join_pairs`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScore {
    pub case_id: String,
    pub agent_id: String,
    pub reference: f64,
    pub other: f64,
}

/// Restricts which repetitions enter a join.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepetitionFilter {
    /// Average all repetitions of an evaluator on a (case, agent).
    #[default]
    CollapseMean,
    Only(u32),
}

/// Per (case, agent) score of one evaluator on one dimension, repetitions
/// resolved according to `filter`. Records missing the dimension are skipped.
pub fn collect_scores(
    records: &[EvaluationRecord],
    evaluator: &EvaluatorId,
    dimension: ScoreDimension,
    filter: RepetitionFilter,
) -> BTreeMap<(String, String), f64> {
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| &r.evaluator == evaluator) {
        if let RepetitionFilter::Only(rep) = filter {
            if r.repetition != rep {
                continue;
            }
        }
        let Some(value) = r.scores.get(dimension) else {
            continue;
        };
        let entry = sums
            .entry((r.case_id.clone(), r.agent_id.clone()))
            .or_insert((0.0, 0));
        entry.0 += value;
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect()
}

/// Inner-joins two evaluators on (case_id, agent_id) for one dimension.
/// `filter` selects repetitions of `other`; the reference is always
/// collapsed to its mean.
///
/// Output is ordered by (case_id, agent_id).
pub fn join_pairs(
    records: &[EvaluationRecord],
    reference: &EvaluatorId,
    other: &EvaluatorId,
    dimension: ScoreDimension,
    filter: RepetitionFilter,
) -> Result<Vec<PairedScore>, DataError> {
    let reference_scores = collect_scores(records, reference, dimension, RepetitionFilter::CollapseMean);
    let other_scores = collect_scores(records, other, dimension, filter);
    let pairs: Vec<PairedScore> = reference_scores
        .into_iter()
        .filter_map(|((case_id, agent_id), ref_score)| {
            other_scores
                .get(&(case_id.clone(), agent_id.clone()))
                .map(|&other_score| PairedScore {
                    case_id,
                    agent_id,
                    reference: ref_score,
                    other: other_score,
                })
        })
        .collect();
    if pairs.is_empty() {
        return Err(DataError::EmptySample {
            reference: reference.to_string(),
            other: other.to_string(),
            dimension,
        });
    }
    Ok(pairs)
}

/// Strips case and agent labels, leaving `(reference, other)` tuples.
pub fn values(pairs: &[PairedScore]) -> Vec<(f64, f64)> {
    pairs.iter().map(|p| (p.reference, p.other)).collect()
}

/// Distinct evaluators present in a corpus, sorted.
pub fn evaluators(records: &[EvaluationRecord]) -> Vec<EvaluatorId> {
    let mut set: Vec<EvaluatorId> = records.iter().map(|r| r.evaluator.clone()).collect();
    set.sort();
    set.dedup();
    set
}
