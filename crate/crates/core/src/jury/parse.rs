use std::collections::BTreeMap;

use crate::error::JudgeError;
use crate::model::{safety_from_risk, ScoreDimension, ScoreVector};

/// Labels in the judge's score block, in the order they map to dimensions.
/// The `Risk` label carries negative treatment risk and is stored as Safety.
const LABELS: [(&str, ScoreDimension); 4] = [
    ("dx", ScoreDimension::Dx),
    ("ddx", ScoreDimension::DDx),
    ("reasoning", ScoreDimension::Reasoning),
    ("risk", ScoreDimension::Safety),
];

fn display_label(dim: ScoreDimension) -> &'static str {
    match dim {
        ScoreDimension::Dx => "Dx",
        ScoreDimension::DDx => "DDx",
        ScoreDimension::Reasoning => "Reasoning",
        ScoreDimension::Safety => "Risk",
    }
}

/// Body of the last fenced block that contains score labels.
fn score_block(raw: &str) -> Option<&str> {
    let mut blocks = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let Some(end) = after.find("```") else { break };
        let body = &after[..end];
        // Drop the info string on the opening fence line.
        let body = body.split_once('\n').map(|(_, b)| b).unwrap_or("");
        blocks.push(body);
        rest = &after[end + 3..];
    }
    blocks
        .into_iter()
        .rev()
        .find(|b| b.to_ascii_lowercase().contains("dx"))
}

fn parse_value(label: &'static str, text: &str) -> Result<Option<f64>, JudgeError> {
    let text = text.trim().trim_end_matches(['.', ',']).trim();
    if text.eq_ignore_ascii_case("n/a") || text.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    match text.parse::<u8>() {
        Ok(v @ 1..=5) => Ok(Some(v as f64)),
        _ => Err(JudgeError::Range {
            label,
            value: text.to_string(),
        }),
    }
}

/// Extracts the four labelled integers from the fenced score block.
///
/// Returns a map keyed by dimension with Risk already converted to Safety.
/// Reasoning may be `N/A` unless `require_reasoning` is set.
pub fn parse_scores(
    raw: &str,
    require_reasoning: bool,
) -> Result<BTreeMap<ScoreDimension, f64>, JudgeError> {
    let block = score_block(raw).ok_or(JudgeError::NoScoreBlock)?;
    let mut found: BTreeMap<ScoreDimension, Option<f64>> = BTreeMap::new();
    for line in block.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((key, value)) = line.split_once([':', '=']) else {
            continue;
        };
        let key = key.trim().to_ascii_lowercase();
        if let Some(&(_, dim)) = LABELS.iter().find(|(l, _)| *l == key) {
            found.insert(dim, parse_value(display_label(dim), value)?);
        }
    }
    let mut out = BTreeMap::new();
    for (_, dim) in LABELS {
        match found.get(&dim) {
            Some(Some(v)) => {
                let v = if dim == ScoreDimension::Safety {
                    safety_from_risk(*v).map_err(|_| JudgeError::Range {
                        label: "Risk",
                        value: v.to_string(),
                    })?
                } else {
                    *v
                };
                out.insert(dim, v);
            }
            Some(None) if dim == ScoreDimension::Reasoning && !require_reasoning => {}
            Some(None) => {
                return Err(JudgeError::Range {
                    label: display_label(dim),
                    value: "N/A".into(),
                })
            }
            None if dim == ScoreDimension::Reasoning && !require_reasoning => {}
            None => return Err(JudgeError::MissingDimension(display_label(dim))),
        }
    }
    Ok(out)
}

pub fn to_score_vector(parsed: &BTreeMap<ScoreDimension, f64>) -> ScoreVector {
    ScoreVector {
        dx: parsed[&ScoreDimension::Dx],
        ddx: parsed[&ScoreDimension::DDx],
        reasoning: parsed.get(&ScoreDimension::Reasoning).copied(),
        safety: parsed[&ScoreDimension::Safety],
    }
}
