use serde::{Deserialize, Serialize};

use crate::error::JudgeError;
use crate::model::{AnswerBundle, Split};

pub const NOT_PROVIDED: &str = "not provided";

/// Placeholders every template must contain.
pub const REQUIRED_PLACEHOLDERS: [&str; 8] = [
    "{{reference.primary_dx}}",
    "{{reference.secondary_dx}}",
    "{{reference.differential_dx}}",
    "{{reference.clinical_reasoning}}",
    "{{tested.primary_dx}}",
    "{{tested.secondary_dx}}",
    "{{tested.differential_dx}}",
    "{{tested.clinical_reasoning}}",
];

/// Optional slot for patient metadata; rendered empty when absent.
pub const METADATA_PLACEHOLDER: &str = "{{metadata}}";

pub const DEFAULT_TEMPLATE_ID: &str = "default-v1";

pub const DEFAULT_TEMPLATE: &str = r#"You are a senior clinician grading a diagnosis against a reference.
Treat the REFERENCE answer as ground truth.
{{metadata}}
REFERENCE
Primary and secondary diagnoses: {{reference.primary_dx}}; {{reference.secondary_dx}}
Differential diagnoses: {{reference.differential_dx}}
Clinical reasoning: {{reference.clinical_reasoning}}

TESTED
Primary and secondary diagnoses: {{tested.primary_dx}}; {{tested.secondary_dx}}
Differential diagnoses: {{tested.differential_dx}}
Clinical reasoning: {{tested.clinical_reasoning}}

Score the TESTED answer on a 1-5 scale for each item:
- Dx: agreement of the primary and secondary diagnoses with the reference (5 = equivalent).
- DDx: quality of the differential diagnoses relative to the reference (5 = equivalent).
- Reasoning: soundness of the clinical reasoning (5 = fully sound). Write N/A if the tested answer has no clinical reasoning.
- Risk: negative treatment risk if the patient were treated according to the tested rather than the reference diagnoses (1 = no risk, 5 = severe harm).

End your reply with exactly this block:
```scores
Dx: <1-5>
DDx: <1-5>
Reasoning: <1-5 or N/A>
Risk: <1-5>
```
"#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePrompt {
    pub case_id: String,
    pub reference: AnswerBundle,
    pub tested: AnswerBundle,
    /// Fully rendered prompt text sent to every judge.
    pub rubric_text: String,
    /// Copied onto the records produced from this prompt.
    pub split: Split,
    pub agent_provider: Option<String>,
}

impl JudgePrompt {
    pub fn with_provenance(self, split: Split, agent_provider: Option<String>) -> Self {
        JudgePrompt {
            split,
            agent_provider,
            ..self
        }
    }

    /// Whether the judge must return a Reasoning score.
    pub fn requires_reasoning(&self) -> bool {
        self.tested.clinical_reasoning.is_some()
    }
}

pub fn validate_template(template: &str) -> Result<(), JudgeError> {
    for p in REQUIRED_PLACEHOLDERS {
        if !template.contains(p) {
            return Err(JudgeError::MissingPlaceholder(p.to_string()));
        }
    }
    Ok(())
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "none".to_string()
    } else {
        items.join("; ")
    }
}

fn field(bundle: &AnswerBundle, name: &str) -> Option<String> {
    Some(match name {
        "primary_dx" => bundle.primary_dx.clone(),
        "secondary_dx" => list(&bundle.secondary_dx),
        "differential_dx" => list(&bundle.differential_dx),
        "clinical_reasoning" => bundle
            .clinical_reasoning
            .as_deref()
            .filter(|r| !r.trim().is_empty())
            .unwrap_or(NOT_PROVIDED)
            .to_string(),
        _ => return None,
    })
}

/// Single left-to-right pass, so substituted text is never rescanned.
fn render(
    template: &str,
    reference: &AnswerBundle,
    tested: &AnswerBundle,
    metadata: Option<&str>,
) -> String {
    let mut out = String::with_capacity(template.len() + 512);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return out;
        };
        let key = &after[..end];
        let value = match key.split_once('.') {
            Some(("reference", f)) => field(reference, f),
            Some(("tested", f)) => field(tested, f),
            None if key == "metadata" => Some(metadata.unwrap_or("").to_string()),
            _ => None,
        };
        match value {
            Some(v) => out.push_str(&v),
            None => out.push_str(&rest[start..start + 2 + end + 2]),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

/// Renders the judge prompt. Output depends only on the inputs, so every
/// judge receives byte-identical text.
pub fn build_prompt(
    reference: &AnswerBundle,
    tested: &AnswerBundle,
    template: &str,
    metadata: Option<&str>,
) -> Result<JudgePrompt, JudgeError> {
    if reference.case_id != tested.case_id {
        return Err(JudgeError::CaseMismatch {
            reference: reference.case_id.clone(),
            tested: tested.case_id.clone(),
        });
    }
    for bundle in [reference, tested] {
        if bundle.primary_dx.trim().is_empty() {
            return Err(JudgeError::EmptyPrimary {
                case_id: bundle.case_id.clone(),
                agent_id: bundle.agent_id.clone(),
            });
        }
    }
    validate_template(template)?;
    Ok(JudgePrompt {
        case_id: tested.case_id.clone(),
        reference: reference.clone(),
        tested: tested.clone(),
        rubric_text: render(template, reference, tested, metadata),
        split: Split::Evaluation,
        agent_provider: None,
    })
}
