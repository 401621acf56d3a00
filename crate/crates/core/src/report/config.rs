use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::CompositeWeights;
use crate::error::PipelineError;
use crate::model::{EvaluatorId, ScoreDimension};

pub const CONFIG_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub schema_version: String,
    /// Corpus JSONL; relative paths resolve against the config file.
    pub corpus: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reference")]
    pub reference: String,
    /// Second human panel, when the corpus has one.
    #[serde(default)]
    pub rescore: Option<String>,
    /// Jury members; every judge in the corpus when empty.
    #[serde(default)]
    pub jury: Vec<String>,
    #[serde(default)]
    pub judge: Option<JudgeStage>,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub ranking: RankingSection,
    #[serde(default)]
    pub report: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeStage {
    /// Jury run spec (TOML).
    pub spec: PathBuf,
    /// Judge tasks (JSONL).
    pub tasks: PathBuf,
    pub audit_log: PathBuf,
    #[serde(default = "yes")]
    pub fail_on_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSection {
    pub n_resamples: usize,
    pub level: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            n_resamples: 1000,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub folds: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection { folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankingSection {
    pub top_k: usize,
    pub weights: String,
    /// Interval level for per-agent means.
    pub level: f64,
}

impl Default for RankingSection {
    fn default() -> Self {
        RankingSection {
            top_k: 8,
            weights: "S3".into(),
            level: 0.68,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// Groups of tables the pipeline can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    /// Offset/RMSE, agreement, correlations, distributions.
    Metrics,
    Severe,
    Stability,
    Disagreement,
    /// Calibration effect and win rates.
    Calibration,
    Ranking,
    Bias,
}

impl Section {
    pub const ALL: [Section; 7] = [
        Section::Metrics,
        Section::Severe,
        Section::Stability,
        Section::Disagreement,
        Section::Calibration,
        Section::Ranking,
        Section::Bias,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Agent whose answers carry the panel's agreement flags.
    pub ward_agent: Option<String>,
    pub anonymize_salt: String,
    pub formats: Vec<TableFormat>,
    /// Dimensions for the same-provider bias table.
    pub bias_dimensions: Vec<ScoreDimension>,
    pub sections: Vec<Section>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            ward_agent: None,
            anonymize_salt: "jury-report".into(),
            formats: vec![TableFormat::Csv, TableFormat::Markdown],
            bias_dimensions: ScoreDimension::ALL.to_vec(),
            sections: Section::ALL.to_vec(),
        }
    }
}

fn default_reference() -> String {
    EvaluatorId::primary_panel().to_string()
}

fn yes() -> bool {
    true
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ReportConfig {
    /// Parses a config; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: ReportConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        resolve(base_dir, &mut cfg.corpus);
        if let Some(j) = &mut cfg.judge {
            resolve(base_dir, &mut j.spec);
            resolve(base_dir, &mut j.tasks);
            resolve(base_dir, &mut j.audit_log);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return err(format!(
                "schema_version: expected \"{CONFIG_SCHEMA_VERSION}\", found \"{}\"",
                self.schema_version
            ));
        }
        if self.corpus.as_os_str().is_empty() {
            return err("corpus: path is empty".into());
        }
        self.reference_id()?;
        self.rescore_id()?;
        self.jury_ids()?;
        if self.bootstrap.n_resamples == 0 {
            return err("bootstrap.n_resamples must be >= 1".into());
        }
        for (field, level) in [("bootstrap.level", self.bootstrap.level), ("ranking.level", self.ranking.level)] {
            if !(level > 0.0 && level < 1.0) {
                return err(format!("{field} must lie in (0, 1), found {level}"));
            }
        }
        if self.calibration.folds < 2 {
            return err("calibration.folds must be >= 2".into());
        }
        if self.ranking.top_k == 0 {
            return err("ranking.top_k must be >= 1".into());
        }
        self.weights()?;
        if self.report.sections.is_empty() {
            return err("report.sections must name at least one section".into());
        }
        Ok(())
    }

    pub fn reference_id(&self) -> Result<EvaluatorId, PipelineError> {
        self.reference
            .parse()
            .map_err(|e| PipelineError::Config(format!("reference: {e}")))
    }

    pub fn rescore_id(&self) -> Result<Option<EvaluatorId>, PipelineError> {
        self.rescore
            .as_deref()
            .map(|r| r.parse().map_err(|e| PipelineError::Config(format!("rescore: {e}"))))
            .transpose()
    }

    pub fn jury_ids(&self) -> Result<Vec<EvaluatorId>, PipelineError> {
        self.jury
            .iter()
            .map(|j| {
                let id: EvaluatorId = j.parse().map_err(|e| PipelineError::Config(format!("jury: {e}")))?;
                if !id.is_judge() {
                    return Err(PipelineError::Config(format!("jury: {j} is not a judge model")));
                }
                Ok(id)
            })
            .collect()
    }

    pub fn wants(&self, section: Section) -> bool {
        self.report.sections.contains(&section)
    }

    pub fn weights(&self) -> Result<CompositeWeights, PipelineError> {
        CompositeWeights::by_name(&self.ranking.weights)
            .ok_or_else(|| PipelineError::Config(format!("ranking.weights: unknown weights {}", self.ranking.weights)))
    }
}
