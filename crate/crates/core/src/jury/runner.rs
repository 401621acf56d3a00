//! Multi-provider judge execution.
//!
//! Each (prompt, judge, repetition) job is sent to the judge's endpoint with
//! bounded parallelism. Every HTTP attempt is appended to a line-delimited
//! audit log before its reply is parsed; a later run against the same log
//! reuses answered jobs instead of re-issuing them.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::JudgeError;
use crate::jury::parse::{parse_scores, to_score_vector};
use crate::jury::prompt::JudgePrompt;
use crate::model::{EvaluationRecord, EvaluatorId, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderApi {
    /// `POST {endpoint}` with `{"model", "messages"}`, bearer auth,
    /// reply text at `choices[0].message.content`.
    #[default]
    OpenaiChat,
    /// `x-api-key` auth, reply text in `content[*].text`.
    AnthropicMessages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeEndpoint {
    pub model_id: String,
    pub provider: String,
    pub endpoint: String,
    /// Name of the environment variable holding the credential.
    pub auth_env: String,
    #[serde(default)]
    pub api: ProviderApi,
}

impl JudgeEndpoint {
    pub fn evaluator(&self) -> EvaluatorId {
        EvaluatorId::judge(&self.model_id, &self.provider)
    }
}

fn default_repetitions() -> u32 {
    1
}
fn default_parallel() -> usize {
    4
}
fn default_retry() -> u32 {
    3
}
fn default_backoff_base() -> u64 {
    500
}
fn default_backoff_max() -> u64 {
    30_000
}
fn default_timeout() -> u64 {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JuryRunSpec {
    pub judges: Vec<JudgeEndpoint>,
    pub prompt_template_id: String,
    /// Template file; the built-in template is used when absent.
    #[serde(default)]
    pub template_path: Option<PathBuf>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_retry")]
    pub retry_budget: u32,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_ms: u64,
    /// Minimum spacing between requests to the same provider.
    #[serde(default)]
    pub provider_min_interval_ms: BTreeMap<String, u64>,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
}

impl JuryRunSpec {
    pub fn new(judges: Vec<JudgeEndpoint>) -> Self {
        JuryRunSpec {
            judges,
            prompt_template_id: crate::jury::prompt::DEFAULT_TEMPLATE_ID.to_string(),
            template_path: None,
            repetitions: default_repetitions(),
            max_parallel: default_parallel(),
            retry_budget: default_retry(),
            backoff_base_ms: default_backoff_base(),
            backoff_max_ms: default_backoff_max(),
            provider_min_interval_ms: BTreeMap::new(),
            request_timeout_secs: default_timeout(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, JudgeError> {
        let spec: JuryRunSpec = toml::from_str(text).map_err(|e| JudgeError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, JudgeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| JudgeError::Spec(format!("{}: {e}", path.display())))?;
        let mut spec = Self::from_toml(&text)?;
        if let (Some(t), Some(dir)) = (&spec.template_path, path.parent()) {
            if t.is_relative() {
                spec.template_path = Some(dir.join(t));
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.judges.is_empty() {
            return Err(JudgeError::Spec("at least one judge is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for j in &self.judges {
            if j.model_id.is_empty() || j.provider.is_empty() {
                return Err(JudgeError::Spec("judge model_id and provider must be non-empty".into()));
            }
            if !seen.insert((j.model_id.as_str(), j.provider.as_str())) {
                return Err(JudgeError::Spec(format!(
                    "duplicate judge {}/{}",
                    j.provider, j.model_id
                )));
            }
        }
        if self.repetitions == 0 {
            return Err(JudgeError::Spec("repetitions must be >= 1".into()));
        }
        if self.max_parallel == 0 {
            return Err(JudgeError::Spec("max_parallel must be >= 1".into()));
        }
        Ok(())
    }

    /// Template text: the configured file, or the built-in default.
    pub fn template(&self) -> Result<String, JudgeError> {
        match &self.template_path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| JudgeError::Spec(format!("template {}: {e}", p.display()))),
            None => Ok(crate::jury::prompt::DEFAULT_TEMPLATE.to_string()),
        }
    }

    pub fn judge_ids(&self) -> Vec<EvaluatorId> {
        self.judges.iter().map(JudgeEndpoint::evaluator).collect()
    }
}

/// Identity of one judge request, stable across runs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobKey {
    pub case_id: String,
    pub agent_id: String,
    pub model_id: String,
    pub provider: String,
    pub repetition: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub key: JobKey,
    pub attempt: u32,
    pub endpoint: String,
    pub prompt_sha256: String,
    /// Request body as sent; provider sampling parameters are never set.
    pub request: Value,
    pub status: Option<u16>,
    pub response_body: Option<String>,
    /// Reply text extracted from the response body.
    pub content: Option<String>,
    pub error: Option<String>,
    pub started_ms: u64,
    pub finished_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub key: JobKey,
    pub attempts: u32,
    pub error: String,
    pub raw_text: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct JudgeRunOutput {
    pub records: Vec<EvaluationRecord>,
    pub failures: Vec<FailureRecord>,
    /// HTTP attempts made in this run (= audit entries appended).
    pub requests_issued: usize,
    /// Jobs answered from an existing audit log.
    pub resumed: usize,
}

pub fn read_audit_log(path: impl AsRef<Path>) -> Result<Vec<AuditEntry>, JudgeError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| JudgeError::Audit(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JudgeError::Audit(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| JudgeError::Audit(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn request_body(api: ProviderApi, model_id: &str, text: &str) -> Value {
    match api {
        ProviderApi::OpenaiChat => json!({
            "model": model_id,
            "messages": [{"role": "user", "content": text}],
        }),
        ProviderApi::AnthropicMessages => json!({
            "model": model_id,
            "max_tokens": 8192,
            "messages": [{"role": "user", "content": text}],
        }),
    }
}

fn extract_content(api: ProviderApi, body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    match api {
        ProviderApi::OpenaiChat => v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string),
        ProviderApi::AnthropicMessages => {
            let parts: Vec<&str> = v
                .get("content")?
                .as_array()?
                .iter()
                .filter_map(|c| c.get("text").and_then(Value::as_str))
                .collect();
            (!parts.is_empty()).then(|| parts.join("\n"))
        }
    }
}

enum Attempt {
    Content(String),
    /// Retry after backoff.
    Transient(String),
    Auth(String),
    Permanent(String),
}

struct Job<'a> {
    index: usize,
    prompt: &'a JudgePrompt,
    judge: usize,
    repetition: u32,
    key: JobKey,
}

enum Outcome {
    Record(EvaluationRecord),
    Failure(FailureRecord),
}

struct RunState<'a> {
    spec: &'a JuryRunSpec,
    client: reqwest::blocking::Client,
    credentials: Vec<Option<String>>,
    auth_failed: Vec<AtomicBool>,
    audit: Mutex<File>,
    next_slot: Mutex<HashMap<String, Instant>>,
    requests: AtomicUsize,
}

impl RunState<'_> {
    fn wait_for_slot(&self, provider: &str) {
        let Some(&interval) = self.spec.provider_min_interval_ms.get(provider) else {
            return;
        };
        let slot = {
            let mut slots = self.next_slot.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = slots.get(provider).copied().map_or(now, |s| s.max(now));
            slots.insert(provider.to_string(), slot + Duration::from_millis(interval));
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }

    fn backoff(&self, attempt: u32) {
        let exp = self
            .spec
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.spec.backoff_max_ms);
        let jitter: f64 = rand::rng().random_range(0.5..1.0);
        std::thread::sleep(Duration::from_millis((exp as f64 * jitter) as u64));
    }

    fn append_audit(&self, entry: &AuditEntry) -> Result<(), JudgeError> {
        let line = serde_json::to_string(entry).map_err(|e| JudgeError::Audit(e.to_string()))?;
        let mut file = self.audit.lock().expect("audit lock");
        writeln!(file, "{line}").map_err(|e| JudgeError::Audit(e.to_string()))?;
        file.flush().map_err(|e| JudgeError::Audit(e.to_string()))
    }

    fn send(&self, judge: &JudgeEndpoint, credential: &str, body: &Value) -> (Option<u16>, Option<String>, Attempt) {
        let mut req = self.client.post(&judge.endpoint).json(body);
        req = match judge.api {
            ProviderApi::OpenaiChat => req.bearer_auth(credential),
            ProviderApi::AnthropicMessages => req
                .header("x-api-key", credential)
                .header("anthropic-version", "2023-06-01"),
        };
        match req.send() {
            Err(e) => (None, None, Attempt::Transient(e.to_string())),
            Ok(resp) => {
                let status = resp.status().as_u16();
                let body = resp.text().unwrap_or_default();
                let attempt = match status {
                    200..=299 => match extract_content(judge.api, &body) {
                        Some(text) => Attempt::Content(text),
                        None => Attempt::Transient("response body has no reply text".into()),
                    },
                    401 | 403 => Attempt::Auth(format!("HTTP {status}")),
                    408 | 409 | 429 | 500..=599 => Attempt::Transient(format!("HTTP {status}")),
                    _ => Attempt::Permanent(format!("HTTP {status}")),
                };
                (Some(status), Some(body), attempt)
            }
        }
    }

    fn run_job(&self, job: &Job<'_>) -> Result<Outcome, JudgeError> {
        let judge = &self.spec.judges[job.judge];
        let failure = |attempts, error: String, raw_text| {
            Outcome::Failure(FailureRecord {
                key: job.key.clone(),
                attempts,
                error,
                raw_text,
            })
        };
        let Some(credential) = self.credentials[job.judge].as_deref() else {
            return Ok(failure(
                0,
                format!("auth failure: environment variable {} is not set", judge.auth_env),
                None,
            ));
        };
        let body = request_body(judge.api, &judge.model_id, &job.prompt.rubric_text);
        let prompt_sha256 = hex::encode(Sha256::digest(job.prompt.rubric_text.as_bytes()));
        let mut last_error = String::new();
        let mut last_text = None;
        for attempt in 0..=self.spec.retry_budget {
            if self.auth_failed[job.judge].load(Ordering::SeqCst) {
                return Ok(failure(attempt, format!("auth failure for judge {}", judge.evaluator()), None));
            }
            if attempt > 0 {
                self.backoff(attempt - 1);
            }
            self.wait_for_slot(&judge.provider);
            let started_ms = now_ms();
            let (status, response_body, result) = self.send(judge, credential, &body);
            self.requests.fetch_add(1, Ordering::SeqCst);
            let (content, error) = match &result {
                Attempt::Content(text) => (Some(text.clone()), None),
                Attempt::Transient(e) | Attempt::Auth(e) | Attempt::Permanent(e) => (None, Some(e.clone())),
            };
            self.append_audit(&AuditEntry {
                key: job.key.clone(),
                attempt,
                endpoint: judge.endpoint.clone(),
                prompt_sha256: prompt_sha256.clone(),
                request: body.clone(),
                status,
                response_body,
                content,
                error,
                started_ms,
                finished_ms: now_ms(),
            })?;
            match result {
                Attempt::Content(text) => match parse_scores(&text, job.prompt.requires_reasoning()) {
                    Ok(parsed) => return Ok(Outcome::Record(self.record(job, &parsed))),
                    Err(e) => {
                        last_error = format!("parse failure: {e}");
                        last_text = Some(text);
                    }
                },
                Attempt::Transient(e) => last_error = e,
                Attempt::Auth(e) => {
                    self.auth_failed[job.judge].store(true, Ordering::SeqCst);
                    return Ok(failure(attempt + 1, format!("auth failure: {e}"), None));
                }
                Attempt::Permanent(e) => return Ok(failure(attempt + 1, e, None)),
            }
        }
        Ok(failure(self.spec.retry_budget + 1, last_error, last_text))
    }

    fn record(
        &self,
        job: &Job<'_>,
        parsed: &BTreeMap<crate::model::ScoreDimension, f64>,
    ) -> EvaluationRecord {
        job_record(job.prompt, self.spec.judges[job.judge].evaluator(), job.repetition, parsed)
    }
}

fn job_record(
    prompt: &JudgePrompt,
    evaluator: EvaluatorId,
    repetition: u32,
    parsed: &BTreeMap<crate::model::ScoreDimension, f64>,
) -> EvaluationRecord {
    EvaluationRecord {
        case_id: prompt.case_id.clone(),
        agent_id: prompt.tested.agent_id.clone(),
        agent_provider: prompt.agent_provider.clone(),
        evaluator,
        scores: to_score_vector(parsed),
        repetition,
        split: prompt.split,
        ward_agreement: None,
    }
}

/// Scores every prompt with every judge `spec.repetitions` times.
///
/// Output records are ordered by (prompt, judge, repetition). Jobs whose
/// reply is already in the audit log at `audit_path` are not re-sent.
pub fn run_judge(
    spec: &JuryRunSpec,
    prompts: &[JudgePrompt],
    audit_path: &Path,
) -> Result<JudgeRunOutput, JudgeError> {
    spec.validate()?;
    let mut answered: HashMap<JobKey, String> = HashMap::new();
    for entry in read_audit_log(audit_path)? {
        if let (Some(200..=299), Some(content)) = (entry.status, entry.content) {
            answered.insert(entry.key, content);
        }
    }
    let credentials: Vec<Option<String>> = spec
        .judges
        .iter()
        .map(|j| std::env::var(&j.auth_env).ok().filter(|v| !v.is_empty()))
        .collect();
    for (j, c) in spec.judges.iter().zip(&credentials) {
        if c.is_none() {
            log::error!("judge {}: {} is not set; its jobs will fail", j.evaluator(), j.auth_env);
        }
    }

    let mut output = JudgeRunOutput::default();
    let mut pending = Vec::new();
    let mut outcomes: Vec<Option<Outcome>> = Vec::new();
    for prompt in prompts {
        for (judge_idx, judge) in spec.judges.iter().enumerate() {
            for repetition in 0..spec.repetitions {
                let key = JobKey {
                    case_id: prompt.case_id.clone(),
                    agent_id: prompt.tested.agent_id.clone(),
                    model_id: judge.model_id.clone(),
                    provider: judge.provider.clone(),
                    repetition,
                };
                let index = outcomes.len();
                let resumed = answered
                    .get(&key)
                    .and_then(|text| parse_scores(text, prompt.requires_reasoning()).ok());
                match resumed {
                    Some(parsed) => {
                        output.resumed += 1;
                        outcomes.push(Some(Outcome::Record(job_record(
                            prompt,
                            judge.evaluator(),
                            repetition,
                            &parsed,
                        ))));
                    }
                    None => {
                        outcomes.push(None);
                        pending.push(Job {
                            index,
                            prompt,
                            judge: judge_idx,
                            repetition,
                            key,
                        });
                    }
                }
            }
        }
    }

    if !pending.is_empty() {
        if let Some(parent) = audit_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| JudgeError::Audit(e.to_string()))?;
        }
        let audit = OpenOptions::new()
            .create(true)
            .append(true)
            .open(audit_path)
            .map_err(|e| JudgeError::Audit(format!("{}: {e}", audit_path.display())))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(spec.request_timeout_secs))
            .build()
            .map_err(|e| JudgeError::Http(e.to_string()))?;
        let state = RunState {
            spec,
            client,
            credentials,
            auth_failed: spec.judges.iter().map(|_| AtomicBool::new(false)).collect(),
            audit: Mutex::new(audit),
            next_slot: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
        };
        let cursor = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<Outcome, JudgeError>)>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..spec.max_parallel.min(pending.len()) {
                scope.spawn(|| loop {
                    let i = cursor.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = pending.get(i) else { break };
                    let outcome = state.run_job(job);
                    results.lock().expect("results lock").push((job.index, outcome));
                });
            }
        });
        for (index, outcome) in results.into_inner().expect("results lock") {
            outcomes[index] = Some(outcome?);
        }
        output.requests_issued = state.requests.load(Ordering::SeqCst);
    }

    for outcome in outcomes.into_iter().flatten() {
        match outcome {
            Outcome::Record(r) => output.records.push(r),
            Outcome::Failure(f) => output.failures.push(f),
        }
    }
    Ok(output)
}

/// Repeated-inference run: `repetitions` independent requests per
/// (prompt, judge), identical request bodies across repetitions.
pub fn stability_run(
    spec: &JuryRunSpec,
    prompts: &[JudgePrompt],
    repetitions: u32,
    audit_path: &Path,
) -> Result<JudgeRunOutput, JudgeError> {
    if repetitions < 2 {
        return Err(JudgeError::Spec(
            "stability runs need at least 2 repetitions".into(),
        ));
    }
    let spec = JuryRunSpec {
        repetitions,
        ..spec.clone()
    };
    run_judge(&spec, prompts, audit_path)
}

/// One line of a judge task file: the reference and tested answers for a
/// case plus the provenance copied onto resulting records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeTask {
    pub split: Split,
    #[serde(default)]
    pub agent_provider: Option<String>,
    pub reference: crate::model::AnswerBundle,
    pub tested: crate::model::AnswerBundle,
    #[serde(default)]
    pub metadata: Option<String>,
}

pub fn read_tasks(path: impl AsRef<Path>) -> Result<Vec<JudgeTask>, JudgeError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| crate::error::DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| crate::error::DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| crate::error::DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Renders prompts for every task with one template.
pub fn build_prompts(tasks: &[JudgeTask], template: &str) -> Result<Vec<JudgePrompt>, JudgeError> {
    tasks
        .iter()
        .map(|t| {
            crate::jury::prompt::build_prompt(&t.reference, &t.tested, template, t.metadata.as_deref())
                .map(|p| p.with_provenance(t.split, t.agent_provider.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let judge = |m: &str| JudgeEndpoint {
            model_id: m.into(),
            provider: "p".into(),
            endpoint: "http://localhost".into(),
            auth_env: "KEY".into(),
            api: ProviderApi::OpenaiChat,
        };
        assert!(JuryRunSpec::new(vec![]).validate().is_err());
        assert!(JuryRunSpec::new(vec![judge("a"), judge("a")]).validate().is_err());
        let mut spec = JuryRunSpec::new(vec![judge("a"), judge("b")]);
        assert!(spec.validate().is_ok());
        spec.repetitions = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_from_toml_defaults() {
        let spec = JuryRunSpec::from_toml(
            r#"
prompt_template_id = "default-v1"
[[judges]]
model_id = "o3"
provider = "openai"
endpoint = "https://api.openai.com/v1/chat/completions"
auth_env = "OPENAI_API_KEY"
"#,
        )
        .unwrap();
        assert_eq!(spec.retry_budget, 3);
        assert_eq!(spec.repetitions, 1);
        assert_eq!(spec.judges[0].api, ProviderApi::OpenaiChat);
    }

    #[test]
    fn content_extraction() {
        let openai = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(extract_content(ProviderApi::OpenaiChat, openai).as_deref(), Some("hi"));
        let anthropic = r#"{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}"#;
        assert_eq!(
            extract_content(ProviderApi::AnthropicMessages, anthropic).as_deref(),
            Some("a\nb")
        );
        assert_eq!(extract_content(ProviderApi::OpenaiChat, "nope"), None);
    }

    #[test]
    fn request_body_has_no_sampling_parameters() {
        let body = request_body(ProviderApi::OpenaiChat, "o3", "text");
        let obj = body.as_object().unwrap();
        assert!(!obj.contains_key("temperature") && !obj.contains_key("top_p"));
    }
}
