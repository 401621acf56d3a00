//! Seeded synthetic corpora for tests, benchmarks and the bundled fixture.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::BiasObservation;
use crate::jury::prompt::DEFAULT_TEMPLATE;
use crate::jury::runner::{build_prompts, JudgeEndpoint, JudgeTask, JuryRunSpec, ProviderApi};
use crate::jury::stub::{score_reply, StubRequest, StubResponse};
use crate::model::{serialize_records, AnswerBundle, EvaluationRecord, EvaluatorId, ScoreDimension, ScoreVector, Split, MAX_SCORE, MIN_SCORE};

fn clamp(v: f64) -> f64 {
    v.clamp(MIN_SCORE, MAX_SCORE)
}

fn to_level(v: f64) -> f64 {
    clamp(v).round()
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite positive sd")
}

fn record(
    case_id: &str,
    agent_id: &str,
    agent_provider: Option<&str>,
    evaluator: EvaluatorId,
    scores: ScoreVector,
    split: Split,
) -> EvaluationRecord {
    EvaluationRecord {
        case_id: case_id.into(),
        agent_id: agent_id.into(),
        agent_provider: agent_provider.map(str::to_string),
        evaluator,
        scores,
        repetition: 0,
        split,
        ward_agreement: None,
    }
}

/// Panel scores on the integer scale and one judge scoring
/// round(clamp(clamp(panel - shift) + noise)) on every dimension.
///
/// `n_records` >= `n_cases`; the first `n_records - n_cases` cases carry a
/// second agent.
pub fn calibration_corpus(
    seed: u64,
    shift: f64,
    sigma: f64,
    n_cases: usize,
    n_records: usize,
) -> (EvaluatorId, Vec<EvaluationRecord>) {
    const LEVEL_PROBS: [f64; 5] = [0.08, 0.12, 0.2, 0.3, 0.3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(sigma);
    let judge = EvaluatorId::judge("synthetic-judge", "synthetic");
    let draw_level = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in LEVEL_PROBS.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as f64 + 1.0;
            }
        }
        MAX_SCORE
    };
    let mut out = Vec::with_capacity(2 * n_records);
    for i in 0..n_records {
        let case_id = format!("c{:04}", i % n_cases);
        let agent_id = if i < n_cases { "a0" } else { "a1" };
        let mut panel = ScoreVector::new(0.0, 0.0, Some(0.0), 0.0);
        let mut judged = panel;
        for dim in ScoreDimension::ALL {
            let level = draw_level(&mut rng);
            panel.set(dim, Some(level));
            judged.set(dim, Some(to_level(clamp(level - shift) + noise.sample(&mut rng))));
        }
        out.push(record(&case_id, agent_id, None, EvaluatorId::primary_panel(), panel, Split::Calibration));
        out.push(record(&case_id, agent_id, None, judge.clone(), judged, Split::Calibration));
    }
    (judge, out)
}

/// Jury-scored agents with true composite means spaced by `gap`; every
/// dimension of every (case, agent) is the agent mean plus N(0, sigma),
/// clamped to the scale. Returns the records and (agent, true mean) pairs.
pub fn ranking_corpus(
    seed: u64,
    n_agents: usize,
    gap: f64,
    sigma: f64,
    n_cases: usize,
) -> (Vec<EvaluationRecord>, Vec<(String, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(sigma);
    let centre = 3.0;
    let truth: Vec<(String, f64)> = (0..n_agents)
        .map(|a| (format!("agent-{a:02}"), centre + gap * (a as f64 - (n_agents as f64 - 1.0) / 2.0)))
        .collect();
    let mut out = Vec::with_capacity(n_agents * n_cases);
    for c in 0..n_cases {
        let case_id = format!("c{c:04}");
        for (agent, mean) in &truth {
            let mut s = || clamp(mean + noise.sample(&mut rng));
            let scores = ScoreVector::new(s(), s(), Some(s()), s());
            out.push(record(&case_id, agent, None, EvaluatorId::jury(), scores, Split::Evaluation));
        }
    }
    (out, truth)
}

/// Three judges x three agents per case, one of each provider on both sides,
/// with judge fixed effects and a case random intercept.
pub fn bias_corpus(
    seed: u64,
    n_cases: usize,
    beta: f64,
    case_variance: f64,
    residual_variance: f64,
) -> Vec<BiasObservation> {
    const PROVIDERS: [&str; 3] = ["anthropic", "google", "openai"];
    const JUDGE_EFFECTS: [f64; 3] = [0.0, -0.25, 0.15];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(residual_variance.sqrt());
    let case_noise = (case_variance > 0.0).then(|| normal(case_variance.sqrt()));
    let judges: Vec<EvaluatorId> = PROVIDERS
        .iter()
        .map(|p| EvaluatorId::judge(format!("{p}-judge"), *p))
        .collect();
    let mut out = Vec::with_capacity(9 * n_cases);
    for c in 0..n_cases {
        let u = case_noise.map_or(0.0, |d| d.sample(&mut rng));
        for (j, judge) in judges.iter().enumerate() {
            for agent_provider in PROVIDERS {
                let same = PROVIDERS[j] == agent_provider;
                out.push(BiasObservation {
                    case_id: format!("c{c:04}"),
                    judge: judge.clone(),
                    same_provider: same,
                    score: 3.0 + JUDGE_EFFECTS[j] + if same { beta } else { 0.0 } + u + noise.sample(&mut rng),
                });
            }
        }
    }
    out
}

/// Logistic disagreement model: P(disagree | s) = 1 / (1 + exp(s - 3)),
/// with s uniform on the score range.
pub fn disagreement_samples(seed: u64, n: usize) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s: f64 = rng.random_range(MIN_SCORE..=MAX_SCORE);
            let p = 1.0 / (1.0 + (s - 3.0).exp());
            (s, rng.random::<f64>() < p)
        })
        .collect()
}

/// A judge of the bundled fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureJudge {
    pub model_id: String,
    pub provider: String,
    pub api: ProviderApi,
}

impl FixtureJudge {
    pub fn evaluator(&self) -> EvaluatorId {
        EvaluatorId::judge(&self.model_id, &self.provider)
    }

    /// Stub path this judge is served on.
    pub fn path(&self) -> String {
        format!("/{}/{}", self.provider, self.model_id)
    }
}

/// One canned judge reply, keyed by model and prompt digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CannedReply {
    pub model_id: String,
    pub prompt_sha256: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub judges: Vec<FixtureJudge>,
    pub ward_agent: String,
    /// Human panel records plus repeated-inference judge records.
    pub corpus: Vec<EvaluationRecord>,
    pub tasks: Vec<JudgeTask>,
    pub replies: Vec<CannedReply>,
    /// Judge records a run over `tasks` is expected to return.
    pub judge_records: Vec<EvaluationRecord>,
}

const CONDITIONS: [&str; 16] = [
    "Community-acquired pneumonia",
    "Acute pyelonephritis",
    "Pulmonary embolism",
    "Congestive heart failure",
    "Diabetic ketoacidosis",
    "Acute cholecystitis",
    "Cellulitis of lower limb",
    "Sepsis of unknown source",
    "Acute kidney injury",
    "Exacerbation of COPD",
    "Upper gastrointestinal bleed",
    "Ischaemic stroke",
    "Hyponatraemia",
    "Atrial fibrillation with rapid ventricular response",
    "Alcohol withdrawal",
    "Delirium secondary to urinary tract infection",
];

fn condition(i: usize) -> String {
    CONDITIONS[i % CONDITIONS.len()].to_string()
}

/// The deterministic demo corpus shipped with the repository.
///
/// 60 ward cases (calibration split, with panel agreement flags), 20 of
/// them re-scored by a second panel; 9 LLM agents on the evaluation split
/// with uneven coverage; three judges whose replies are canned per prompt;
/// three extra cases with 30 repeated judge inferences each.
pub fn fixture(seed: u64) -> Fixture {
    const N_CASES: usize = 60;
    const N_RESCORE: usize = 20;
    const STABILITY_CASES: usize = 3;
    const REPETITIONS: u32 = 30;
    let judges = vec![
        FixtureJudge {
            model_id: "claude-opus".into(),
            provider: "anthropic".into(),
            api: ProviderApi::AnthropicMessages,
        },
        FixtureJudge {
            model_id: "gemini-pro".into(),
            provider: "google".into(),
            api: ProviderApi::OpenaiChat,
        },
        FixtureJudge {
            model_id: "o3".into(),
            provider: "openai".into(),
            api: ProviderApi::OpenaiChat,
        },
    ];
    let judge_shifts = [0.9, 1.3, 0.7];
    let blunder_rate = [0.08, 0.12, 0.04];
    // (agent, provider, quality); the last agent has only a handful of cases.
    let agents: [(&str, &str, f64); 9] = [
        ("gpt-5", "openai", 3.9),
        ("claude-sonnet", "anthropic", 3.75),
        ("gemini-flash", "google", 3.6),
        ("o4-mini", "openai", 3.45),
        ("claude-haiku", "anthropic", 3.3),
        ("gemma", "google", 3.15),
        ("llama", "meta", 3.0),
        ("mistral-large", "mistral", 2.85),
        ("qwen", "alibaba", 3.2),
    ];
    let ward = "ward";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case_noise = normal(0.5);
    let item_noise = normal(0.6);
    let dim_noise = normal(0.4);
    let judge_noise = normal(0.45);
    let rescore_noise = normal(0.9);

    let mut corpus = Vec::new();
    let mut tasks = Vec::new();
    // Latent per-dimension quality of each judged item, for the judges.
    let mut latents: Vec<(usize, [f64; 4], bool)> = Vec::new();
    let case_effects: Vec<f64> = (0..N_CASES).map(|_| case_noise.sample(&mut rng)).collect();

    for c in 0..N_CASES {
        let case_id = format!("case-{:03}", c + 1);
        let reference = AnswerBundle {
            case_id: case_id.clone(),
            agent_id: "primary-panel".into(),
            primary_dx: condition(c),
            secondary_dx: vec![condition(c + 5)],
            differential_dx: vec![condition(c + 1), condition(c + 9)],
            clinical_reasoning: None,
        };
        let mut items: Vec<(&str, Option<&str>, f64, Split)> = vec![(ward, None, 3.3, Split::Calibration)];
        for (a, (agent, provider, quality)) in agents.iter().enumerate() {
            let covered = if a == agents.len() - 1 {
                c % 20 == 0
            } else {
                (c * 7 + a * 3) % 60 < 20 + 3 * a
            };
            if covered {
                items.push((agent, Some(provider), *quality, Split::Evaluation));
            }
        }
        // the second differential entry keeps every prompt within a case distinct
        for (slot, (agent, provider, quality, split)) in items.into_iter().enumerate() {
            let is_ward = agent == ward;
            let base = quality + case_effects[c] + item_noise.sample(&mut rng);
            let mut latent = [0.0; 4];
            for (i, l) in latent.iter_mut().enumerate() {
                let lift = if i == 3 { 0.5 } else { 0.0 };
                *l = base + lift + dim_noise.sample(&mut rng);
            }
            let reasoning = (!is_ward).then(|| to_level(latent[2]));
            let panel = ScoreVector::new(to_level(latent[0]), to_level(latent[1]), reasoning, to_level(latent[3]));
            let mut panel_record = record(&case_id, agent, provider, EvaluatorId::primary_panel(), panel, split);
            if is_ward {
                let p_disagree = 1.0 / (1.0 + (1.5 * (base - 3.0)).exp());
                panel_record.ward_agreement = Some(rng.random::<f64>() >= p_disagree);
                if c < N_RESCORE {
                    let mut s = |l: f64| to_level(l + rescore_noise.sample(&mut rng));
                    let mut rescore = ScoreVector::new(s(latent[0]), s(latent[1]), None, s(latent[3]));
                    if panel.safety <= 2.0 && rng.random::<f64>() < 0.25 {
                        rescore.safety = MAX_SCORE;
                    }
                    corpus.push(record(&case_id, agent, provider, EvaluatorId::rescore_panel(), rescore, split));
                }
            }
            corpus.push(panel_record);
            let k = tasks.len();
            tasks.push(JudgeTask {
                split,
                agent_provider: provider.map(str::to_string),
                reference: reference.clone(),
                tested: AnswerBundle {
                    case_id: case_id.clone(),
                    agent_id: agent.into(),
                    primary_dx: condition(c + (k % 3) * 2),
                    secondary_dx: if is_ward { vec![] } else { vec![condition(c + 5 + k % 2)] },
                    differential_dx: vec![condition(c + 1 + k % 4), condition(c + 2 + slot)],
                    clinical_reasoning: (!is_ward).then(|| format!("Findings are most consistent with {}.", condition(c + k % 3))),
                },
                metadata: Some(format!("Patient age: {}. Admission: {case_id}.", 40 + (c * 13) % 50)),
            });
            latents.push((k, latent, panel.safety <= 2.0));
        }
    }

    let prompts = build_prompts(&tasks, DEFAULT_TEMPLATE).expect("fixture tasks are valid");
    let mut replies = Vec::new();
    let mut judge_records = Vec::new();
    for (k, latent, harmful) in &latents {
        let prompt = &prompts[*k];
        let digest = hex::encode(Sha256::digest(prompt.rubric_text.as_bytes()));
        for (j, judge) in judges.iter().enumerate() {
            let mut s = |l: f64| to_level(l - judge_shifts[j] + judge_noise.sample(&mut rng));
            let mut scores = ScoreVector::new(
                s(latent[0]),
                s(latent[1]),
                prompt.requires_reasoning().then(|| s(latent[2])),
                s(latent[3]),
            );
            if *harmful && rng.random::<f64>() < blunder_rate[j] {
                scores.safety = MAX_SCORE;
            }
            let level = |v: f64| v as u8;
            replies.push(CannedReply {
                model_id: judge.model_id.clone(),
                prompt_sha256: digest.clone(),
                reply: score_reply(
                    level(scores.dx),
                    level(scores.ddx),
                    scores.reasoning.map(level),
                    level(6.0 - scores.safety),
                ),
            });
            judge_records.push(EvaluationRecord {
                case_id: prompt.case_id.clone(),
                agent_id: prompt.tested.agent_id.clone(),
                agent_provider: prompt.agent_provider.clone(),
                evaluator: judge.evaluator(),
                scores,
                repetition: 0,
                split: prompt.split,
                ward_agreement: None,
            });
        }
    }
    replies.sort_by(|a, b| (&a.model_id, &a.prompt_sha256).cmp(&(&b.model_id, &b.prompt_sha256)));

    let stability_jitter = [0.1, 0.05, 0.0];
    for c in 0..STABILITY_CASES {
        let case_id = format!("stability-{}", c + 1);
        let base: f64 = rng.random_range(2.0..=4.0f64).round();
        for (j, judge) in judges.iter().enumerate() {
            for rep in 0..REPETITIONS {
                let mut s = || {
                    if rng.random::<f64>() < stability_jitter[j] {
                        clamp(base + 1.0)
                    } else {
                        base
                    }
                };
                let mut r = record(&case_id, ward, None, judge.evaluator(), ScoreVector::new(s(), s(), None, s()), Split::Evaluation);
                r.repetition = rep;
                corpus.push(r);
            }
        }
    }

    Fixture {
        judges,
        ward_agent: ward.into(),
        corpus,
        tasks,
        replies,
        judge_records,
    }
}

/// Seed of the fixture bundled under `fixtures/`.
pub const FIXTURE_SEED: u64 = 2025;

/// Auth variable named by fixture run specs.
pub const FIXTURE_AUTH_ENV: &str = "JURY_FIXTURE_KEY";

impl Fixture {
    /// Corpus plus the judge records a judge run would add.
    pub fn judged_corpus(&self) -> Vec<EvaluationRecord> {
        let mut out = self.corpus.clone();
        out.extend(self.judge_records.iter().cloned());
        out
    }

    /// Run spec pointing every judge at `base_url` + [`FixtureJudge::path`].
    pub fn run_spec(&self, base_url: &str) -> JuryRunSpec {
        let mut spec = JuryRunSpec::new(
            self.judges
                .iter()
                .map(|j| JudgeEndpoint {
                    model_id: j.model_id.clone(),
                    provider: j.provider.clone(),
                    endpoint: format!("{}{}", base_url.trim_end_matches('/'), j.path()),
                    auth_env: FIXTURE_AUTH_ENV.into(),
                    api: j.api,
                })
                .collect(),
        );
        spec.retry_budget = 1;
        spec.backoff_base_ms = 1;
        spec.backoff_max_ms = 5;
        spec.request_timeout_secs = 10;
        spec
    }

    /// Text of each bundled file, keyed by file name.
    pub fn files(&self) -> BTreeMap<&'static str, String> {
        let tasks: String = self
            .tasks
            .iter()
            .map(|t| serde_json::to_string(t).expect("task serialises") + "\n")
            .collect();
        let report = format!(
            "schema_version = \"1\"\ncorpus = \"judged_corpus.jsonl\"\nseed = {FIXTURE_SEED}\nrescore = \"rescore-panel\"\n\n[report]\nward_agent = \"{}\"\n",
            self.ward_agent
        );
        BTreeMap::from([
            ("corpus.jsonl", serialize_records(&self.corpus)),
            ("judged_corpus.jsonl", serialize_records(&self.judged_corpus())),
            ("tasks.jsonl", tasks),
            ("replies.json", serde_json::to_string_pretty(&self.replies).expect("replies serialise") + "\n"),
            ("report.toml", report),
        ])
    }

    pub fn write_files(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, text) in self.files() {
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

/// Stub handler replaying `replies`: looks up the reply by request model and
/// prompt digest and wraps it in the response shape of the judge's API.
/// Unknown prompts get a 404.
pub fn replay_handler(
    judges: Vec<FixtureJudge>,
    replies: &[CannedReply],
) -> impl Fn(&StubRequest) -> StubResponse + Send + Sync + 'static {
    let table: BTreeMap<(String, String), String> = replies
        .iter()
        .map(|r| ((r.model_id.clone(), r.prompt_sha256.clone()), r.reply.clone()))
        .collect();
    move |req: &StubRequest| {
        let (Some(model), Some(prompt)) = (req.model(), req.prompt()) else {
            return StubResponse::status(400);
        };
        let digest = hex::encode(Sha256::digest(prompt.as_bytes()));
        let Some(reply) = table.get(&(model.to_string(), digest)) else {
            return StubResponse::status(404);
        };
        match judges.iter().find(|j| j.model_id == model).map(|j| j.api) {
            Some(ProviderApi::AnthropicMessages) => StubResponse::anthropic(reply),
            Some(ProviderApi::OpenaiChat) => StubResponse::openai(reply),
            None => StubResponse::status(404),
        }
    }
}
