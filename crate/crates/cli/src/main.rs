//! `jury`: score, calibrate and report LLM-judge evaluations.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use jury_core::jury::{build_prompts, read_tasks, run_judge, stability_run, JuryRunSpec};
use jury_core::model::{evaluators, ingest_records, write_records, SCHEMA_VERSION};
use jury_core::report::{render_report, run_pipeline, write_bundle, ReportBundle, ReportConfig, Section};

#[derive(Parser, Debug)]
#[command(name = "jury", version, about = "Evaluate LLM judges against human reference panels")]
struct Cli {
    /// Report config (TOML); a minimal config is built from --corpus when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; markdown goes to stdout when absent.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Expected corpus schema version.
    #[arg(long, global = true, default_value = SCHEMA_VERSION)]
    schema_version: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    /// Corpus JSONL; overrides the config's corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Second human panel, e.g. rescore-panel.
    #[arg(long)]
    rescore: Option<String>,
    #[arg(long)]
    n_resamples: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a corpus and summarise its contents.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Run judge models over a task file.
    Judge {
        /// Jury run spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Judge tasks (JSONL).
        #[arg(long)]
        tasks: PathBuf,
        /// Output records (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Append-only request log; completed jobs found here are not re-sent.
        #[arg(long)]
        audit_log: Option<PathBuf>,
        /// Repeated inferences per (task, judge); overrides the spec.
        #[arg(long)]
        repetitions: Option<u32>,
        /// Exit non-zero when any job fails.
        #[arg(long)]
        fail_on_error: bool,
    },
    /// Offset, RMSE and agreement against the reference panel.
    Metrics(CorpusArgs),
    /// Per-judge isotonic calibration with k-fold evaluation.
    Calibrate {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Rank agents by composite score.
    Rank {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        top_k: Option<usize>,
        /// Composite weights: S3 or S4.
        #[arg(long)]
        weights: Option<String>,
    },
    /// Same-provider bias of each judge.
    Bias(CorpusArgs),
    /// Variability across repeated judge inferences and across panels.
    Stability(CorpusArgs),
    /// Full report.
    Report(CorpusArgs),
}

fn load_config(cli: &Cli, args: &CorpusArgs, sections: Option<&[Section]>) -> Result<ReportConfig> {
    let mut cfg = match (&cli.config, &args.corpus) {
        (Some(path), _) => ReportConfig::load(path)?,
        (None, Some(corpus)) => {
            let text = format!("schema_version = \"1\"\ncorpus = {}\n", toml_string(&corpus.to_string_lossy()));
            ReportConfig::from_toml(&text, &std::env::current_dir()?)?
        }
        (None, None) => bail!("either --config or --corpus is required"),
    };
    if cli.config.is_some() {
        if let Some(corpus) = &args.corpus {
            cfg.corpus = corpus.clone();
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(r) = &args.rescore {
        cfg.rescore = Some(r.clone());
    }
    if let Some(n) = args.n_resamples {
        cfg.bootstrap.n_resamples = n;
    }
    if let Some(sections) = sections {
        cfg.report.sections = sections.to_vec();
    }
    Ok(cfg)
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn emit(cli: &Cli, cfg: &ReportConfig, bundle: &ReportBundle) -> Result<()> {
    match &cli.out_dir {
        Some(dir) => {
            let files = write_bundle(bundle, dir, &cfg.report.formats)?;
            eprintln!("wrote {} files to {}", files.len(), dir.display());
        }
        None => print!("{}", render_report(bundle)),
    }
    Ok(())
}

/// Runs the pipeline restricted to `sections` (all configured ones when None).
fn run_sections(cli: &Cli, args: &CorpusArgs, sections: Option<&[Section]>, tweak: impl FnOnce(&mut ReportConfig)) -> Result<()> {
    let mut cfg = load_config(cli, args, sections)?;
    tweak(&mut cfg);
    cfg.validate()?;
    let bundle = run_pipeline(&cfg)?;
    emit(cli, &cfg, &bundle)
}

fn ingest(corpus: &Path, version: &str) -> Result<()> {
    let records = ingest_records(corpus, version).with_context(|| format!("reading {}", corpus.display()))?;
    let cases: BTreeSet<&str> = records.iter().map(|r| r.case_id.as_str()).collect();
    let agents: BTreeSet<&str> = records.iter().map(|r| r.agent_id.as_str()).collect();
    let summary = serde_json::json!({
        "records": records.len(),
        "cases": cases.len(),
        "agents": agents.len(),
        "evaluators": evaluators(&records).iter().map(|e| e.to_string()).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn judge(
    spec: &Path,
    tasks: &Path,
    out: &Path,
    audit_log: Option<&Path>,
    repetitions: Option<u32>,
    fail_on_error: bool,
) -> Result<ExitCode> {
    let spec = JuryRunSpec::load(spec)?;
    let tasks = read_tasks(tasks)?;
    let prompts = build_prompts(&tasks, &spec.template()?)?;
    let audit = audit_log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("audit.jsonl"));
    let result = match repetitions {
        Some(n) if n > 1 => stability_run(&spec, &prompts, n, &audit)?,
        Some(n) => run_judge(&JuryRunSpec { repetitions: n, ..spec }, &prompts, &audit)?,
        None => run_judge(&spec, &prompts, &audit)?,
    };
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_records(std::io::BufWriter::new(file), &result.records)?;
    eprintln!(
        "{} records, {} failures, {} requests, {} resumed from {}",
        result.records.len(),
        result.failures.len(),
        result.requests_issued,
        result.resumed,
        audit.display()
    );
    if !result.failures.is_empty() {
        let path = out.with_extension("failures.jsonl");
        let lines: Vec<String> = result
            .failures
            .iter()
            .map(serde_json::to_string)
            .collect::<Result<_, _>>()?;
        fs::write(&path, lines.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))?;
        for f in result.failures.iter().take(5) {
            log::error!("{} {} {}: {}", f.key.case_id, f.key.agent_id, f.key.model_id, f.error);
        }
        if fail_on_error {
            eprintln!("failed jobs written to {}", path.display());
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if cli.schema_version != SCHEMA_VERSION {
        bail!(
            "unsupported schema version {}; this build reads version {SCHEMA_VERSION}",
            cli.schema_version
        );
    }
    match &cli.command {
        Command::Ingest { corpus } => ingest(corpus, &cli.schema_version)?,
        Command::Judge {
            spec,
            tasks,
            out,
            audit_log,
            repetitions,
            fail_on_error,
        } => return judge(spec, tasks, out, audit_log.as_deref(), *repetitions, *fail_on_error),
        Command::Metrics(args) => run_sections(cli, args, Some(&[Section::Metrics, Section::Severe]), |_| {})?,
        Command::Calibrate { corpus, folds } => run_sections(cli, corpus, Some(&[Section::Calibration]), |cfg| {
            if let Some(k) = folds {
                cfg.calibration.folds = *k;
            }
        })?,
        Command::Rank { corpus, top_k, weights } => {
            run_sections(cli, corpus, Some(&[Section::Calibration, Section::Ranking]), |cfg| {
                if let Some(k) = top_k {
                    cfg.ranking.top_k = *k;
                }
                if let Some(w) = weights {
                    cfg.ranking.weights = w.clone();
                }
            })?
        }
        Command::Bias(args) => run_sections(cli, args, Some(&[Section::Bias]), |_| {})?,
        Command::Stability(args) => run_sections(cli, args, Some(&[Section::Stability]), |_| {})?,
        Command::Report(args) => run_sections(cli, args, None, |_| {})?,
    }
    Ok(ExitCode::SUCCESS)
}
