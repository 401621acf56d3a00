use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{ReportConfig, Section};
use super::table::{Cell, Provenance, Table};
use crate::analysis::{
    bias_observations, disagreement_curve, panel_stability, rank_agents, same_provider_bias, severe_error_flags,
    severe_overlap, stability_summary, SevereErrorReport, StabilityReport,
};
use crate::calibration::{
    calibrate_records, composite_score, kfold_calibrate, CalibrationMap, CompositeWeights, FoldAssignment,
    KFoldResult,
};
use crate::error::PipelineError;
use crate::jury::{aggregate_jury, build_prompts, read_tasks, run_judge, JuryRunSpec};
use crate::metrics::{
    confusion_matrix, inter_score_correlations, kendall_tau, offset_rmse, score_distribution, spearman_rho,
    weighted_kappa,
};
use crate::model::{
    collect_scores, evaluators, ingest_records, join_pairs, serialize_records, values, EvaluationRecord, EvaluatorId,
    PairedScore, RepetitionFilter, ScoreDimension, Split, SCHEMA_VERSION,
};
use crate::resampling::{
    beta_binomial_exceedance, beta_binomial_exceedance_quadrature, bootstrap_ci, bootstrap_win_rate, BootstrapSpec,
    CasePairs, WinMetric, INTERVAL_METHOD, RNG_NAME,
};

/// Choices the report depends on that the data cannot settle.
pub const DECISIONS: [&str; 9] = [
    "jury scores are the unrounded mean of the member judges; severe-error gaps are compared on that mean",
    "real-valued scores are binned for confusion matrices by rounding half up",
    "bootstrap intervals are percentile intervals over resampled cases",
    "calibrated comparisons use out-of-fold maps on the calibration split and full-sample maps elsewhere",
    "ward disagreement bins are [1,2), [2,3), [3,4), [4,5]; a least-squares line over 0/1 outcomes is also emitted",
    "KDE bandwidth follows Silverman's rule 0.9 min(sd, IQR/1.34) n^(-1/5)",
    "same-provider bias: REML over one variance ratio with a Wald 95% interval",
    "ranking keeps the top_k agents by number of reference-scored cases, excluding the ward agent",
    "agent identifiers are replaced by M1..Mn in salted-hash order",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapMeta {
    pub rng: String,
    pub method: String,
    pub unit: String,
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub schema_version: String,
    pub tool_version: String,
    pub seed: u64,
    pub corpus_sha256: String,
    pub n_records: usize,
    pub reference: String,
    pub rescore: Option<String>,
    pub jury: Vec<String>,
    /// Digest of the judge records produced by the judge stage.
    pub judge_records_sha256: Option<String>,
    pub judge_failures: usize,
    pub bootstrap: BootstrapMeta,
    pub calibration_folds: usize,
    pub fold_seed: u64,
    pub ranking_top_k: usize,
    pub ranking_weights: String,
    pub ranking_level: f64,
    pub decisions: Vec<String>,
    /// Tables or cells left out, with the reason.
    pub omitted: Vec<String>,
    pub provenance: BTreeMap<String, Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportBundle {
    pub tables: Vec<Table>,
    pub plots: BTreeMap<String, Value>,
    pub metadata: Metadata,
    /// Additional files keyed by path relative to the output directory.
    pub files: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

fn label(e: &EvaluatorId) -> String {
    e.to_string()
}

struct Anonymizer {
    labels: BTreeMap<String, String>,
}

impl Anonymizer {
    fn new(records: &[EvaluationRecord], salt: &str, keep: Option<&str>) -> Self {
        let agents: BTreeSet<&str> = records
            .iter()
            .map(|r| r.agent_id.as_str())
            .filter(|a| Some(*a) != keep)
            .collect();
        let mut keyed: Vec<(String, &str)> = agents
            .into_iter()
            .map(|a| (hex::encode(Sha256::digest(format!("{salt}\0{a}").as_bytes())), a))
            .collect();
        keyed.sort();
        Anonymizer {
            labels: keyed
                .into_iter()
                .enumerate()
                .map(|(i, (_, a))| (a.to_string(), format!("M{}", i + 1)))
                .collect(),
        }
    }

    fn label(&self, agent: &str) -> String {
        self.labels.get(agent).cloned().unwrap_or_else(|| agent.to_string())
    }
}

struct Ctx<'a> {
    cfg: &'a ReportConfig,
    spec: BootstrapSpec,
    reference: EvaluatorId,
    rescore: Option<EvaluatorId>,
    judges: Vec<EvaluatorId>,
    anon: Anonymizer,
    omitted: Vec<String>,
}

impl Ctx<'_> {
    fn omit(&mut self, what: impl Into<String>) {
        let what = what.into();
        log::warn!("{what}");
        self.omitted.push(what);
    }

    fn provenance(&self, operation: &str) -> Provenance {
        Provenance {
            operation: operation.into(),
            seed: Some(self.spec.seed),
            n_resamples: Some(self.spec.n_resamples),
            level: Some(self.spec.level),
        }
    }
}

fn case_groups(pairs: &[PairedScore]) -> Vec<Vec<(f64, f64)>> {
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in pairs {
        groups.entry(&p.case_id).or_default().push((p.reference, p.other));
    }
    groups.into_values().collect()
}

type PairStat = fn(&[(f64, f64)]) -> Option<f64>;

fn stat_offset(p: &[(f64, f64)]) -> Option<f64> {
    offset_rmse(p).ok().map(|r| r.offset)
}
fn stat_rmse(p: &[(f64, f64)]) -> Option<f64> {
    offset_rmse(p).ok().map(|r| r.rmse)
}
fn stat_rho(p: &[(f64, f64)]) -> Option<f64> {
    spearman_rho(p).ok()
}
fn stat_kappa(p: &[(f64, f64)]) -> Option<f64> {
    weighted_kappa(p).ok()
}

/// Point estimate and interval; cells stay empty (with a note) when the
/// statistic or its interval is undefined.
fn estimate(
    groups: &[Vec<(f64, f64)>],
    stat: PairStat,
    spec: &BootstrapSpec,
    what: &str,
    notes: &mut Vec<String>,
) -> [Cell; 3] {
    let flat: Vec<(f64, f64)> = groups.iter().flatten().copied().collect();
    let Some(point) = stat(&flat) else {
        notes.push(format!("{what}: undefined on this sample"));
        return [Cell::Num(None), Cell::Num(None), Cell::Num(None)];
    };
    let ci = bootstrap_ci(
        groups,
        |draw: &[&Vec<(f64, f64)>]| {
            let flat: Vec<(f64, f64)> = draw.iter().flat_map(|g| g.iter().copied()).collect();
            stat(&flat)
        },
        spec,
    );
    match ci {
        Ok(ci) => [Cell::num(point), Cell::num(ci.lo), Cell::num(ci.hi)],
        Err(e) => {
            notes.push(format!("{what}: interval unavailable ({e})"));
            [Cell::num(point), Cell::Num(None), Cell::Num(None)]
        }
    }
}

/// Offset and RMSE against `reference` with case-bootstrap intervals, one
/// row per (evaluator, dimension) with paired data.
pub fn offset_table(
    records: &[EvaluationRecord],
    reference: &EvaluatorId,
    compared: &[(String, EvaluatorId)],
    spec: &BootstrapSpec,
) -> Table {
    let mut t = Table::new(
        "offset_rmse",
        "Offset and RMSE relative to the reference panel",
        &["evaluator", "dimension", "n", "offset", "offset_lo", "offset_hi", "rmse", "rmse_lo", "rmse_hi"],
        Provenance {
            operation: "offset_rmse + bootstrap_ci".into(),
            seed: Some(spec.seed),
            n_resamples: Some(spec.n_resamples),
            level: Some(spec.level),
        },
    );
    for (name, ev) in compared {
        for dim in ScoreDimension::ALL {
            let Ok(pairs) = join_pairs(records, reference, ev, dim, RepetitionFilter::CollapseMean) else {
                t.notes.push(format!("{name} {dim}: no paired scores"));
                continue;
            };
            let groups = case_groups(&pairs);
            let what = format!("{name} {dim}");
            let mut row = vec![Cell::text(name), Cell::text(dim.as_str()), Cell::count(pairs.len())];
            row.extend(estimate(&groups, stat_offset, spec, &format!("{what} offset"), &mut t.notes));
            row.extend(estimate(&groups, stat_rmse, spec, &format!("{what} rmse"), &mut t.notes));
            t.push(row);
        }
    }
    t
}

fn agreement_table(
    records: &[EvaluationRecord],
    reference: &EvaluatorId,
    compared: &[(String, EvaluatorId)],
    spec: &BootstrapSpec,
) -> (Table, Vec<Value>) {
    let mut t = Table::new(
        "agreement",
        "Rank correlation and quadratic-weighted kappa against the reference panel",
        &[
            "evaluator",
            "dimension",
            "n",
            "spearman_rho",
            "rho_lo",
            "rho_hi",
            "weighted_kappa",
            "kappa_lo",
            "kappa_hi",
            "kendall_tau",
            "exact_match_pct",
        ],
        Provenance {
            operation: "spearman_rho, weighted_kappa, kendall_tau, confusion_matrix + bootstrap_ci".into(),
            seed: Some(spec.seed),
            n_resamples: Some(spec.n_resamples),
            level: Some(spec.level),
        },
    );
    let mut matrices = Vec::new();
    for (name, ev) in compared {
        for dim in ScoreDimension::ALL {
            let Ok(pairs) = join_pairs(records, reference, ev, dim, RepetitionFilter::CollapseMean) else {
                continue;
            };
            let groups = case_groups(&pairs);
            let flat = values(&pairs);
            let what = format!("{name} {dim}");
            let mut row = vec![Cell::text(name), Cell::text(dim.as_str()), Cell::count(pairs.len())];
            row.extend(estimate(&groups, stat_rho, spec, &format!("{what} rho"), &mut t.notes));
            row.extend(estimate(&groups, stat_kappa, spec, &format!("{what} kappa"), &mut t.notes));
            row.push(kendall_tau(&flat).ok().into());
            match confusion_matrix(&flat) {
                Ok(cm) => {
                    row.push(cm.exact_match_pct().ok().into());
                    matrices.push(json!({
                        "evaluator": name,
                        "dimension": dim.as_str(),
                        "counts": cm.counts,
                        "total": cm.total,
                        "exact_match_pct": cm.exact_match_pct().ok(),
                    }));
                }
                Err(e) => {
                    t.notes.push(format!("{what}: confusion matrix unavailable ({e})"));
                    row.push(Cell::Num(None));
                }
            }
            t.push(row);
        }
    }
    (t, matrices)
}

fn score_distributions(records: &[EvaluationRecord], evaluators: &[(String, EvaluatorId)]) -> Value {
    let mut out = Vec::new();
    for (name, ev) in evaluators {
        for dim in ScoreDimension::ALL {
            let scores: Vec<f64> = collect_scores(records, ev, dim, RepetitionFilter::CollapseMean)
                .into_values()
                .collect();
            if let Ok(counts) = score_distribution(&scores) {
                out.push(json!({"evaluator": name, "dimension": dim.as_str(), "counts": counts, "n": scores.len()}));
            }
        }
    }
    Value::Array(out)
}

fn correlation_table(records: &[EvaluationRecord], evaluators: &[(String, EvaluatorId)]) -> Table {
    let mut t = Table::new(
        "inter_score_correlations",
        "Pearson correlation between score dimensions within each evaluator",
        &["evaluator", "dimension_a", "dimension_b", "pearson_r"],
        Provenance {
            operation: "inter_score_correlations".into(),
            ..Provenance::default()
        },
    );
    for (name, ev) in evaluators {
        let own: Vec<EvaluationRecord> = records
            .iter()
            .filter(|r| &r.evaluator == ev && r.repetition == 0)
            .cloned()
            .collect();
        let m = inter_score_correlations(&own);
        for i in 0..4 {
            for j in (i + 1)..4 {
                t.push(vec![
                    Cell::text(name),
                    Cell::text(ScoreDimension::ALL[i].as_str()),
                    Cell::text(ScoreDimension::ALL[j].as_str()),
                    m[i][j].into(),
                ]);
            }
        }
    }
    t
}

fn severe_tables(
    ctx: &mut Ctx<'_>,
    records: &[EvaluationRecord],
    compared: &[(String, EvaluatorId)],
) -> Vec<Table> {
    let mut rates = Table::new(
        "severe_errors",
        "Severe safety errors: reference safety <= 2 and evaluator at least 3 points higher",
        &["evaluator", "n_harmful", "k_severe", "rate_pct"],
        Provenance {
            operation: "severe_error_flags".into(),
            ..Provenance::default()
        },
    );
    let mut reports: Vec<(String, SevereErrorReport, bool)> = Vec::new();
    for (name, ev) in compared {
        let Ok(pairs) = join_pairs(records, &ctx.reference, ev, ScoreDimension::Safety, RepetitionFilter::CollapseMean)
        else {
            rates.notes.push(format!("{name}: no paired safety scores"));
            continue;
        };
        let report = severe_error_flags(&pairs);
        if report.rate.is_none() {
            rates.notes.push(format!("{name}: no reference-harmful items, rate undefined"));
        }
        rates.push(vec![
            Cell::text(name),
            Cell::count(report.n),
            Cell::count(report.k),
            report.rate.map(|r| 100.0 * r).into(),
        ]);
        reports.push((name.clone(), report, ev.is_judge()));
    }
    let mut tables = vec![rates];

    let find = |id: &EvaluatorId| reports.iter().find(|r| r.0 == label(id)).map(|r| &r.1);
    match (find(&EvaluatorId::jury()), ctx.rescore.as_ref().and_then(|r| find(r))) {
        (Some(jury), Some(rescore)) if jury.n > 0 && rescore.n > 0 => {
            let mut t = Table::new(
                "severe_exceedance",
                "Posterior probability that the re-score panel's severe-error rate exceeds the jury's (flat priors)",
                &["group_a", "k_a", "n_a", "group_b", "k_b", "n_b", "p_b_exceeds_a", "p_quadrature"],
                Provenance {
                    operation: "beta_binomial_exceedance".into(),
                    ..Provenance::default()
                },
            );
            let (ka, na, kb, nb) = (jury.k as u64, jury.n as u64, rescore.k as u64, rescore.n as u64);
            let exact = beta_binomial_exceedance(ka, na, kb, nb).map(|r| r.p_exceed).ok();
            let quad = beta_binomial_exceedance_quadrature(ka, na, kb, nb).ok();
            t.push(vec![
                Cell::text(label(&EvaluatorId::jury())),
                Cell::count(jury.k),
                Cell::count(jury.n),
                Cell::text(label(ctx.rescore.as_ref().expect("matched above"))),
                Cell::count(rescore.k),
                Cell::count(rescore.n),
                exact.into(),
                quad.into(),
            ]);
            tables.push(t);
        }
        _ => ctx.omit("severe_exceedance: needs jury and re-score panels with reference-harmful items"),
    }

    let voting: Vec<(String, &SevereErrorReport, bool)> =
        reports.iter().map(|(n, r, v)| (n.clone(), r, *v)).collect();
    let overlap = severe_overlap(&voting);
    let mut columns = vec!["case_id".to_string(), "agent".to_string()];
    columns.extend(overlap.evaluators.iter().cloned());
    columns.push("judge_majority".into());
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut t = Table::new(
        "severe_overlap",
        "Items with a severe error by any evaluator (Y agreed with the reference, N severe error)",
        &cols,
        Provenance {
            operation: "severe_overlap".into(),
            ..Provenance::default()
        },
    );
    for row in &overlap.rows {
        let mut cells = vec![Cell::text(&row.case_id), Cell::text(ctx.anon.label(&row.agent_id))];
        cells.extend(row.flags.iter().map(|f| {
            Cell::text(match f {
                Some(true) => "N",
                Some(false) => "Y",
                None => "",
            })
        }));
        cells.push(Cell::text(if row.majority { "yes" } else { "no" }));
        t.push(cells);
    }
    t.notes.push(format!(
        "{} items flagged by at least one judge model, {} by a majority",
        overlap.union_count, overlap.majority_count
    ));
    tables.push(t);
    tables
}

fn stability_table(ctx: &mut Ctx<'_>, records: &[EvaluationRecord]) -> Option<Table> {
    let mut reps: BTreeMap<(&str, &str, &EvaluatorId), u32> = BTreeMap::new();
    for r in records.iter().filter(|r| r.evaluator.is_judge()) {
        let e = reps.entry((&r.case_id, &r.agent_id, &r.evaluator)).or_insert(0);
        *e = (*e).max(r.repetition);
    }
    let repeated: Vec<EvaluationRecord> = records
        .iter()
        .filter(|r| {
            r.evaluator.is_judge() && reps.get(&(r.case_id.as_str(), r.agent_id.as_str(), &r.evaluator)) > Some(&0)
        })
        .cloned()
        .collect();
    let mut reports: Vec<StabilityReport> = Vec::new();
    if repeated.is_empty() {
        ctx.omit("stability: no repeated judge inferences in the corpus");
    } else {
        match stability_summary(&repeated) {
            Ok(r) => reports.push(r),
            Err(e) => ctx.omit(format!("stability (judges): {e}")),
        }
    }
    if let Some(rescore) = ctx.rescore.clone() {
        match panel_stability(records, &ctx.reference, &rescore) {
            Ok(r) => reports.push(r),
            Err(e) => ctx.omit(format!("stability (panels): {e}")),
        }
    }
    if reports.is_empty() {
        return None;
    }
    let mut t = Table::new(
        "stability",
        "Score variability across repeated inferences (judges) and across panels (humans)",
        &["evaluator", "dimension", "n_groups", "mean_cv", "mean_std"],
        Provenance {
            operation: "stability_summary / panel_stability (cv_std)".into(),
            ..Provenance::default()
        },
    );
    for report in &reports {
        for row in &report.rows {
            t.push(vec![
                Cell::text(&row.evaluator),
                Cell::text(row.dimension.as_str()),
                Cell::count(row.n_groups),
                Cell::num(row.mean_cv),
                Cell::num(row.mean_std),
            ]);
        }
    }
    Some(t)
}

fn disagreement(ctx: &mut Ctx<'_>, records: &[EvaluationRecord]) -> Option<(Vec<Table>, Value, Value)> {
    let Some(ward) = ctx.cfg.report.ward_agent.clone() else {
        ctx.omit("ward disagreement: report.ward_agent not configured");
        return None;
    };
    let jury_safety = collect_scores(records, &EvaluatorId::jury(), ScoreDimension::Safety, RepetitionFilter::CollapseMean);
    let mut samples = Vec::new();
    for r in records
        .iter()
        .filter(|r| r.agent_id == ward && r.evaluator == ctx.reference && r.repetition == 0)
    {
        let (Some(agreed), Some(&s)) = (r.ward_agreement, jury_safety.get(&(r.case_id.clone(), r.agent_id.clone())))
        else {
            continue;
        };
        samples.push((s, !agreed));
    }
    let curve = match disagreement_curve(&samples, None) {
        Ok(c) => c,
        Err(e) => {
            ctx.omit(format!("ward disagreement: {e}"));
            return None;
        }
    };
    let prov = Provenance {
        operation: "disagreement_curve".into(),
        ..Provenance::default()
    };
    let mut bins = Table::new(
        "ward_disagreement",
        "Empirical probability of panel disagreement with the ward diagnosis by jury safety score",
        &["safety_lo", "safety_hi", "n", "k_disagree", "p_disagree"],
        prov.clone(),
    );
    for b in &curve.bins {
        bins.push(vec![Cell::num(b.lo), Cell::num(b.hi), Cell::count(b.n), Cell::count(b.k), b.p.into()]);
    }
    let mut fit = Table::new("ward_disagreement_fit", "Disagreement trend", &["statistic", "value"], prov);
    fit.push(vec![Cell::text("pearson_r_bins"), curve.pearson_r.into()]);
    fit.push(vec![Cell::text("line_intercept"), curve.linear_fit.map(|l| l.0).into()]);
    fit.push(vec![Cell::text("line_slope"), curve.linear_fit.map(|l| l.1).into()]);
    fit.push(vec![Cell::text("n_agree"), Cell::count(curve.n_agree)]);
    fit.push(vec![Cell::text("n_disagree"), Cell::count(curve.n_disagree)]);
    if let Some(note) = &curve.pearson_note {
        fit.notes.push(format!("pearson_r_bins undefined: {note}"));
    }
    let groups = json!({
        "agree": samples.iter().filter(|s| !s.1).map(|s| s.0).collect::<Vec<_>>(),
        "disagree": samples.iter().filter(|s| s.1).map(|s| s.0).collect::<Vec<_>>(),
    });
    Some((vec![bins, fit], serde_json::to_value(&curve).expect("curve serialises"), groups))
}

struct Calibrated {
    results: Vec<KFoldResult>,
    /// Judge records through the full-sample maps.
    in_sample: Vec<EvaluationRecord>,
    /// Out-of-fold on the calibration split, full-sample maps elsewhere.
    comparison: Vec<EvaluationRecord>,
}

fn calibrate(ctx: &mut Ctx<'_>, records: &[EvaluationRecord]) -> Option<Calibrated> {
    let calib: Vec<EvaluationRecord> = records.iter().filter(|r| r.split == Split::Calibration).cloned().collect();
    let cases: BTreeSet<&str> = calib
        .iter()
        .filter(|r| r.evaluator == ctx.reference)
        .map(|r| r.case_id.as_str())
        .collect();
    let folds = match FoldAssignment::new(cases, ctx.cfg.calibration.folds, ctx.spec.seed.wrapping_add(1)) {
        Ok(f) => f,
        Err(e) => {
            ctx.omit(format!("calibration: {e}"));
            return None;
        }
    };
    let mut results = Vec::new();
    for judge in ctx.judges.clone() {
        for dim in ScoreDimension::ALL {
            match kfold_calibrate(&calib, &ctx.reference, &judge, dim, &folds) {
                Ok(r) => results.push(r),
                Err(e) => ctx.omit(format!("calibration {judge} {dim}: {e}")),
            }
        }
    }
    if results.is_empty() {
        return None;
    }
    let full_maps: Vec<CalibrationMap> = results.iter().map(|r| r.full_map.clone()).collect();
    let judge_records: Vec<EvaluationRecord> =
        records.iter().filter(|r| ctx.judges.contains(&r.evaluator)).cloned().collect();
    let in_sample = calibrate_records(&judge_records, &full_maps);
    let mut comparison = in_sample.clone();
    for (out, raw) in comparison.iter_mut().zip(&judge_records) {
        if raw.split != Split::Calibration {
            continue;
        }
        for res in results.iter().filter(|r| r.judge == raw.evaluator) {
            if let Some(&v) = res.out_of_fold.get(&(raw.case_id.clone(), raw.agent_id.clone())) {
                out.scores.set(res.dimension, Some(v));
            }
        }
    }
    Some(Calibrated {
        results,
        in_sample,
        comparison,
    })
}

fn with_jury(
    ctx: &mut Ctx<'_>,
    base: &[EvaluationRecord],
    judge_records: &[EvaluationRecord],
    what: &str,
) -> Option<Vec<EvaluationRecord>> {
    match aggregate_jury(judge_records, &ctx.judges) {
        Ok(jury) => {
            let mut out: Vec<EvaluationRecord> = base.iter().filter(|r| !r.evaluator.is_judge()).cloned().collect();
            out.retain(|r| r.evaluator != EvaluatorId::jury());
            out.extend(judge_records.iter().cloned());
            out.extend(jury);
            Some(out)
        }
        Err(e) => {
            ctx.omit(format!("{what}: {e}"));
            None
        }
    }
}

fn calibration_table(
    ctx: &Ctx<'_>,
    raw: &[EvaluationRecord],
    in_sample: &[EvaluationRecord],
    out_of_fold: &[EvaluationRecord],
) -> Table {
    let mut t = Table::new(
        "calibration_effect",
        "Calibration split metrics before and after isotonic calibration",
        &[
            "evaluator",
            "dimension",
            "mode",
            "n",
            "offset",
            "rmse",
            "spearman_rho",
            "weighted_kappa",
            "d_offset",
            "d_rmse",
            "d_rho",
            "d_kappa",
        ],
        Provenance {
            operation: "kfold_calibrate + offset_rmse, spearman_rho, weighted_kappa".into(),
            seed: Some(ctx.spec.seed.wrapping_add(1)),
            ..Provenance::default()
        },
    );
    let only_calib = |rs: &[EvaluationRecord]| -> Vec<EvaluationRecord> {
        rs.iter().filter(|r| r.split == Split::Calibration).cloned().collect()
    };
    let sets = [
        ("raw", only_calib(raw)),
        ("in_sample", only_calib(in_sample)),
        ("out_of_fold", only_calib(out_of_fold)),
    ];
    let mut evs: Vec<EvaluatorId> = ctx.judges.clone();
    evs.push(EvaluatorId::jury());
    let metrics = |p: &[(f64, f64)]| [stat_offset(p), stat_rmse(p), stat_rho(p), stat_kappa(p)];
    for ev in &evs {
        for dim in ScoreDimension::ALL {
            let mut base: Option<[Option<f64>; 4]> = None;
            for (mode, set) in &sets {
                let Ok(pairs) = join_pairs(set, &ctx.reference, ev, dim, RepetitionFilter::CollapseMean) else {
                    continue;
                };
                let m = metrics(&values(&pairs));
                let reference_row = *base.get_or_insert(m);
                let mut row = vec![
                    Cell::text(label(ev)),
                    Cell::text(dim.as_str()),
                    Cell::text(*mode),
                    Cell::count(pairs.len()),
                ];
                row.extend(m.iter().map(|v| Cell::from(*v)));
                row.extend(m.iter().zip(reference_row).map(|(a, b)| Cell::from(a.zip(b).map(|(a, b)| a - b))));
                t.push(row);
            }
        }
    }
    t
}

fn win_rate_table(
    ctx: &mut Ctx<'_>,
    phases: &[(&str, &[EvaluationRecord])],
) -> Option<Table> {
    let rescore = ctx.rescore.clone()?;
    let mut t = Table::new(
        "win_rates",
        "Bootstrap win rate of the jury over the re-score panel on shared cases",
        &["phase", "dimension", "metric", "n_cases", "win_pct", "delta"],
        ctx.provenance("bootstrap_win_rate"),
    );
    for (phase, records) in phases {
        for dim in ScoreDimension::ALL {
            let (Ok(a), Ok(b)) = (
                join_pairs(records, &ctx.reference, &EvaluatorId::jury(), dim, RepetitionFilter::CollapseMean),
                join_pairs(records, &ctx.reference, &rescore, dim, RepetitionFilter::CollapseMean),
            ) else {
                continue;
            };
            let b_keys: BTreeMap<(&str, &str), f64> =
                b.iter().map(|p| ((p.case_id.as_str(), p.agent_id.as_str()), p.other)).collect();
            let mut cases: BTreeMap<&str, CasePairs> = BTreeMap::new();
            for p in &a {
                if let Some(&other) = b_keys.get(&(p.case_id.as_str(), p.agent_id.as_str())) {
                    let c = cases.entry(&p.case_id).or_insert_with(|| CasePairs {
                        case_id: p.case_id.clone(),
                        ..CasePairs::default()
                    });
                    c.a.push((p.reference, p.other));
                    c.b.push((p.reference, other));
                }
            }
            let cases: Vec<CasePairs> = cases.into_values().collect();
            for metric in WinMetric::ALL {
                let (win, delta) = match bootstrap_win_rate(&cases, metric, &ctx.spec) {
                    Ok(r) => (Some(r.win_pct), Some(r.delta)),
                    Err(e) => {
                        t.notes.push(format!("{phase} {dim} {}: {e}", metric.name()));
                        (None, None)
                    }
                };
                t.push(vec![
                    Cell::text(*phase),
                    Cell::text(dim.as_str()),
                    Cell::text(metric.name()),
                    Cell::count(cases.len()),
                    win.into(),
                    delta.into(),
                ]);
            }
        }
    }
    if t.rows.is_empty() {
        ctx.omit("win_rates: no cases scored by the jury, the re-score panel and the reference");
        return None;
    }
    Some(t)
}

fn ranking_tables(
    ctx: &mut Ctx<'_>,
    variants: &[(&str, &[EvaluationRecord], EvaluatorId)],
    weights: &CompositeWeights,
) -> Option<(Vec<Table>, Value)> {
    let spec = ctx.spec.with_level(ctx.cfg.ranking.level);
    let prov = Provenance {
        operation: "rank_agents".into(),
        seed: Some(spec.seed),
        n_resamples: Some(spec.n_resamples),
        level: Some(spec.level),
    };
    let mut ranks = Table::new(
        "ranking",
        &format!("Agent ranking by mean {} composite score", ctx.cfg.ranking.weights.to_uppercase()),
        &["variant", "rank", "agent", "n", "mean", "lo", "hi", "reference_mean"],
        prov.clone(),
    );
    let mut agreement = Table::new(
        "ranking_agreement",
        "Kendall tau between each ranking and the reference panel's",
        &["variant", "top_k", "kendall_tau"],
        prov,
    );
    let mut plot = Vec::new();
    let ward = ctx.cfg.report.ward_agent.clone();
    for (variant, records, ev) in variants {
        let pool: Vec<EvaluationRecord> = records
            .iter()
            .filter(|r| Some(&r.agent_id) != ward.as_ref())
            .cloned()
            .collect();
        let ranking = match rank_agents(&pool, ev, &ctx.reference, weights, ctx.cfg.ranking.top_k, &spec) {
            Ok(r) => r,
            Err(e) => {
                ctx.omit(format!("ranking {variant}: {e}"));
                continue;
            }
        };
        for (e, rm) in ranking.entries.iter().zip(&ranking.reference_means) {
            ranks.push(vec![
                Cell::text(*variant),
                Cell::count(e.rank),
                Cell::text(ctx.anon.label(&e.agent_id)),
                Cell::count(e.n),
                Cell::num(e.mean),
                e.lo.into(),
                e.hi.into(),
                Cell::num(*rm),
            ]);
        }
        agreement.push(vec![Cell::text(*variant), Cell::count(ranking.top_k), ranking.kendall_tau.into()]);
        if let Some(err) = &ranking.tau_error {
            agreement.notes.push(format!("{variant}: tau undefined ({err})"));
        }
        plot.push(json!({
            "variant": variant,
            "kendall_tau": ranking.kendall_tau,
            "entries": ranking.entries.iter().zip(&ranking.reference_means).map(|(e, rm)| json!({
                "agent": ctx.anon.label(&e.agent_id),
                "rank": e.rank,
                "mean": e.mean,
                "lo": e.lo,
                "hi": e.hi,
                "reference_mean": rm,
            })).collect::<Vec<_>>(),
        }));
    }
    if ranks.rows.is_empty() {
        return None;
    }
    Some((vec![ranks, agreement], Value::Array(plot)))
}

fn bias_table(ctx: &mut Ctx<'_>, records: &[EvaluationRecord]) -> Option<Table> {
    let mut t = Table::new(
        "same_provider_bias",
        "Same-provider effect from a mixed model with a case random intercept",
        &[
            "judge",
            "dimension",
            "n_obs",
            "n_cases",
            "n_same_provider",
            "beta",
            "std_error",
            "ci_lo",
            "ci_hi",
            "case_variance",
            "residual_variance",
        ],
        Provenance {
            operation: "same_provider_bias (REML)".into(),
            ..Provenance::default()
        },
    );
    let mut who: Vec<(String, Option<EvaluatorId>)> =
        ctx.judges.iter().map(|j| (label(j), Some(j.clone()))).collect();
    who.push(("all judges".into(), None));
    for dim in ctx.cfg.report.bias_dimensions.clone() {
        for (name, judge) in &who {
            let mut obs = bias_observations(records, dim, judge.as_ref());
            obs.retain(|o| ctx.judges.contains(&o.judge));
            match same_provider_bias(&obs) {
                Ok(b) => t.push(vec![
                    Cell::text(name),
                    Cell::text(dim.as_str()),
                    Cell::count(b.n_obs),
                    Cell::count(b.n_cases),
                    Cell::count(b.n_same_provider),
                    Cell::num(b.beta),
                    Cell::num(b.std_error),
                    Cell::num(b.ci95.0),
                    Cell::num(b.ci95.1),
                    Cell::num(b.case_variance),
                    Cell::num(b.residual_variance),
                ]),
                Err(e) => t.notes.push(format!("{name} {dim}: {e}")),
            }
        }
    }
    if t.rows.is_empty() {
        ctx.omit("same_provider_bias: no estimable judge/dimension");
        return None;
    }
    Some(t)
}

fn composite_points(
    reference: &EvaluatorId,
    raw: &[EvaluationRecord],
    calibrated: &[EvaluationRecord],
) -> Value {
    let mut out = Vec::new();
    for (name, weights) in [("S3", CompositeWeights::S3), ("S4", CompositeWeights::S4)] {
        let score = |rs: &[EvaluationRecord], ev: &EvaluatorId| -> BTreeMap<(String, String), f64> {
            rs.iter()
                .filter(|r| &r.evaluator == ev && r.split == Split::Calibration && r.repetition == 0)
                .filter_map(|r| Some(((r.case_id.clone(), r.agent_id.clone()), composite_score(&r.scores, &weights).ok()?)))
                .collect()
        };
        let panel = score(raw, reference);
        let jury_raw = score(raw, &EvaluatorId::jury());
        let jury_cal = score(calibrated, &EvaluatorId::jury());
        let points: Vec<Value> = panel
            .iter()
            .filter_map(|(k, p)| {
                Some(json!({"reference": p, "jury_raw": jury_raw.get(k)?, "jury_calibrated": jury_cal.get(k)?}))
            })
            .collect();
        out.push(json!({"composite": name, "points": points}));
    }
    Value::Array(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs every stage named by `cfg` and assembles the report.
pub fn run_pipeline(cfg: &ReportConfig) -> Result<ReportBundle, PipelineError> {
    cfg.validate()?;
    let corpus_bytes = std::fs::read(&cfg.corpus)
        .map_err(|e| PipelineError::Config(format!("corpus: {}: {e}", cfg.corpus.display())))?;
    let mut records = ingest_records(&cfg.corpus, SCHEMA_VERSION).map_err(PipelineError::stage("ingest"))?;
    log::info!("ingested {} records", records.len());
    let mut files = BTreeMap::new();

    let mut judge_records_sha256 = None;
    let mut judge_failures = 0;
    if let Some(stage) = &cfg.judge {
        let spec = JuryRunSpec::load(&stage.spec).map_err(PipelineError::stage("judge"))?;
        let template = spec.template().map_err(PipelineError::stage("judge"))?;
        let tasks = read_tasks(&stage.tasks).map_err(PipelineError::stage("judge"))?;
        let prompts = build_prompts(&tasks, &template).map_err(PipelineError::stage("judge"))?;
        let out = run_judge(&spec, &prompts, &stage.audit_log).map_err(PipelineError::stage("judge"))?;
        log::info!(
            "judge stage: {} records, {} failures, {} requests, {} resumed",
            out.records.len(),
            out.failures.len(),
            out.requests_issued,
            out.resumed
        );
        judge_failures = out.failures.len();
        if stage.fail_on_error && !out.failures.is_empty() {
            let first = &out.failures[0];
            return Err(PipelineError::Stage {
                stage: "judge",
                source: format!(
                    "{} judge jobs failed; first: {} {} {}: {}",
                    out.failures.len(),
                    first.key.case_id,
                    first.key.agent_id,
                    first.key.model_id,
                    first.error
                )
                .into(),
            });
        }
        let text = serialize_records(&out.records);
        judge_records_sha256 = Some(sha256_hex(text.as_bytes()));
        files.insert("records/judge_records.jsonl".to_string(), text);
        records.extend(out.records);
        // duplicate (case, agent, evaluator, repetition) keys are rejected here
        crate::model::read_records(serialize_records(&records).as_bytes(), SCHEMA_VERSION)
            .map_err(PipelineError::stage("judge"))?;
    }

    let reference = cfg.reference_id()?;
    let rescore = cfg.rescore_id()?;
    let mut judges = cfg.jury_ids()?;
    if judges.is_empty() {
        judges = evaluators(&records).into_iter().filter(|e| e.is_judge()).collect();
    }
    if judges.is_empty() {
        return Err(PipelineError::Config("jury: the corpus has no judge-model records".into()));
    }
    let spec = BootstrapSpec {
        n_resamples: cfg.bootstrap.n_resamples,
        level: cfg.bootstrap.level,
        seed: cfg.seed,
        ..BootstrapSpec::default()
    };
    let mut ctx = Ctx {
        cfg,
        spec,
        reference: reference.clone(),
        rescore: rescore.clone(),
        anon: Anonymizer::new(&records, &cfg.report.anonymize_salt, cfg.report.ward_agent.as_deref()),
        judges: judges.clone(),
        omitted: Vec::new(),
    };

    let jury = aggregate_jury(&records, &judges).map_err(PipelineError::stage("aggregate"))?;
    records.retain(|r| r.evaluator != EvaluatorId::jury());
    records.extend(jury);

    let mut compared: Vec<(String, EvaluatorId)> = judges.iter().map(|j| (label(j), j.clone())).collect();
    compared.push((label(&EvaluatorId::jury()), EvaluatorId::jury()));
    if let Some(r) = &rescore {
        compared.push((label(r), r.clone()));
    }
    let mut with_reference = vec![(label(&reference), reference.clone())];
    with_reference.extend(compared.iter().cloned());

    let mut tables = Vec::new();
    let mut plots = BTreeMap::new();

    if cfg.wants(Section::Metrics) {
        tables.push(offset_table(&records, &reference, &compared, &ctx.spec));
        let (agreement, matrices) = agreement_table(&records, &reference, &compared, &ctx.spec);
        tables.push(agreement);
        plots.insert("confusion_matrices".to_string(), Value::Array(matrices));
        plots.insert("score_distributions".to_string(), score_distributions(&records, &with_reference));
        tables.push(correlation_table(&records, &with_reference));
    }
    if cfg.wants(Section::Severe) {
        tables.extend(severe_tables(&mut ctx, &records, &compared));
    }
    if cfg.wants(Section::Stability) {
        if let Some(t) = stability_table(&mut ctx, &records) {
            tables.push(t);
        }
    }
    if cfg.wants(Section::Disagreement) {
        if let Some((ts, curve, groups)) = disagreement(&mut ctx, &records) {
            tables.extend(ts);
            plots.insert("ward_disagreement".to_string(), curve);
            plots.insert("ward_safety_by_agreement".to_string(), groups);
        }
    }

    let weights = cfg.weights()?;
    let calibrated = if cfg.wants(Section::Calibration) {
        calibrate(&mut ctx, &records)
    } else {
        None
    };
    let mut ranking_variants: Vec<(&str, Vec<EvaluationRecord>, EvaluatorId)> = vec![
        ("reference", records.clone(), reference.clone()),
        ("jury_raw", records.clone(), EvaluatorId::jury()),
    ];
    if let Some(cal) = &calibrated {
        let in_sample = with_jury(&mut ctx, &records, &cal.in_sample, "calibrated jury (in-sample)");
        let comparison = with_jury(&mut ctx, &records, &cal.comparison, "calibrated jury (out-of-fold)");
        if let (Some(in_sample), Some(comparison)) = (in_sample, comparison) {
            tables.push(calibration_table(&ctx, &records, &in_sample, &comparison));
            plots.insert("composite_calibration".to_string(), composite_points(&reference, &records, &comparison));
            if let Some(t) = win_rate_table(&mut ctx, &[("before", &records), ("after", &comparison)]) {
                tables.push(t);
            }
            ranking_variants.push(("jury_calibrated", comparison, EvaluatorId::jury()));
        }
        plots.insert(
            "calibration_curves".to_string(),
            Value::Array(
                cal.results
                    .iter()
                    .map(|r| {
                        json!({
                            "judge": label(&r.judge),
                            "dimension": r.dimension.as_str(),
                            "full": r.full_map.knots,
                            "folds": r.fold_maps.iter().map(|m| &m.knots).collect::<Vec<_>>(),
                        })
                    })
                    .collect(),
            ),
        );
        for r in &cal.results {
            let name = format!(
                "calibration/{}_{}_{}.json",
                r.judge.provider.as_deref().unwrap_or("unknown"),
                r.judge.model_id.as_deref().unwrap_or("unknown"),
                r.dimension.as_str()
            );
            files.insert(name, r.full_map.to_json());
        }
    } else if ctx.rescore.is_some() && cfg.wants(Section::Calibration) {
        if let Some(t) = win_rate_table(&mut ctx, &[("before", &records)]) {
            tables.push(t);
        }
    }
    let variants: Vec<(&str, &[EvaluationRecord], EvaluatorId)> =
        ranking_variants.iter().map(|(n, r, e)| (*n, r.as_slice(), e.clone())).collect();
    if cfg.wants(Section::Ranking) {
        if let Some((ts, plot)) = ranking_tables(&mut ctx, &variants, &weights) {
            tables.extend(ts);
            plots.insert("ranking".to_string(), plot);
        }
    }
    if cfg.wants(Section::Bias) {
        if let Some(t) = bias_table(&mut ctx, &records) {
            tables.push(t);
        }
    }

    let provenance = tables.iter().map(|t| (t.name.clone(), t.provenance.clone())).collect();
    let metadata = Metadata {
        schema_version: SCHEMA_VERSION.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        corpus_sha256: sha256_hex(&corpus_bytes),
        n_records: records.len(),
        reference: label(&reference),
        rescore: rescore.as_ref().map(label),
        jury: judges.iter().map(label).collect(),
        judge_records_sha256,
        judge_failures,
        bootstrap: BootstrapMeta {
            rng: RNG_NAME.into(),
            method: INTERVAL_METHOD.into(),
            unit: "case".into(),
            n_resamples: ctx.spec.n_resamples,
            level: ctx.spec.level,
            seed: ctx.spec.seed,
        },
        calibration_folds: cfg.calibration.folds,
        fold_seed: cfg.seed.wrapping_add(1),
        ranking_top_k: cfg.ranking.top_k,
        ranking_weights: cfg.ranking.weights.to_uppercase(),
        ranking_level: cfg.ranking.level,
        decisions: DECISIONS.iter().map(|d| d.to_string()).collect(),
        omitted: ctx.omitted,
        provenance,
    };
    Ok(ReportBundle {
        tables,
        plots,
        metadata,
        files,
    })
}

/// Convenience wrapper: load the config at `path` and run it.
pub fn run_pipeline_from(path: impl AsRef<Path>) -> Result<ReportBundle, PipelineError> {
    run_pipeline(&ReportConfig::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScoreVector;

    fn rec(ev: EvaluatorId, case: &str, v: f64) -> EvaluationRecord {
        EvaluationRecord {
            case_id: case.into(),
            agent_id: "ward".into(),
            agent_provider: None,
            evaluator: ev,
            scores: ScoreVector::new(v, v, Some(v), v),
            repetition: 0,
            split: Split::Calibration,
            ward_agreement: None,
        }
    }

    #[test]
    fn offset_table_has_one_row_per_evaluator_and_dimension() {
        let a = EvaluatorId::judge("a", "x");
        let b = EvaluatorId::judge("b", "y");
        let mut records = Vec::new();
        for i in 0..10 {
            let c = format!("c{i}");
            let v = 1.0 + (i % 5) as f64;
            records.push(rec(EvaluatorId::primary_panel(), &c, v));
            records.push(rec(a.clone(), &c, (v - 1.0).max(1.0)));
            records.push(rec(b.clone(), &c, v));
        }
        let compared = vec![(label(&a), a), (label(&b), b)];
        let spec = BootstrapSpec {
            n_resamples: 200,
            ..BootstrapSpec::default()
        };
        let t = offset_table(&records, &EvaluatorId::primary_panel(), &compared, &spec);
        assert_eq!(t.rows.len(), 8);
        assert_eq!(t.get(4, "offset").as_deref(), Some("0.000"));
    }

    #[test]
    fn anonymizer_is_salt_keyed_and_stable() {
        let records: Vec<_> = ["x", "y", "z", "ward"]
            .iter()
            .map(|a| EvaluationRecord {
                agent_id: a.to_string(),
                ..rec(EvaluatorId::primary_panel(), "c", 3.0)
            })
            .collect();
        let a = Anonymizer::new(&records, "s1", Some("ward"));
        let b = Anonymizer::new(&records, "s1", Some("ward"));
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.label("ward"), "ward");
        let labels: BTreeSet<String> = a.labels.values().cloned().collect();
        assert_eq!(labels, ["M1", "M2", "M3"].iter().map(|s| s.to_string()).collect());
    }
}
