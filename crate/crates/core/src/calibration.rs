//! Isotonic calibration of judge scores against reference panel scores.
//!
//! A [`CalibrationMap`] is the least-squares monotone fit at each observed
//! judge level, evaluated between levels by linear interpolation, held
//! constant past the extreme levels and clamped to [1, 5].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DataError, StatsError};
use crate::model::{
    collect_scores, join_pairs, EvaluationRecord, EvaluatorId, RepetitionFilter, ScoreDimension,
    ScoreVector, MAX_SCORE, MIN_SCORE,
};

pub const MAP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub version: u32,
    pub judge: EvaluatorId,
    pub dimension: ScoreDimension,
    /// (judge level, fitted reference value), strictly increasing in the
    /// first coordinate and non-decreasing in the second.
    pub knots: Vec<(f64, f64)>,
    pub n_train: usize,
    /// SHA-256 over the canonicalised training pairs.
    pub training_hash: String,
}

impl CalibrationMap {
    /// Maps a (possibly fractional) judge score to the reference scale.
    pub fn apply(&self, score: f64) -> f64 {
        apply_calibration(self, score)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, StatsError> {
        let map: CalibrationMap =
            serde_json::from_str(text).map_err(|e| StatsError::Invalid(e.to_string()))?;
        if map.version != MAP_FORMAT_VERSION {
            return Err(StatsError::Invalid(format!(
                "unsupported calibration map version {}",
                map.version
            )));
        }
        if map.knots.is_empty()
            || map
                .knots
                .windows(2)
                .any(|w| w[1].0 <= w[0].0 || w[1].1 < w[0].1)
        {
            return Err(StatsError::Invalid("knots are not monotone".into()));
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FitOptions {
    /// Return a constant map instead of failing when only one judge level
    /// is observed.
    pub allow_constant: bool,
}

/// Weighted pool-adjacent-violators on values already ordered by input.
/// Returns one fitted value per input position.
pub fn pava(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // Each block: (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() >= 2 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().unwrap() = ((m1 * w1 + m2 * w2) / w, w, c1 + c2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

fn training_hash(pairs: &[(f64, f64)]) -> String {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hasher = Sha256::new();
    for (x, y) in sorted {
        hasher.update(x.to_le_bytes());
        hasher.update(y.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Fits the isotonic map from `(judge score, reference score)` pairs.
pub fn pava_fit(
    pairs: &[(f64, f64)],
    judge: EvaluatorId,
    dimension: ScoreDimension,
    options: FitOptions,
) -> Result<CalibrationMap, StatsError> {
    if pairs.len() < 2 && !(options.allow_constant && pairs.len() == 1) {
        return Err(StatsError::TooFew {
            needed: 2,
            got: pairs.len(),
        });
    }
    let mut levels: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
    for &(x, y) in pairs {
        if !x.is_finite() || !y.is_finite() {
            return Err(StatsError::Invalid("non-finite calibration pair".into()));
        }
        // Order-preserving key for non-negative floats.
        let key = (x + 0.0).to_bits();
        let e = levels.entry(key).or_insert((x, 0.0, 0.0));
        e.1 += y;
        e.2 += 1.0;
    }
    if levels.len() < 2 && !options.allow_constant {
        return Err(StatsError::DegenerateFit(format!(
            "only one judge level observed for {judge} {dimension}"
        )));
    }
    let mut grouped: Vec<(f64, f64, f64)> = levels.into_values().collect();
    grouped.sort_by(|a, b| a.0.total_cmp(&b.0));
    let means: Vec<f64> = grouped.iter().map(|g| g.1 / g.2).collect();
    let weights: Vec<f64> = grouped.iter().map(|g| g.2).collect();
    let fitted = pava(&means, &weights);
    let knots = grouped
        .iter()
        .zip(fitted)
        .map(|(g, f)| (g.0, f.clamp(MIN_SCORE, MAX_SCORE)))
        .collect();
    Ok(CalibrationMap {
        version: MAP_FORMAT_VERSION,
        judge,
        dimension,
        knots,
        n_train: pairs.len(),
        training_hash: training_hash(pairs),
    })
}

pub fn apply_calibration(map: &CalibrationMap, score: f64) -> f64 {
    let knots = &map.knots;
    let first = knots[0];
    let last = knots[knots.len() - 1];
    let value = if score <= first.0 {
        first.1
    } else if score >= last.0 {
        last.1
    } else {
        let hi = knots.partition_point(|k| k.0 < score);
        let (x0, y0) = knots[hi - 1];
        let (x1, y1) = knots[hi];
        if x1 == score {
            y1
        } else {
            y0 + (y1 - y0) * (score - x0) / (x1 - x0)
        }
    };
    value.clamp(MIN_SCORE, MAX_SCORE)
}

/// Assignment of cases to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Shuffles the sorted distinct case ids with `seed` and deals them
    /// round-robin, so fold sizes differ by at most one.
    pub fn new<'a>(
        case_ids: impl IntoIterator<Item = &'a str>,
        k: usize,
        seed: u64,
    ) -> Result<Self, StatsError> {
        let unique: BTreeSet<&str> = case_ids.into_iter().collect();
        if k < 2 {
            return Err(StatsError::Invalid("need at least 2 folds".into()));
        }
        if unique.len() < k {
            return Err(StatsError::TooFew {
                needed: k,
                got: unique.len(),
            });
        }
        let mut ids: Vec<&str> = unique.into_iter().collect();
        ids.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let folds = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), i % k))
            .collect();
        Ok(FoldAssignment { k, seed, folds })
    }

    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.folds.get(case_id).copied()
    }
}

/// Cross-validated calibration of one judge on one dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KFoldResult {
    pub judge: EvaluatorId,
    pub dimension: ScoreDimension,
    /// Map fitted with fold `i` held out.
    pub fold_maps: Vec<CalibrationMap>,
    /// Map fitted on every training pair.
    pub full_map: CalibrationMap,
    /// Out-of-fold calibrated judge score per (case_id, agent_id).
    pub out_of_fold: BTreeMap<(String, String), f64>,
    /// Full-map calibrated judge score per (case_id, agent_id).
    pub in_sample: BTreeMap<(String, String), f64>,
}

/// Fits per-fold and full-sample maps of `judge` against `reference` and
/// calibrates every judge score of the folded cases out of fold.
pub fn kfold_calibrate(
    records: &[EvaluationRecord],
    reference: &EvaluatorId,
    judge: &EvaluatorId,
    dimension: ScoreDimension,
    folds: &FoldAssignment,
) -> Result<KFoldResult, StatsError> {
    let pairs = join_pairs(
        records,
        reference,
        judge,
        dimension,
        RepetitionFilter::CollapseMean,
    )
    .map_err(|e: DataError| StatsError::Invalid(e.to_string()))?;
    let judge_scores = collect_scores(records, judge, dimension, RepetitionFilter::CollapseMean);
    let full_pairs: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|p| folds.fold_of(&p.case_id).is_some())
        .map(|p| (p.other, p.reference))
        .collect();
    let full_map = pava_fit(&full_pairs, judge.clone(), dimension, FitOptions::default())?;
    let mut fold_maps = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let train: Vec<(f64, f64)> = pairs
            .iter()
            .filter(|p| matches!(folds.fold_of(&p.case_id), Some(f) if f != fold))
            .map(|p| (p.other, p.reference))
            .collect();
        let map = pava_fit(
            &train,
            judge.clone(),
            dimension,
            FitOptions {
                allow_constant: true,
            },
        )?;
        fold_maps.push(map);
    }
    let mut out_of_fold = BTreeMap::new();
    let mut in_sample = BTreeMap::new();
    for ((case_id, agent_id), score) in judge_scores {
        let Some(fold) = folds.fold_of(&case_id) else {
            continue;
        };
        out_of_fold.insert(
            (case_id.clone(), agent_id.clone()),
            fold_maps[fold].apply(score),
        );
        in_sample.insert((case_id, agent_id), full_map.apply(score));
    }
    Ok(KFoldResult {
        judge: judge.clone(),
        dimension,
        fold_maps,
        full_map,
        out_of_fold,
        in_sample,
    })
}

/// Returns copies of `judge`'s records with every present dimension mapped
/// through the matching map. Dimensions without a map are left unchanged.
pub fn calibrate_records(
    records: &[EvaluationRecord],
    maps: &[CalibrationMap],
) -> Vec<EvaluationRecord> {
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            for map in maps.iter().filter(|m| m.judge == r.evaluator) {
                if let Some(v) = r.scores.get(map.dimension) {
                    out.scores.set(map.dimension, Some(map.apply(v)));
                }
            }
            out
        })
        .collect()
}

/// Non-negative composite weights over (Dx, DDx, Reasoning, Safety).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub dx: f64,
    pub ddx: f64,
    pub reasoning: f64,
    pub safety: f64,
}

impl CompositeWeights {
    pub const S3: CompositeWeights = CompositeWeights {
        dx: 0.4,
        ddx: 0.2,
        reasoning: 0.0,
        safety: 0.4,
    };
    pub const S4: CompositeWeights = CompositeWeights {
        dx: 0.3,
        ddx: 0.1,
        reasoning: 0.3,
        safety: 0.3,
    };

    pub fn new(dx: f64, ddx: f64, reasoning: f64, safety: f64) -> Result<Self, StatsError> {
        let w = CompositeWeights {
            dx,
            ddx,
            reasoning,
            safety,
        };
        let all = [dx, ddx, reasoning, safety];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(StatsError::Invalid("weights must be non-negative".into()));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(StatsError::Invalid("weights must sum to 1".into()));
        }
        Ok(w)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "S3" => Some(Self::S3),
            "S4" => Some(Self::S4),
            _ => None,
        }
    }
}

pub fn composite_score(scores: &ScoreVector, weights: &CompositeWeights) -> Result<f64, StatsError> {
    let reasoning_term = match scores.reasoning {
        Some(r) => weights.reasoning * r,
        None if weights.reasoning == 0.0 => 0.0,
        None => {
            return Err(StatsError::Invalid(
                "reasoning score required by a non-zero reasoning weight".into(),
            ))
        }
    };
    Ok(weights.dx * scores.dx + weights.ddx * scores.ddx + reasoning_term + weights.safety * scores.safety)
}

/// Per-dimension mean of the judges' calibrated vectors. Reasoning is
/// averaged only when every judge has it.
pub fn calibrated_jury_score(judges: &[ScoreVector]) -> Result<ScoreVector, DataError> {
    if judges.is_empty() {
        return Err(DataError::Coverage("no judge scores to average".into()));
    }
    let n = judges.len() as f64;
    let mean = |f: fn(&ScoreVector) -> f64| judges.iter().map(f).sum::<f64>() / n;
    let reasoning = match judges.iter().filter(|s| s.reasoning.is_some()).count() {
        0 => None,
        c if c == judges.len() => Some(judges.iter().filter_map(|s| s.reasoning).sum::<f64>() / n),
        _ => {
            return Err(DataError::Coverage(
                "reasoning present for some judges only".into(),
            ))
        }
    };
    Ok(ScoreVector {
        dx: mean(|s| s.dx),
        ddx: mean(|s| s.ddx),
        reasoning,
        safety: mean(|s| s.safety),
    })
}
