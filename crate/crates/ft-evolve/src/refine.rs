//! Library refinement: validity checking, outlier filtering, score-sorted
//! demonstration trajectories, and policy-based trajectory enhancement.

use thiserror::Error;

use crate::eval::{cross_validated_fold_scores, cross_validated_score, EvalError, EvaluationConfig};
use crate::expr::{
    render_combination_postfix, render_sequence, validate_structure, Combination, OperatorSet,
    RenderStyle, SequenceLimits, TransformationSequence,
};
use crate::library::{Experience, ExperienceLibrary, LibraryError, Origin, SelectionParams};
use crate::policy::{
    build_prompt, parse_response, GenerationPolicy, GenerationRules, PolicyError, PromptBundle,
    SamplingSettings,
};
use crate::table::{
    execute_combination, execute_sequence, Dataset, ExecutionMode, TableError, STD_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckThresholds {
    pub max_nan_ratio: f64,
    pub min_column_std: f64,
    pub utility_folds: usize,
    pub utility_fail_folds: usize,
}

impl Default for CheckThresholds {
    fn default() -> Self {
        Self {
            max_nan_ratio: 0.05,
            min_column_std: 1e-12,
            utility_folds: 5,
            utility_fail_folds: 4,
        }
    }
}

/// Why a combination or sequence was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckReason {
    Syntactic { combination: usize, detail: String },
    Stability { combination: usize, detail: String },
    Utility { combination: usize, failing_folds: usize },
}

impl CheckReason {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckReason::Syntactic { .. } => "syntactic",
            CheckReason::Stability { .. } => "stability",
            CheckReason::Utility { .. } => "utility",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub reasons: Vec<CheckReason>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// A score-ascending chain of demonstrations: worst to best, showing the
/// improvement path the policy should extend.
#[derive(Debug, Clone, PartialEq)]
pub struct CoTTrajectory {
    pub steps: Vec<Experience>,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("policy unavailable: {0}")]
    Policy(#[from] PolicyError),
    #[error("need at least 2 experiences to build a trajectory, have {0}")]
    InsufficientExperiences(usize),
}

/// Three-level check of a single combination: syntactic validity, numerical
/// stability, and (optionally) per-fold marginal utility.
pub fn check_combination(
    comb: &Combination,
    d: &Dataset,
    th: &CheckThresholds,
    ops: &OperatorSet,
    eval_cfg: &EvaluationConfig,
    with_utility: bool,
) -> Result<Verdict, RefineError> {
    let mut reasons = Vec::new();
    let seq = TransformationSequence {
        combinations: vec![comb.clone()],
    };
    let diags = validate_structure(&seq, ops, d.feature_count(), &SequenceLimits::default());
    if !diags.is_empty() {
        for diag in diags {
            reasons.push(CheckReason::Syntactic {
                combination: 0,
                detail: diag.to_string(),
            });
        }
        return Ok(Verdict { reasons });
    }

    let outcome = execute_combination(comb, d, ops)?;
    if outcome.nan_ratio > th.max_nan_ratio {
        reasons.push(CheckReason::Stability {
            combination: 0,
            detail: format!(
                "nan ratio {:.4} exceeds {:.4}",
                outcome.nan_ratio, th.max_nan_ratio
            ),
        });
    }
    if outcome.has_inf {
        reasons.push(CheckReason::Stability {
            combination: 0,
            detail: "produced non-finite values".into(),
        });
    }
    let mut values = outcome.values;
    let fin: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if fin.is_empty() {
        reasons.push(CheckReason::Stability {
            combination: 0,
            detail: "all values NaN".into(),
        });
    } else {
        let median = {
            let mut s = fin.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if s.len() % 2 == 1 {
                s[s.len() / 2]
            } else {
                (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
            }
        };
        for v in values.iter_mut() {
            if v.is_nan() {
                *v = median;
            }
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        if var.sqrt() < th.min_column_std.max(STD_FLOOR) {
            reasons.push(CheckReason::Stability {
                combination: 0,
                detail: "zero variance after imputation".into(),
            });
        } else if with_utility {
            let cfg = EvaluationConfig {
                folds: th.utility_folds,
                ..*eval_cfg
            };
            let baseline = cross_validated_fold_scores(d, &cfg)?;
            let mut with_col = d.clone();
            let name = render_combination_postfix(comb, ops);
            with_col.columns.push((name, values));
            let extended = cross_validated_fold_scores(&with_col, &cfg)?;
            let failing = baseline
                .iter()
                .zip(&extended)
                .filter(|(b, e)| e < b)
                .count();
            if failing >= th.utility_fail_folds {
                reasons.push(CheckReason::Utility {
                    combination: 0,
                    failing_folds: failing,
                });
            }
        }
    }
    Ok(Verdict { reasons })
}

/// A sequence passes iff every combination passes (utility off) and the whole
/// sequence executes end to end.
pub fn check_sequence(
    seq: &TransformationSequence,
    d: &Dataset,
    th: &CheckThresholds,
    ops: &OperatorSet,
    eval_cfg: &EvaluationConfig,
) -> Result<Verdict, RefineError> {
    let mut reasons = Vec::new();
    let limits = SequenceLimits::default();
    let diags = validate_structure(seq, ops, d.feature_count(), &limits);
    if !diags.is_empty() {
        for diag in diags {
            reasons.push(CheckReason::Syntactic {
                combination: 0,
                detail: diag.to_string(),
            });
        }
        return Ok(Verdict { reasons });
    }
    for (i, comb) in seq.combinations.iter().enumerate() {
        let v = check_combination(comb, d, th, ops, eval_cfg, false)?;
        for r in v.reasons {
            reasons.push(match r {
                CheckReason::Syntactic { detail, .. } => CheckReason::Syntactic {
                    combination: i,
                    detail,
                },
                CheckReason::Stability { detail, .. } => CheckReason::Stability {
                    combination: i,
                    detail,
                },
                CheckReason::Utility { failing_folds, .. } => CheckReason::Utility {
                    combination: i,
                    failing_folds,
                },
            });
        }
    }
    if reasons.is_empty() {
        if let Err(e) = execute_sequence(seq, d, ExecutionMode::Append, ops) {
            reasons.push(CheckReason::Stability {
                combination: 0,
                detail: e.to_string(),
            });
        }
    }
    Ok(Verdict { reasons })
}

/// Linear-interpolation quartile (the usual "type 7" estimate).
fn quartile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Drops experiences below the Tukey lower fence (Q1 - 1.5 IQR) of the score
/// distribution. High scores are never dropped; fewer than 4 experiences are
/// returned unchanged. Relative order is preserved.
pub fn filter_outliers(experiences: Vec<Experience>) -> Vec<Experience> {
    if experiences.len() < 4 {
        return experiences;
    }
    let mut scores: Vec<f64> = experiences.iter().map(|e| e.score.value).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quartile(&scores, 0.25);
    let q3 = quartile(&scores, 0.75);
    let fence = q1 - 1.5 * (q3 - q1);
    let max = *scores.last().unwrap();
    experiences
        .into_iter()
        .filter(|e| e.score.value >= fence || e.score.value == max)
        .collect()
}

/// Selects `params.context_size` experiences with the quality-diversity
/// selector and orders them ascending by score. Score ties keep library order.
pub fn build_trajectory(
    lib: &ExperienceLibrary,
    sig: &crate::library::DatasetSignature,
    params: &SelectionParams,
) -> Result<CoTTrajectory, RefineError> {
    let available = lib.indices_for(sig).len();
    if available < 2 {
        return Err(RefineError::InsufficientExperiences(available));
    }
    let selected = lib.select_context(sig, params)?;
    let mut steps: Vec<Experience> = selected.into_iter().cloned().collect();
    steps.sort_by(|a, b| a.score.value.partial_cmp(&b.score.value).unwrap());
    Ok(CoTTrajectory { steps })
}

/// One rejected enhancement candidate, kept for the run trace.
#[derive(Debug, Clone)]
pub struct EnhancementRejection {
    pub raw: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct EnhancementOutcome {
    pub accepted: Vec<Experience>,
    pub rejected: Vec<EnhancementRejection>,
}

/// For each adjacent step pair, asks the policy for a gap-filling variant,
/// verifies it, scores it, and keeps it iff it scores at least as well as the
/// lower neighbor. Kept variants carry `origin = enhancement`.
pub fn enhance_trajectory(
    traj: &CoTTrajectory,
    policy: &dyn GenerationPolicy,
    d: &Dataset,
    eval_cfg: &EvaluationConfig,
    th: &CheckThresholds,
    rules: &GenerationRules,
    seed: u64,
) -> Result<EnhancementOutcome, RefineError> {
    let ops = OperatorSet::default();
    let settings = SamplingSettings::default();
    let mut out = EnhancementOutcome::default();
    let mut seen: Vec<String> = traj
        .steps
        .iter()
        .map(|e| render_sequence(&e.sequence, RenderStyle::Postfix, &ops))
        .collect();

    for (pair_idx, pair) in traj.steps.windows(2).enumerate() {
        let (lo, hi) = (&pair[0], &pair[1]);
        let pair_traj = CoTTrajectory {
            steps: vec![lo.clone(), hi.clone()],
        };
        let prompt = enhancement_prompt(&pair_traj, d, rules);
        let raw = policy.generate(&prompt, &settings, seed.wrapping_add(pair_idx as u64))?;
        let seq = match parse_response(&raw, rules) {
            Ok(seq) => seq,
            Err(e) => {
                out.rejected.push(EnhancementRejection {
                    raw,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let rendering = render_sequence(&seq, RenderStyle::Postfix, &ops);
        if seen.contains(&rendering) {
            out.rejected.push(EnhancementRejection {
                raw,
                reason: "duplicate of an existing step".into(),
            });
            continue;
        }
        let verdict = check_sequence(&seq, d, th, &ops, eval_cfg)?;
        if !verdict.passed() {
            let reason = verdict
                .reasons
                .iter()
                .map(|r| r.kind())
                .collect::<Vec<_>>()
                .join(",");
            out.rejected.push(EnhancementRejection {
                raw,
                reason: format!("failed checks: {reason}"),
            });
            continue;
        }
        let transformed = execute_sequence(&seq, d, ExecutionMode::Append, &ops)?;
        let score = cross_validated_score(&transformed, eval_cfg)?;
        if score.value < lo.score.value {
            out.rejected.push(EnhancementRejection {
                raw,
                reason: format!(
                    "score {:.4} below lower neighbor {:.4}",
                    score.value, lo.score.value
                ),
            });
            continue;
        }
        seen.push(rendering);
        out.accepted.push(Experience {
            sequence: seq,
            score,
            dataset: lo.dataset.clone(),
            origin: Origin::Enhancement,
            iteration: lo.iteration,
        });
    }
    Ok(out)
}

fn enhancement_prompt(pair: &CoTTrajectory, d: &Dataset, rules: &GenerationRules) -> PromptBundle {
    let mut prompt = build_prompt(pair, d, rules);
    prompt.instruction_text = format!(
        "The two demonstrations above are consecutive steps of an improvement chain. \
         Propose ONE new transformation sequence that fills the gap between them or \
         explores their immediate neighborhood, scoring at least as well as the first. \
         {}",
        prompt.instruction_text
    );
    prompt
}
