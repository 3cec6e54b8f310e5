//! Stage III orchestration: the closed generate-verify-write-back loop and
//! the one-shot baselines, plus run-level behavior statistics.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{cross_validated_score, EvalError, EvaluationConfig, Metric, Score};
use crate::expr::{
    parse_sequence, render_sequence, OperatorSet, RenderStyle, Token, TransformationSequence,
};
use crate::library::{
    similarity, DatasetSignature, Experience, ExperienceLibrary, LibraryError, Origin,
    SelectionParams,
};
use crate::policy::{
    build_prompt, parse_response, GenerationPolicy, GenerationRules, PolicyError, SamplingSettings,
};
use crate::refine::{build_trajectory, check_sequence, CheckThresholds, CoTTrajectory, RefineError};
use crate::table::{execute_sequence, Dataset, ExecutionMode, TableError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    ClosedLoop,
    OneShotFixed,
    OneShotResample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub iterations: usize,
    pub candidates_per_iteration: usize,
    pub keep_top_per_iteration: usize,
    pub selection: SelectionParams,
    pub dedup_threshold: f64,
    pub seed: u64,
    pub mode: RunMode,
    pub sampling: SamplingSettings,
    pub thresholds: CheckThresholds,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            candidates_per_iteration: 10,
            keep_top_per_iteration: 3,
            selection: SelectionParams::default(),
            dedup_threshold: 0.9,
            seed: 0,
            mode: RunMode::ClosedLoop,
            sampling: SamplingSettings::default(),
            thresholds: CheckThresholds::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.iterations == 0
            || self.candidates_per_iteration == 0
            || self.keep_top_per_iteration > self.candidates_per_iteration
        {
            return Err(PipelineError::BadConfig(format!(
                "iterations {} / candidates {} / keep_top {} out of range",
                self.iterations, self.candidates_per_iteration, self.keep_top_per_iteration
            )));
        }
        Ok(())
    }
}

/// One generate call: what came back, whether it survived the checks, and the
/// best score seen up to and including this call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub iteration: usize,
    pub call: usize,
    /// Canonical postfix text when the response parsed, else `None`.
    pub sequence: Option<String>,
    pub valid: bool,
    pub score: Option<f64>,
    /// Tag of the parse error or the failed check kinds, when invalid.
    pub rejection: Option<String>,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub dataset: String,
    pub feature_count: usize,
    pub iterations: usize,
    pub candidates_per_iteration: usize,
    pub metric: Metric,
    /// Best library score for the dataset before the run.
    pub baseline_best: f64,
    pub records: Vec<CallRecord>,
    pub best_so_far: Vec<f64>,
    pub final_best_score: f64,
    pub final_best_sequence: Option<String>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid loop config: {0}")]
    BadConfig(String),
    #[error("library has no experiences for dataset `{0}`")]
    EmptyPool(String),
    #[error("policy call failed at iteration {iteration}, call {call}: {source}")]
    Policy {
        iteration: usize,
        call: usize,
        source: PolicyError,
    },
    #[error("evaluation failed at iteration {iteration}, call {call}: {source}")]
    Eval {
        iteration: usize,
        call: usize,
        source: EvalError,
    },
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("empty report")]
    EmptyReport,
}

/// Stable per-call seed; distinct across (seed, t, j) without overlap between
/// nearby run seeds.
fn call_seed(seed: u64, t: usize, j: usize) -> u64 {
    let mut x = seed
        ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

/// Few-shot context for a loop iteration. The context size is clamped to the
/// available pool so a freshly seeded library (even a single experience) can
/// bootstrap the loop; write-back grows the pool from the next iteration on.
fn context_trajectory(
    lib: &ExperienceLibrary,
    sig: &DatasetSignature,
    params: &SelectionParams,
    dataset_name: &str,
) -> Result<CoTTrajectory, PipelineError> {
    let pool = lib.indices_for(sig).len();
    if pool == 0 {
        return Err(PipelineError::EmptyPool(dataset_name.to_string()));
    }
    let clamped = SelectionParams {
        context_size: params.context_size.min(pool),
        ..*params
    };
    if clamped.context_size >= 2 {
        Ok(build_trajectory(lib, sig, &clamped)?)
    } else {
        let mut steps: Vec<Experience> =
            lib.select_context(sig, &clamped)?.into_iter().cloned().collect();
        steps.sort_by(|a, b| a.score.value.partial_cmp(&b.score.value).unwrap());
        Ok(CoTTrajectory { steps })
    }
}

/// Score-weighted sampling without replacement for the one-shot resample
/// baseline; the greedy selector is deterministic, so re-selection has to
/// draw from a seeded distribution to differ across iterations.
fn sample_trajectory(
    lib: &ExperienceLibrary,
    sig: &DatasetSignature,
    params: &SelectionParams,
    seed: u64,
) -> Result<CoTTrajectory, PipelineError> {
    let pool = lib.indices_for(sig);
    if pool.is_empty() {
        return Err(PipelineError::Library(LibraryError::InsufficientExperiences {
            available: 0,
            requested: params.context_size.max(1),
        }));
    }
    let context_size = params.context_size.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min = pool
        .iter()
        .map(|&i| lib.experiences[i].score.value)
        .fold(f64::INFINITY, f64::min);
    let mut remaining = pool;
    let mut steps: Vec<Experience> = Vec::new();
    while steps.len() < context_size {
        let weights: Vec<f64> = remaining
            .iter()
            .map(|&i| lib.experiences[i].score.value - min + 1e-3)
            .collect();
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        let pick = dist.sample(&mut rng);
        steps.push(lib.experiences[remaining.remove(pick)].clone());
    }
    steps.sort_by(|a, b| a.score.value.partial_cmp(&b.score.value).unwrap());
    Ok(CoTTrajectory { steps })
}

struct CandidateOutcome {
    sequence: Option<TransformationSequence>,
    score: Option<f64>,
    rejection: Option<String>,
}

fn evaluate_candidate(
    text: &str,
    d: &Dataset,
    rules: &GenerationRules,
    cfg: &LoopConfig,
    eval_cfg: &EvaluationConfig,
    ops: &OperatorSet,
    t: usize,
    j: usize,
) -> Result<CandidateOutcome, PipelineError> {
    let seq = match parse_response(text, rules) {
        Ok(seq) => seq,
        Err(e) => {
            return Ok(CandidateOutcome {
                sequence: None,
                score: None,
                rejection: Some(e.tag().to_string()),
            })
        }
    };
    let verdict = check_sequence(&seq, d, &cfg.thresholds, ops, eval_cfg)?;
    if !verdict.passed() {
        let mut kinds: Vec<&str> = verdict.reasons.iter().map(|r| r.kind()).collect();
        kinds.dedup();
        return Ok(CandidateOutcome {
            sequence: Some(seq),
            score: None,
            rejection: Some(kinds.join("+")),
        });
    }
    let transformed = execute_sequence(&seq, d, ExecutionMode::Append, ops)?;
    let score = cross_validated_score(&transformed, eval_cfg).map_err(|e| PipelineError::Eval {
        iteration: t,
        call: j,
        source: e,
    })?;
    Ok(CandidateOutcome {
        sequence: Some(seq),
        score: Some(score.value),
        rejection: None,
    })
}

fn run_inner(
    d: &Dataset,
    lib: &mut ExperienceLibrary,
    policy: &dyn GenerationPolicy,
    cfg: &LoopConfig,
    eval_cfg: &EvaluationConfig,
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let ops = OperatorSet::default();
    let sig = DatasetSignature::of(d);
    let rules = GenerationRules::for_dataset(d);
    let write_back = cfg.mode == RunMode::ClosedLoop;

    let baseline_best = lib
        .best_score_for(&sig)
        .ok_or_else(|| PipelineError::EmptyPool(d.name.clone()))?;
    let metric = lib
        .for_dataset(&sig)
        .first()
        .map(|e| e.score.metric)
        .expect("non-empty pool");

    let fixed_trajectory = if cfg.mode == RunMode::OneShotFixed {
        Some(context_trajectory(lib, &sig, &cfg.selection, &d.name)?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(cfg.iterations * cfg.candidates_per_iteration);
    let mut best = baseline_best;
    let mut best_seq: Option<TransformationSequence> = None;

    for t in 0..cfg.iterations {
        let trajectory = match (&fixed_trajectory, cfg.mode) {
            (Some(traj), _) => traj.clone(),
            (None, RunMode::OneShotResample) => sample_trajectory(
                lib,
                &sig,
                &cfg.selection,
                call_seed(cfg.seed ^ 0xC0FF_EE00, t, usize::MAX),
            )?,
            _ => context_trajectory(lib, &sig, &cfg.selection, &d.name)?,
        };
        let prompt = build_prompt(&trajectory, d, &rules);

        let mut survivors: Vec<Experience> = Vec::new();
        for j in 0..cfg.candidates_per_iteration {
            let text = policy
                .generate(&prompt, &cfg.sampling, call_seed(cfg.seed, t, j))
                .map_err(|e| PipelineError::Policy {
                    iteration: t,
                    call: j,
                    source: e,
                })?;
            let outcome = evaluate_candidate(&text, d, &rules, cfg, eval_cfg, &ops, t, j)?;
            if let (Some(seq), Some(score)) = (&outcome.sequence, outcome.score) {
                if score > best {
                    best = score;
                    best_seq = Some(seq.clone());
                }
                survivors.push(Experience {
                    sequence: seq.clone(),
                    score: Score {
                        metric,
                        value: score,
                    },
                    dataset: sig.clone(),
                    origin: Origin::Llm,
                    iteration: t as u32,
                });
            }
            records.push(CallRecord {
                iteration: t,
                call: j,
                sequence: outcome
                    .sequence
                    .as_ref()
                    .map(|s| render_sequence(s, RenderStyle::Postfix, &ops)),
                valid: outcome.score.is_some(),
                score: outcome.score,
                rejection: outcome.rejection,
                best_so_far: best,
            });
        }

        if write_back && !survivors.is_empty() {
            survivors
                .sort_by(|a, b| b.score.value.partial_cmp(&a.score.value).unwrap());
            // drop near-duplicates within the batch before the library merge
            let mut kept: Vec<Experience> = Vec::new();
            for cand in survivors {
                if kept.len() == cfg.keep_top_per_iteration {
                    break;
                }
                if kept
                    .iter()
                    .any(|k| similarity(&k.sequence, &cand.sequence) > cfg.dedup_threshold)
                {
                    continue;
                }
                kept.push(cand);
            }
            lib.write_back(kept, cfg.dedup_threshold);
        }
    }

    let best_so_far = records.iter().map(|r| r.best_so_far).collect();
    let final_best_sequence = best_seq
        .map(|s| render_sequence(&s, RenderStyle::Postfix, &ops))
        .or_else(|| {
            // no candidate beat the seed library; report its best sequence
            lib.for_dataset(&sig)
                .iter()
                .max_by(|a, b| a.score.value.partial_cmp(&b.score.value).unwrap())
                .map(|e| render_sequence(&e.sequence, RenderStyle::Postfix, &ops))
        });
    Ok(RunReport {
        mode: cfg.mode,
        dataset: d.name.clone(),
        feature_count: d.feature_count(),
        iterations: cfg.iterations,
        candidates_per_iteration: cfg.candidates_per_iteration,
        metric,
        baseline_best,
        records,
        best_so_far,
        final_best_score: best,
        final_best_sequence,
    })
}

/// The closed loop: per iteration, select context, generate B candidates,
/// verify and score each, and merge the top survivors back into the library.
pub fn run_closed_loop(
    d: &Dataset,
    lib: &mut ExperienceLibrary,
    policy: &dyn GenerationPolicy,
    cfg: &LoopConfig,
    eval_cfg: &EvaluationConfig,
) -> Result<RunReport, PipelineError> {
    let cfg = LoopConfig {
        mode: RunMode::ClosedLoop,
        ..*cfg
    };
    run_inner(d, lib, policy, &cfg, eval_cfg)
}

/// Same call budget as the closed loop but the library is never modified.
/// `fixed` builds the few-shot context once; `resample` re-draws it each
/// iteration from a seeded score-weighted distribution.
pub fn run_one_shot(
    d: &Dataset,
    lib: &ExperienceLibrary,
    policy: &dyn GenerationPolicy,
    cfg: &LoopConfig,
    eval_cfg: &EvaluationConfig,
) -> Result<RunReport, PipelineError> {
    let cfg = match cfg.mode {
        RunMode::ClosedLoop => LoopConfig {
            mode: RunMode::OneShotFixed,
            ..*cfg
        },
        _ => *cfg,
    };
    let mut scratch = lib.clone();
    let report = run_inner(d, &mut scratch, policy, &cfg, eval_cfg)?;
    debug_assert_eq!(&scratch, lib);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub operator_counts: BTreeMap<String, u64>,
    pub simple_operator_ratio: f64,
    pub feature_counts: Vec<u64>,
    pub feature_usage_entropy: f64,
}

pub const SIMPLE_OPERATORS: [&str; 6] =
    ["plus", "minus", "multiply", "divide", "standard", "normalize"];

/// Operator and feature usage over all parsed candidate sequences in the run.
pub fn behavior_stats(report: &RunReport) -> Result<BehaviorStats, PipelineError> {
    if report.records.is_empty() {
        return Err(PipelineError::EmptyReport);
    }
    let ops = OperatorSet::default();
    let mut operator_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut feature_counts = vec![0u64; report.feature_count];
    for record in &report.records {
        let Some(text) = &record.sequence else {
            continue;
        };
        let Ok(seq) = parse_sequence(text, &ops, report.feature_count) else {
            continue;
        };
        for comb in &seq.combinations {
            for tok in &comb.tokens {
                match tok {
                    Token::Feature(i) => feature_counts[*i] += 1,
                    Token::Operator(name) => {
                        *operator_counts.entry(name.clone()).or_insert(0) += 1
                    }
                    _ => {}
                }
            }
        }
    }
    let total: u64 = operator_counts.values().sum();
    let simple: u64 = SIMPLE_OPERATORS
        .iter()
        .filter_map(|name| operator_counts.get(*name))
        .sum();
    let simple_operator_ratio = if total == 0 {
        0.0
    } else {
        simple as f64 / total as f64
    };

    let feat_total: u64 = feature_counts.iter().sum();
    let feature_usage_entropy = if feat_total == 0 {
        0.0
    } else {
        feature_counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / feat_total as f64;
                -p * p.ln()
            })
            .sum()
    };
    Ok(BehaviorStats {
        operator_counts,
        simple_operator_ratio,
        feature_counts,
        feature_usage_entropy,
    })
}
