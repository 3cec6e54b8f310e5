//! Reward-driven exploration that seeds the experience library.
//!
//! A contextless three-head bandit (head feature, operator, tail feature)
//! builds one combination per step; the reward is the change in
//! cross-validated score after appending the new column. Operand heads may
//! pick previously generated columns, whose postfix programs are inlined so
//! every stored combination refers only to original features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::{cross_validated_score, EvalError, EvaluationConfig};
use crate::expr::{
    render_combination_infix, render_sequence, Combination, OperatorSet, RenderStyle, Token,
    TransformationSequence,
};
use crate::library::{DatasetSignature, Experience, Origin};
use crate::refine::{check_combination, CheckThresholds, RefineError};
use crate::table::{execute_combination, Dataset};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorerConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay: f64,
    pub seed: u64,
    pub keep_top: usize,
    pub invalid_penalty: f64,
    pub max_retries: usize,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            steps_per_episode: 4,
            epsilon_start: 0.9,
            epsilon_end: 0.1,
            epsilon_decay: 0.95,
            seed: 0,
            keep_top: 50,
            invalid_penalty: 0.01,
            max_retries: 3,
        }
    }
}

impl ExplorerConfig {
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        self.epsilon_end
            + (self.epsilon_start - self.epsilon_end) * self.epsilon_decay.powi(episode as i32)
    }
}

/// Incremental-mean value estimates with visit counts for one action head.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHead {
    pub estimates: Vec<f64>,
    pub visits: Vec<u32>,
}

impl ValueHead {
    fn new(size: usize) -> Self {
        Self {
            estimates: vec![0.0; size],
            visits: vec![0; size],
        }
    }

    fn update(&mut self, action: usize, reward: f64) {
        self.visits[action] += 1;
        let n = self.visits[action] as f64;
        self.estimates[action] += (reward - self.estimates[action]) / n;
    }

    /// Argmax over the first `limit` actions; ties break to the lowest id.
    fn argmax(&self, limit: usize) -> usize {
        let mut best = 0;
        for i in 1..limit.min(self.estimates.len()) {
            if self.estimates[i] > self.estimates[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionValueTable {
    pub head_feature: ValueHead,
    pub operator: ValueHead,
    pub tail_feature: ValueHead,
}

impl ActionValueTable {
    pub fn new(max_features: usize, ops: &OperatorSet) -> Self {
        Self {
            head_feature: ValueHead::new(max_features),
            operator: ValueHead::new(ops.len()),
            tail_feature: ValueHead::new(max_features),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub head: usize,
    pub operator: String,
    pub tail: Option<usize>,
}

/// Epsilon-greedy draw per head. Tail feature is sampled only for binary
/// operators. Deterministic given the rng state.
pub fn select_action<R: Rng>(
    tables: &ActionValueTable,
    epsilon: f64,
    rng: &mut R,
    current_feature_count: usize,
    ops: &OperatorSet,
) -> Action {
    assert!(current_feature_count >= 1 && !ops.is_empty());
    let head = if rng.gen_bool(epsilon) {
        rng.gen_range(0..current_feature_count)
    } else {
        tables.head_feature.argmax(current_feature_count)
    };
    let op_idx = if rng.gen_bool(epsilon) {
        rng.gen_range(0..ops.len())
    } else {
        tables.operator.argmax(ops.len())
    };
    let op = ops.iter().nth(op_idx).expect("index in range");
    let tail = if op.arity == 2 {
        Some(if rng.gen_bool(epsilon) {
            rng.gen_range(0..current_feature_count)
        } else {
            tables.tail_feature.argmax(current_feature_count)
        })
    } else {
        None
    };
    Action {
        head,
        operator: op.name.clone(),
        tail,
    }
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("evaluation failed at episode {episode}, step {step}: {source}")]
    EvaluationFailure {
        episode: usize,
        step: usize,
        source: EvalError,
    },
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Table(#[from] crate::table::TableError),
}

/// Per-episode trace kept for diagnostics and the reward-telescoping check.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub rewards: Vec<f64>,
    pub baseline_score: f64,
    pub final_score: f64,
    pub invalid_attempts: usize,
}

pub struct ExplorationOutcome {
    pub experiences: Vec<Experience>,
    pub traces: Vec<EpisodeTrace>,
    pub tables: ActionValueTable,
}

fn op_index(ops: &OperatorSet, name: &str) -> usize {
    ops.iter().position(|o| o.name == name).expect("known operator")
}

/// Expands an operand id into postfix tokens: original features stay a single
/// token, generated columns inline their defining program.
fn operand_tokens(id: usize, original_count: usize, generated: &[Combination]) -> Vec<Token> {
    if id < original_count {
        vec![Token::Feature(id)]
    } else {
        generated[id - original_count].tokens.clone()
    }
}

/// Runs the configured number of episodes and returns the `keep_top`
/// highest-scoring distinct candidate experiences plus the full traces.
pub fn run_exploration_traced(
    d: &Dataset,
    eval_cfg: &EvaluationConfig,
    cfg: &ExplorerConfig,
    th: &CheckThresholds,
) -> Result<ExplorationOutcome, ExploreError> {
    let ops = OperatorSet::default();
    let original_count = d.feature_count();
    let max_features = original_count + cfg.steps_per_episode;
    let mut tables = ActionValueTable::new(max_features, &ops);
    let sig = DatasetSignature::of(d);

    let baseline = cross_validated_score(d, eval_cfg).map_err(|e| {
        ExploreError::EvaluationFailure {
            episode: 0,
            step: 0,
            source: e,
        }
    })?;

    let mut candidates: Vec<Experience> = Vec::new();
    let mut traces = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let epsilon = cfg.epsilon_at(episode).clamp(0.0, 1.0);

        let mut current = d.clone();
        let mut generated: Vec<Combination> = Vec::new();
        let mut rewards: Vec<f64> = Vec::new();
        let mut invalid_attempts = 0usize;
        let mut prev_score = baseline.value;

        for step in 0..cfg.steps_per_episode {
            let mut accepted = false;
            for _attempt in 0..cfg.max_retries.max(1) {
                let action = select_action(
                    &tables,
                    epsilon,
                    &mut rng,
                    original_count + generated.len(),
                    &ops,
                );
                let mut tokens = operand_tokens(action.head, original_count, &generated);
                if let Some(tail) = action.tail {
                    tokens.extend(operand_tokens(tail, original_count, &generated));
                }
                tokens.push(Token::Operator(action.operator.clone()));
                let comb = Combination { tokens };
                // combinations already present add nothing, treat as invalid
                let duplicate = generated.contains(&comb);
                let verdict =
                    check_combination(&comb, d, th, &ops, eval_cfg, false)?;
                if duplicate || !verdict.passed() {
                    invalid_attempts += 1;
                    tables.head_feature.update(action.head, -cfg.invalid_penalty);
                    tables
                        .operator
                        .update(op_index(&ops, &action.operator), -cfg.invalid_penalty);
                    if let Some(tail) = action.tail {
                        tables.tail_feature.update(tail, -cfg.invalid_penalty);
                    }
                    continue;
                }

                let outcome = execute_combination(&comb, d, &ops)?;
                let mut values = outcome.values;
                impute_with_median(&mut values);
                current
                    .columns
                    .push((render_combination_infix(&comb, &ops), values));
                let score = cross_validated_score(&current, eval_cfg).map_err(|e| {
                    ExploreError::EvaluationFailure {
                        episode,
                        step,
                        source: e,
                    }
                })?;
                let reward = score.value - prev_score;
                tables.head_feature.update(action.head, reward);
                tables
                    .operator
                    .update(op_index(&ops, &action.operator), reward);
                if let Some(tail) = action.tail {
                    tables.tail_feature.update(tail, reward);
                }
                rewards.push(reward);
                prev_score = score.value;
                generated.push(comb);
                accepted = true;
                break;
            }
            if !accepted {
                continue; // all retries burned, move to the next step
            }
        }

        let final_score = prev_score;
        if !generated.is_empty() {
            candidates.push(Experience {
                sequence: TransformationSequence {
                    combinations: generated.clone(),
                },
                score: crate::eval::Score {
                    metric: baseline.metric,
                    value: final_score,
                },
                dataset: sig.clone(),
                origin: Origin::Rl,
                iteration: 0,
            });
        }
        traces.push(EpisodeTrace {
            episode,
            rewards,
            baseline_score: baseline.value,
            final_score,
            invalid_attempts,
        });
    }

    // highest score first, distinct by canonical rendering, stable in
    // episode order on ties
    candidates.sort_by(|a, b| b.score.value.partial_cmp(&a.score.value).unwrap());
    let mut seen: Vec<String> = Vec::new();
    let mut kept = Vec::new();
    for c in candidates {
        let rendering = render_sequence(&c.sequence, RenderStyle::Postfix, &ops);
        if seen.contains(&rendering) {
            continue;
        }
        seen.push(rendering);
        kept.push(c);
        if kept.len() == cfg.keep_top {
            break;
        }
    }
    Ok(ExplorationOutcome {
        experiences: kept,
        traces,
        tables,
    })
}

pub fn run_exploration(
    d: &Dataset,
    eval_cfg: &EvaluationConfig,
    cfg: &ExplorerConfig,
    th: &CheckThresholds,
) -> Result<Vec<Experience>, ExploreError> {
    run_exploration_traced(d, eval_cfg, cfg, th).map(|o| o.experiences)
}

fn impute_with_median(values: &mut [f64]) {
    let mut fin: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if fin.is_empty() {
        return;
    }
    fin.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if fin.len() % 2 == 1 {
        fin[fin.len() / 2]
    } else {
        (fin[fin.len() / 2 - 1] + fin[fin.len() / 2]) / 2.0
    };
    for v in values.iter_mut() {
        if v.is_nan() {
            *v = median;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::check_sequence;
    use crate::table::TaskKind;

    fn ops() -> OperatorSet {
        OperatorSet::default()
    }

    fn noisy_ratio_dataset(rows: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..rows).map(|_| rng.gen_range(0.5..4.0)).collect())
            .collect();
        let y: Vec<f64> = (0..rows)
            .map(|i| cols[0][i] / cols[1][i] + rng.gen_range(-0.01..0.01))
            .collect();
        Dataset {
            name: "ratio5".into(),
            columns: cols
                .into_iter()
                .enumerate()
                .map(|(i, c)| (format!("x{}", i + 1), c))
                .collect(),
            target: y,
            task: TaskKind::Regression,
        }
    }

    #[test]
    fn greedy_action_is_argmax_per_head() {
        let ops = ops();
        let mut tables = ActionValueTable::new(4, &ops);
        tables.head_feature.estimates[2] = 1.0;
        tables.operator.estimates[op_index(&ops, "divide")] = 1.0;
        tables.tail_feature.estimates[3] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_action(&tables, 0.0, &mut rng, 4, &ops);
        assert_eq!(a.head, 2);
        assert_eq!(a.operator, "divide");
        assert_eq!(a.tail, Some(3));
    }

    #[test]
    fn unary_operator_has_no_tail() {
        let ops = ops();
        let mut tables = ActionValueTable::new(4, &ops);
        tables.operator.estimates[op_index(&ops, "sqrt")] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_action(&tables, 0.0, &mut rng, 4, &ops);
        assert_eq!(a.operator, "sqrt");
        assert_eq!(a.tail, None);
    }

    #[test]
    fn full_exploration_draw_is_reproducible() {
        let ops = ops();
        let tables = ActionValueTable::new(4, &ops);
        let a = select_action(&tables, 1.0, &mut ChaCha8Rng::seed_from_u64(5), 4, &ops);
        let b = select_action(&tables, 1.0, &mut ChaCha8Rng::seed_from_u64(5), 4, &ops);
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_episode_score_matches_direct_evaluation() {
        let d = noisy_ratio_dataset(80, 1);
        let eval_cfg = EvaluationConfig::new(TaskKind::Regression, 3);
        let cfg = ExplorerConfig {
            episodes: 1,
            steps_per_episode: 1,
            seed: 4,
            keep_top: 5,
            ..Default::default()
        };
        let out =
            run_exploration_traced(&d, &eval_cfg, &cfg, &CheckThresholds::default()).unwrap();
        assert!(out.experiences.len() <= 1);
        if let Some(e) = out.experiences.first() {
            let transformed = crate::table::execute_sequence(
                &e.sequence,
                &d,
                crate::table::ExecutionMode::Append,
                &ops(),
            )
            .unwrap();
            let direct = cross_validated_score(&transformed, &eval_cfg).unwrap();
            assert!((direct.value - e.score.value).abs() < 1e-12);
        }
    }

    #[test]
    fn rewards_telescope_to_final_minus_baseline() {
        let d = noisy_ratio_dataset(60, 2);
        let eval_cfg = EvaluationConfig::new(TaskKind::Regression, 7);
        let cfg = ExplorerConfig {
            episodes: 6,
            steps_per_episode: 3,
            seed: 11,
            ..Default::default()
        };
        let out =
            run_exploration_traced(&d, &eval_cfg, &cfg, &CheckThresholds::default()).unwrap();
        for trace in &out.traces {
            let sum: f64 = trace.rewards.iter().sum();
            assert!(
                (sum - (trace.final_score - trace.baseline_score)).abs() < 1e-12,
                "episode {}: {} vs {}",
                trace.episode,
                sum,
                trace.final_score - trace.baseline_score
            );
        }
    }

    #[test]
    fn returned_experiences_pass_sequence_checks() {
        let d = noisy_ratio_dataset(60, 3);
        let eval_cfg = EvaluationConfig::new(TaskKind::Regression, 5);
        let cfg = ExplorerConfig {
            episodes: 8,
            steps_per_episode: 2,
            seed: 21,
            ..Default::default()
        };
        let th = CheckThresholds::default();
        let exps = run_exploration(&d, &eval_cfg, &cfg, &th).unwrap();
        assert!(!exps.is_empty());
        for e in &exps {
            let v = check_sequence(&e.sequence, &d, &th, &ops(), &eval_cfg).unwrap();
            assert!(v.passed(), "{:?}", v.reasons);
        }
    }

    #[test]
    fn same_seed_yields_identical_experiences() {
        let d = noisy_ratio_dataset(50, 4);
        let eval_cfg = EvaluationConfig::new(TaskKind::Regression, 2);
        let cfg = ExplorerConfig {
            episodes: 5,
            steps_per_episode: 2,
            seed: 33,
            ..Default::default()
        };
        let th = CheckThresholds::default();
        let a = run_exploration(&d, &eval_cfg, &cfg, &th).unwrap();
        let b = run_exploration(&d, &eval_cfg, &cfg, &th).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sequence, y.sequence);
            assert_eq!(x.score.value.to_bits(), y.score.value.to_bits());
        }
    }

    #[test]
    fn keep_top_is_a_score_prefix() {
        let d = noisy_ratio_dataset(50, 5);
        let eval_cfg = EvaluationConfig::new(TaskKind::Regression, 6);
        let th = CheckThresholds::default();
        let small = ExplorerConfig {
            episodes: 8,
            steps_per_episode: 2,
            seed: 9,
            keep_top: 3,
            ..Default::default()
        };
        let large = ExplorerConfig {
            keep_top: 8,
            ..small
        };
        let a = run_exploration(&d, &eval_cfg, &small, &th).unwrap();
        let b = run_exploration(&d, &eval_cfg, &large, &th).unwrap();
        assert!(a.len() <= b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sequence, y.sequence);
        }
    }
}
