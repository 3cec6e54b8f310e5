//! Downstream verification: built-in learners, cross-validation, and metrics.
//!
//! Everything here is deterministic given (dataset, config). Columns are
//! z-scored with training-fold statistics before fitting. Classification uses
//! stratified folds and reports F1 (macro over classes, plain binary F1 on
//! two classes); regression uses shuffled contiguous folds and reports 1-RAE.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::table::{Dataset, TaskKind, STD_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    MacroF1,
    OneMinusRae,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Score {
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Learner {
    Logistic {
        l2: f64,
        iterations: usize,
        learning_rate: f64,
    },
    Ridge {
        alpha: f64,
    },
    Knn {
        k: usize,
    },
}

impl Learner {
    pub fn default_logistic() -> Self {
        Learner::Logistic {
            l2: 1e-3,
            iterations: 200,
            learning_rate: 0.5,
        }
    }

    pub fn default_ridge() -> Self {
        Learner::Ridge { alpha: 1e-3 }
    }

    pub fn default_knn() -> Self {
        Learner::Knn { k: 5 }
    }

    /// The conventional learner for a task when none is configured.
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => Self::default_logistic(),
            TaskKind::Regression => Self::default_ridge(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvaluationConfig {
    pub folds: usize,
    pub seed: u64,
    pub learner: Learner,
}

impl EvaluationConfig {
    pub fn new(task: TaskKind, seed: u64) -> Self {
        Self {
            folds: 5,
            seed,
            learner: Learner::default_for(task),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("input vectors have mismatched lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("binary F1 requires exactly 2 classes, found {0}")]
    NotBinary(usize),
    #[error("actuals are all identical; 1-RAE undefined")]
    ConstantActuals,
    #[error("class {label} has {count} samples, fewer than {folds} folds")]
    TooFewClassSamples { label: i64, count: usize, folds: usize },
    #[error("fold count {folds} invalid for {rows} rows")]
    BadFoldCount { folds: usize, rows: usize },
    #[error("dataset has no feature columns")]
    NoFeatures,
}

pub enum Averaging {
    Binary,
    Macro,
}

fn one_vs_rest_f1(predictions: &[i64], labels: &[i64], positive: i64) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// F1 = 2PR/(P+R); zero denominators yield 0. Binary averaging takes the
/// larger label as the positive class; macro averages one-vs-rest F1 over the
/// classes present in the labels.
pub fn f1_score(
    predictions: &[i64],
    labels: &[i64],
    averaging: Averaging,
) -> Result<Score, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    match averaging {
        Averaging::Binary => {
            if classes.len() != 2 {
                return Err(EvalError::NotBinary(classes.len()));
            }
            let positive = classes[1];
            Ok(Score {
                metric: Metric::F1,
                value: one_vs_rest_f1(predictions, labels, positive),
            })
        }
        Averaging::Macro => {
            let sum: f64 = classes
                .iter()
                .map(|&c| one_vs_rest_f1(predictions, labels, c))
                .sum();
            Ok(Score {
                metric: Metric::MacroF1,
                value: sum / classes.len() as f64,
            })
        }
    }
}

/// 1-RAE = 1 - |pred - real|_1 / |real - mean(real)|_1.
pub fn one_minus_rae(predictions: &[f64], actuals: &[f64]) -> Result<Score, EvalError> {
    if predictions.len() != actuals.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), actuals.len()));
    }
    if actuals.len() < 2 {
        return Err(EvalError::EmptyInput);
    }
    let mean = actuals.iter().sum::<f64>() / actuals.len() as f64;
    let denom: f64 = actuals.iter().map(|a| (a - mean).abs()).sum();
    if denom == 0.0 {
        return Err(EvalError::ConstantActuals);
    }
    let num: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a).abs())
        .sum();
    Ok(Score {
        metric: Metric::OneMinusRae,
        value: 1.0 - num / denom,
    })
}

/// Row indices per fold: stratified per class for classification, shuffled
/// contiguous chunks for regression. Disjoint cover of 0..n.
pub fn fold_indices(d: &Dataset, cfg: &EvaluationConfig) -> Result<Vec<Vec<usize>>, EvalError> {
    let n = d.n_rows();
    if cfg.folds < 2 || cfg.folds > n {
        return Err(EvalError::BadFoldCount {
            folds: cfg.folds,
            rows: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); cfg.folds];
    match d.task {
        TaskKind::Classification => {
            let labels: Vec<i64> = d.target.iter().map(|v| v.round() as i64).collect();
            let mut classes: Vec<i64> = labels.clone();
            classes.sort_unstable();
            classes.dedup();
            for class in classes {
                let mut idx: Vec<usize> =
                    (0..n).filter(|&i| labels[i] == class).collect();
                if idx.len() < cfg.folds {
                    return Err(EvalError::TooFewClassSamples {
                        label: class,
                        count: idx.len(),
                        folds: cfg.folds,
                    });
                }
                idx.shuffle(&mut rng);
                for (j, i) in idx.into_iter().enumerate() {
                    folds[j % cfg.folds].push(i);
                }
            }
        }
        TaskKind::Regression => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            for (j, chunk) in idx.chunks(n.div_ceil(cfg.folds)).enumerate() {
                folds[j].extend_from_slice(chunk);
            }
        }
    }
    Ok(folds)
}

struct ZScore {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl ZScore {
    fn fit(d: &Dataset, rows: &[usize]) -> Self {
        let mut means = Vec::with_capacity(d.feature_count());
        let mut stds = Vec::with_capacity(d.feature_count());
        for (_, col) in &d.columns {
            let m = rows.iter().map(|&i| col[i]).sum::<f64>() / rows.len() as f64;
            let v = rows.iter().map(|&i| (col[i] - m).powi(2)).sum::<f64>() / rows.len() as f64;
            means.push(m);
            stds.push(v.sqrt().max(STD_FLOOR));
        }
        Self { means, stds }
    }

    fn row(&self, d: &Dataset, i: usize) -> Vec<f64> {
        d.columns
            .iter()
            .enumerate()
            .map(|(j, (_, col))| (col[i] - self.means[j]) / self.stds[j])
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary logistic regression by full-batch gradient descent.
/// Returns weights (last entry is the intercept).
fn fit_logistic(x: &[Vec<f64>], y: &[f64], l2: f64, iterations: usize, lr: f64) -> Vec<f64> {
    let n = x.len();
    let d = x[0].len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..iterations {
        let mut grad = vec![0.0; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let z = xi.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let err = sigmoid(z) - yi;
            for j in 0..d {
                grad[j] += err * xi[j];
            }
            grad[d] += err;
        }
        for j in 0..d {
            w[j] -= lr * (grad[j] / n as f64 + l2 * w[j]);
        }
        w[d] -= lr * grad[d] / n as f64;
    }
    w
}

fn logistic_margin(w: &[f64], xi: &[f64]) -> f64 {
    xi.iter().zip(&w[..xi.len()]).map(|(a, b)| a * b).sum::<f64>() + w[xi.len()]
}

/// Solves A w = b by Gaussian elimination with partial pivoting.
/// Returns None when a pivot collapses.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut w = vec![0.0; n];
    for col in (0..n).rev() {
        let s: f64 = (col + 1..n).map(|k| a[col][k] * w[k]).sum();
        w[col] = (b[col] - s) / a[col][col];
    }
    Some(w)
}

/// Closed-form ridge: (X'X + alpha I) w = X'y with an unpenalized intercept
/// column. Falls back to 1000x regularization when the system is singular.
fn fit_ridge(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Vec<f64> {
    let d = x[0].len() + 1; // intercept appended
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![0.0; d];
    for (xi, &yi) in x.iter().zip(y) {
        for j in 0..d {
            let xj = if j < d - 1 { xi[j] } else { 1.0 };
            xty[j] += xj * yi;
            for k in j..d {
                let xk = if k < d - 1 { xi[k] } else { 1.0 };
                xtx[j][k] += xj * xk;
            }
        }
    }
    for j in 0..d {
        for k in 0..j {
            xtx[j][k] = xtx[k][j];
        }
    }
    for (j, row) in xtx.iter_mut().enumerate().take(d - 1) {
        row[j] += alpha;
    }
    solve_linear(xtx.clone(), xty.clone()).unwrap_or_else(|| {
        let mut boosted = xtx;
        for (j, row) in boosted.iter_mut().enumerate().take(d - 1) {
            row[j] += alpha * 999.0;
        }
        solve_linear(boosted, xty).expect("heavily regularized system is nonsingular")
    })
}

fn ridge_predict(w: &[f64], xi: &[f64]) -> f64 {
    xi.iter().zip(&w[..xi.len()]).map(|(a, b)| a * b).sum::<f64>() + w[xi.len()]
}

fn knn_neighbors<'a>(
    train_x: &'a [Vec<f64>],
    xi: &[f64],
    k: usize,
) -> Vec<usize> {
    let mut dist: Vec<(f64, usize)> = train_x
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let d2: f64 = t.iter().zip(xi).map(|(a, b)| (a - b).powi(2)).sum();
            (d2, i)
        })
        .collect();
    dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dist.into_iter().take(k).map(|(_, i)| i).collect()
}

fn predict_classification(
    learner: &Learner,
    train_x: &[Vec<f64>],
    train_y: &[i64],
    test_x: &[Vec<f64>],
) -> Vec<i64> {
    let mut classes: Vec<i64> = train_y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    match *learner {
        Learner::Logistic {
            l2,
            iterations,
            learning_rate,
        } => {
            if classes.len() == 2 {
                let y: Vec<f64> = train_y
                    .iter()
                    .map(|&l| if l == classes[1] { 1.0 } else { 0.0 })
                    .collect();
                let w = fit_logistic(train_x, &y, l2, iterations, learning_rate);
                test_x
                    .iter()
                    .map(|xi| {
                        if logistic_margin(&w, xi) >= 0.0 {
                            classes[1]
                        } else {
                            classes[0]
                        }
                    })
                    .collect()
            } else {
                // one-vs-rest: highest margin wins
                let models: Vec<Vec<f64>> = classes
                    .iter()
                    .map(|&c| {
                        let y: Vec<f64> = train_y
                            .iter()
                            .map(|&l| if l == c { 1.0 } else { 0.0 })
                            .collect();
                        fit_logistic(train_x, &y, l2, iterations, learning_rate)
                    })
                    .collect();
                test_x
                    .iter()
                    .map(|xi| {
                        let best = models
                            .iter()
                            .enumerate()
                            .max_by(|(_, a), (_, b)| {
                                logistic_margin(a, xi)
                                    .partial_cmp(&logistic_margin(b, xi))
                                    .unwrap()
                            })
                            .map(|(i, _)| i)
                            .unwrap();
                        classes[best]
                    })
                    .collect()
            }
        }
        Learner::Knn { k } => test_x
            .iter()
            .map(|xi| {
                let nb = knn_neighbors(train_x, xi, k.max(1));
                // majority vote, ties toward the smaller label
                let mut best = (0usize, i64::MAX);
                for &c in &classes {
                    let votes = nb.iter().filter(|&&i| train_y[i] == c).count();
                    if votes > best.0 {
                        best = (votes, c);
                    }
                }
                best.1
            })
            .collect(),
        Learner::Ridge { alpha } => {
            // regression on the label value, rounded to the nearest class
            let y: Vec<f64> = train_y.iter().map(|&l| l as f64).collect();
            let w = fit_ridge(train_x, &y, alpha);
            test_x
                .iter()
                .map(|xi| {
                    let p = ridge_predict(&w, xi);
                    *classes
                        .iter()
                        .min_by(|&&a, &&b| {
                            (a as f64 - p)
                                .abs()
                                .partial_cmp(&(b as f64 - p).abs())
                                .unwrap()
                        })
                        .unwrap()
                })
                .collect()
        }
    }
}

fn predict_regression(
    learner: &Learner,
    train_x: &[Vec<f64>],
    train_y: &[f64],
    test_x: &[Vec<f64>],
) -> Vec<f64> {
    match *learner {
        Learner::Ridge { alpha } => {
            let w = fit_ridge(train_x, train_y, alpha);
            test_x.iter().map(|xi| ridge_predict(&w, xi)).collect()
        }
        Learner::Knn { k } => test_x
            .iter()
            .map(|xi| {
                let nb = knn_neighbors(train_x, xi, k.max(1));
                nb.iter().map(|&i| train_y[i]).sum::<f64>() / nb.len() as f64
            })
            .collect(),
        Learner::Logistic { .. } => {
            // logistic makes no sense for regression; fall back to ridge
            let w = fit_ridge(train_x, train_y, 1e-3);
            test_x.iter().map(|xi| ridge_predict(&w, xi)).collect()
        }
    }
}

/// Per-fold metric values in fold-index order.
pub fn cross_validated_fold_scores(
    d: &Dataset,
    cfg: &EvaluationConfig,
) -> Result<Vec<f64>, EvalError> {
    if d.feature_count() == 0 {
        return Err(EvalError::NoFeatures);
    }
    let folds = fold_indices(d, cfg)?;
    let mut scores = Vec::with_capacity(folds.len());
    for test in &folds {
        let train: Vec<usize> = folds
            .iter()
            .filter(|f| !std::ptr::eq(*f, test))
            .flatten()
            .copied()
            .collect();
        let scaler = ZScore::fit(d, &train);
        let train_x: Vec<Vec<f64>> = train.iter().map(|&i| scaler.row(d, i)).collect();
        let test_x: Vec<Vec<f64>> = test.iter().map(|&i| scaler.row(d, i)).collect();
        let value = match d.task {
            TaskKind::Classification => {
                let train_y: Vec<i64> =
                    train.iter().map(|&i| d.target[i].round() as i64).collect();
                let test_y: Vec<i64> =
                    test.iter().map(|&i| d.target[i].round() as i64).collect();
                let preds = predict_classification(&cfg.learner, &train_x, &train_y, &test_x);
                let mut classes = test_y.clone();
                classes.sort_unstable();
                classes.dedup();
                let averaging = if classes.len() == 2 {
                    Averaging::Binary
                } else {
                    Averaging::Macro
                };
                f1_score(&preds, &test_y, averaging)?.value
            }
            TaskKind::Regression => {
                let train_y: Vec<f64> = train.iter().map(|&i| d.target[i]).collect();
                let test_y: Vec<f64> = test.iter().map(|&i| d.target[i]).collect();
                let preds = predict_regression(&cfg.learner, &train_x, &train_y, &test_x);
                match one_minus_rae(&preds, &test_y) {
                    Ok(s) => s.value,
                    // a fold whose actuals are constant contributes zero
                    Err(EvalError::ConstantActuals) => 0.0,
                    Err(e) => return Err(e),
                }
            }
        };
        scores.push(value);
    }
    Ok(scores)
}

/// Mean metric over the folds. Deterministic given (dataset, config).
pub fn cross_validated_score(d: &Dataset, cfg: &EvaluationConfig) -> Result<Score, EvalError> {
    let scores = cross_validated_fold_scores(d, cfg)?;
    let value = scores.iter().sum::<f64>() / scores.len() as f64;
    let metric = match d.task {
        TaskKind::Classification => {
            let mut classes: Vec<i64> = d.target.iter().map(|v| v.round() as i64).collect();
            classes.sort_unstable();
            classes.dedup();
            if classes.len() == 2 {
                Metric::F1
            } else {
                Metric::MacroF1
            }
        }
        TaskKind::Regression => Metric::OneMinusRae,
    };
    Ok(Score { metric, value })
}
