//! Dataset ingestion and sequence execution.
//!
//! Columns are plain `Vec<f64>`. Operator semantics are elementwise with
//! explicit NaN guards: partial operators (sqrt, log, reciprocal, divide)
//! yield NaN where undefined, and any non-finite result is mapped to NaN so
//! downstream learners only ever see finite values after imputation.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::expr::{
    render_combination_infix, validate_structure, Combination, OperatorDescriptor, OperatorSet,
    SequenceLimits, Token, TransformationSequence,
};

pub const DIV_GUARD: f64 = 1e-12;
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Classification => write!(f, "classification"),
            TaskKind::Regression => write!(f, "regression"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub columns: Vec<(String, Vec<f64>)>,
    pub target: Vec<f64>,
    pub task: TaskKind,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn feature_count(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i].1
    }
}

/// Result of executing one combination: the column plus stability facts.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformOutcome {
    pub values: Vec<f64>,
    pub nan_ratio: f64,
    pub has_inf: bool,
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("target column `{0}` not found")]
    MissingTarget(String),
    #[error("non-numeric cell `{value}` at row {row}, column `{column}`")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("dataset has {0} rows, need at least 2")]
    TooFewRows(usize),
    #[error("classification target has fewer than 2 distinct classes")]
    TooFewClasses,
    #[error("operator `{operator}` takes {expected} inputs, got {got}")]
    ArityMismatch {
        operator: String,
        expected: u8,
        got: usize,
    },
    #[error("input vectors have mismatched lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("degenerate column from combination {index} (`{rendering}`): {reason}")]
    DegenerateColumn {
        index: usize,
        rendering: String,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Loads a UTF-8 CSV with a header row. All non-target cells must parse as
/// numbers; the target is taken by name or, when `target` is `None`, the last
/// column.
pub fn load_csv(path: &Path, target: Option<&str>, task: TaskKind) -> Result<Dataset, TableError> {
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    load_csv_str(&text, &name, target, task)
}

pub fn load_csv_str(
    text: &str,
    name: &str,
    target: Option<&str>,
    task: TaskKind,
) -> Result<Dataset, TableError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .map(|h| h.split(',').map(|c| c.trim().to_string()).collect())
        .unwrap_or_default();
    if header.is_empty() {
        return Err(TableError::TooFewRows(0));
    }
    let target_idx = match target {
        Some(t) => header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| TableError::MissingTarget(t.to_string()))?,
        None => header.len() - 1,
    };

    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (row, line) in lines.enumerate() {
        for (ci, cell) in line.split(',').enumerate() {
            if ci >= header.len() {
                break;
            }
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| TableError::NonNumericCell {
                    row: row + 2, // 1-based, counting the header line
                    column: header[ci].clone(),
                    value: cell.trim().to_string(),
                })?;
            cols[ci].push(v);
        }
    }
    let n = cols[target_idx].len();
    if n < 2 {
        return Err(TableError::TooFewRows(n));
    }

    let target_values = cols[target_idx].clone();
    if task == TaskKind::Classification {
        let mut classes: Vec<i64> = target_values.iter().map(|v| v.round() as i64).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(TableError::TooFewClasses);
        }
    }
    let columns = header
        .into_iter()
        .zip(cols)
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, (h, c))| (h, c))
        .collect();
    Ok(Dataset {
        name: name.to_string(),
        columns,
        target: target_values,
        task,
    })
}

/// Applies one operator elementwise. Never returns ±inf; non-finite results
/// become NaN, and NaN inputs propagate.
pub fn apply_operator(
    op: &OperatorDescriptor,
    inputs: &[&[f64]],
) -> Result<Vec<f64>, TableError> {
    apply_operator_raw(op, inputs).map(|(values, _)| values)
}

/// As [`apply_operator`], additionally reporting whether any ±inf was produced
/// before the NaN mapping.
pub fn apply_operator_raw(
    op: &OperatorDescriptor,
    inputs: &[&[f64]],
) -> Result<(Vec<f64>, bool), TableError> {
    if inputs.len() != op.arity as usize {
        return Err(TableError::ArityMismatch {
            operator: op.name.clone(),
            expected: op.arity,
            got: inputs.len(),
        });
    }
    if inputs.len() == 2 && inputs[0].len() != inputs[1].len() {
        return Err(TableError::LengthMismatch(inputs[0].len(), inputs[1].len()));
    }

    let raw: Vec<f64> = match op.name.as_str() {
        "sqrt" => map1(inputs[0], |x| if x < 0.0 { f64::NAN } else { x.sqrt() }),
        "square" => map1(inputs[0], |x| x * x),
        "cube" => map1(inputs[0], |x| x * x * x),
        "reciprocal" => map1(inputs[0], |x| {
            if x.abs() < DIV_GUARD {
                f64::NAN
            } else {
                1.0 / x
            }
        }),
        "log" => map1(inputs[0], |x| if x <= 0.0 { f64::NAN } else { x.ln() }),
        "sin" => map1(inputs[0], f64::sin),
        "cos" => map1(inputs[0], f64::cos),
        "tanh" => map1(inputs[0], f64::tanh),
        "sigmoid" => map1(inputs[0], |x| 1.0 / (1.0 + (-x).exp())),
        "standard" => standardize(inputs[0]),
        "normalize" => min_max(inputs[0]),
        "quantile" => quantile_transform(inputs[0]),
        "plus" => map2(inputs[0], inputs[1], |a, b| a + b),
        "minus" => map2(inputs[0], inputs[1], |a, b| a - b),
        "multiply" => map2(inputs[0], inputs[1], |a, b| a * b),
        "divide" => map2(inputs[0], inputs[1], |a, b| {
            if b.abs() < DIV_GUARD {
                f64::NAN
            } else {
                a / b
            }
        }),
        other => {
            return Err(TableError::InvalidSequence(format!(
                "operator `{other}` has no execution semantics"
            )))
        }
    };

    let has_inf = raw.iter().any(|v| v.is_infinite());
    let values = raw
        .into_iter()
        .map(|v| if v.is_finite() { v } else { f64::NAN })
        .collect();
    Ok((values, has_inf))
}

fn map1(xs: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    xs.iter()
        .map(|&x| if x.is_nan() { f64::NAN } else { f(x) })
        .collect()
}

fn map2(xs: &[f64], ys: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    xs.iter()
        .zip(ys)
        .map(|(&a, &b)| {
            if a.is_nan() || b.is_nan() {
                f64::NAN
            } else {
                f(a, b)
            }
        })
        .collect()
}

fn finite(xs: &[f64]) -> impl Iterator<Item = f64> + '_ {
    xs.iter().copied().filter(|v| v.is_finite())
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let vals: Vec<f64> = finite(xs).collect();
    if vals.is_empty() {
        return vec![f64::NAN; xs.len()];
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let std = var.sqrt().max(STD_FLOOR);
    map1(xs, |x| (x - mean) / std)
}

fn min_max(xs: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in finite(xs) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return vec![f64::NAN; xs.len()];
    }
    if hi == lo {
        return map1(xs, |x| if x.is_nan() { f64::NAN } else { 0.0 });
    }
    map1(xs, |x| (x - lo) / (hi - lo))
}

/// Average-rank transform mapped to [0,1] by rank/(n-1) over finite entries.
fn quantile_transform(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).filter(|&i| xs[i].is_finite()).collect();
    let n = idx.len();
    if n == 0 {
        return vec![f64::NAN; xs.len()];
    }
    if n == 1 {
        let mut out = vec![f64::NAN; xs.len()];
        out[idx[0]] = 0.0;
        return out;
    }
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![f64::NAN; xs.len()];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let denom = (n - 1) as f64;
    ranks
        .into_iter()
        .map(|r| if r.is_nan() { f64::NAN } else { r / denom })
        .collect()
}

/// Evaluates one postfix combination over the dataset's original columns.
pub fn execute_combination(
    comb: &Combination,
    d: &Dataset,
    ops: &OperatorSet,
) -> Result<TransformOutcome, TableError> {
    let seq = TransformationSequence {
        combinations: vec![comb.clone()],
    };
    let diags = validate_structure(&seq, ops, d.feature_count(), &SequenceLimits::default());
    if let Some(diag) = diags.first() {
        return Err(TableError::InvalidSequence(diag.to_string()));
    }

    let mut has_inf = false;
    let mut stack: Vec<Vec<f64>> = Vec::new();
    for tok in &comb.tokens {
        match tok {
            Token::Feature(i) => stack.push(d.column(*i).to_vec()),
            Token::Operator(name) => {
                let op = ops.get(name).expect("validated above");
                if op.arity == 1 {
                    let x = stack.pop().expect("stack-valid");
                    let (v, inf) = apply_operator_raw(op, &[&x])?;
                    has_inf |= inf;
                    stack.push(v);
                } else {
                    let rhs = stack.pop().expect("stack-valid");
                    let lhs = stack.pop().expect("stack-valid");
                    let (v, inf) = apply_operator_raw(op, &[&lhs, &rhs])?;
                    has_inf |= inf;
                    stack.push(v);
                }
            }
            _ => {}
        }
    }
    let values = stack.pop().expect("stack-valid");
    let nan_count = values.iter().filter(|v| v.is_nan()).count();
    let nan_ratio = nan_count as f64 / values.len() as f64;
    Ok(TransformOutcome {
        values,
        nan_ratio,
        has_inf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    /// Originals plus generated columns.
    Append,
    /// Generated columns only.
    Replace,
}

fn impute_median(values: &mut [f64]) -> Option<f64> {
    let mut fin: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if fin.is_empty() {
        return None;
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
    Some(median)
}

fn population_variance(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

/// Executes every combination, imputes residual NaNs with the column median,
/// and assembles the transformed dataset. Generated columns are named by their
/// infix rendering.
pub fn execute_sequence(
    seq: &TransformationSequence,
    d: &Dataset,
    mode: ExecutionMode,
    ops: &OperatorSet,
) -> Result<Dataset, TableError> {
    let mut generated: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, comb) in seq.combinations.iter().enumerate() {
        let rendering = render_combination_infix(comb, ops);
        let outcome = execute_combination(comb, d, ops)?;
        let mut values = outcome.values;
        if impute_median(&mut values).is_none() {
            return Err(TableError::DegenerateColumn {
                index: i,
                rendering,
                reason: "all values NaN".into(),
            });
        }
        if population_variance(&values) < STD_FLOOR {
            return Err(TableError::DegenerateColumn {
                index: i,
                rendering,
                reason: "zero variance after imputation".into(),
            });
        }
        generated.push((rendering, values));
    }
    let columns = match mode {
        ExecutionMode::Append => {
            let mut cols = d.columns.clone();
            cols.extend(generated);
            cols
        }
        ExecutionMode::Replace => generated,
    };
    Ok(Dataset {
        name: d.name.clone(),
        columns,
        target: d.target.clone(),
        task: d.task,
    })
}
