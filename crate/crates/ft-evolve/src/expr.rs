//! The postfix transformation DSL: tokens, parsing, rendering, validation.
//!
//! A [`Combination`] is one postfix program over feature and operator tokens
//! producing a single new column; a [`TransformationSequence`] is an ordered
//! list of combinations. The comma-separated surface syntax (`f1,f2,/`) is the
//! canonical exchange format between every other module, including the
//! generation policy's output schema.

use std::fmt;

use thiserror::Error;

/// Whether an operator is a linear/scaling transform or a nonlinear,
/// distribution-shaping one. Used only for behavior statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperatorGroup {
    Simple,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorDescriptor {
    pub name: String,
    pub arity: u8,
    pub group: OperatorGroup,
    /// Token emitted when rendering; binary operators use their symbol form.
    pub surface: String,
}

impl OperatorDescriptor {
    fn new(name: &str, arity: u8, group: OperatorGroup, surface: &str) -> Self {
        Self {
            name: name.to_string(),
            arity,
            group,
            surface: surface.to_string(),
        }
    }
}

/// The fixed operator vocabulary: 12 unary, 4 binary by default.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSet {
    operators: Vec<OperatorDescriptor>,
}

impl Default for OperatorSet {
    fn default() -> Self {
        use OperatorGroup::*;
        let operators = vec![
            OperatorDescriptor::new("sqrt", 1, Complex, "sqrt"),
            OperatorDescriptor::new("square", 1, Complex, "square"),
            OperatorDescriptor::new("cube", 1, Complex, "cube"),
            OperatorDescriptor::new("reciprocal", 1, Complex, "reciprocal"),
            OperatorDescriptor::new("log", 1, Complex, "log"),
            OperatorDescriptor::new("sin", 1, Complex, "sin"),
            OperatorDescriptor::new("cos", 1, Complex, "cos"),
            OperatorDescriptor::new("tanh", 1, Complex, "tanh"),
            OperatorDescriptor::new("sigmoid", 1, Complex, "sigmoid"),
            OperatorDescriptor::new("standard", 1, Simple, "standard"),
            OperatorDescriptor::new("normalize", 1, Simple, "normalize"),
            OperatorDescriptor::new("quantile", 1, Complex, "quantile"),
            OperatorDescriptor::new("plus", 2, Simple, "+"),
            OperatorDescriptor::new("minus", 2, Simple, "-"),
            OperatorDescriptor::new("multiply", 2, Simple, "*"),
            OperatorDescriptor::new("divide", 2, Simple, "/"),
        ];
        Self { operators }
    }
}

impl OperatorSet {
    pub fn new(operators: Vec<OperatorDescriptor>) -> Self {
        Self { operators }
    }

    pub fn empty() -> Self {
        Self { operators: vec![] }
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &OperatorDescriptor> {
        self.operators.iter()
    }

    pub fn get(&self, name: &str) -> Option<&OperatorDescriptor> {
        self.operators.iter().find(|o| o.name == name)
    }

    /// Looks up by canonical name or surface token.
    pub fn resolve(&self, token: &str) -> Option<&OperatorDescriptor> {
        self.operators
            .iter()
            .find(|o| o.name == token || o.surface == token)
    }

    /// Restricts to the named subset, preserving order. Unknown names are ignored.
    pub fn restrict(&self, names: &[String]) -> OperatorSet {
        OperatorSet {
            operators: self
                .operators
                .iter()
                .filter(|o| names.iter().any(|n| *n == o.name))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    /// 0-based ordinal into the dataset's original feature list.
    Feature(usize),
    Operator(String),
    Sos,
    Sep,
    Eos,
}

/// One postfix program over features and operators yielding a single column.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Combination {
    pub tokens: Vec<Token>,
}

/// An ordered list of combinations; the unit the policy generates and the
/// library stores.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TransformationSequence {
    pub combinations: Vec<Combination>,
}

/// Length caps on combinations and sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLimits {
    pub max_tokens_per_combination: usize,
    pub max_combinations: usize,
}

impl Default for SequenceLimits {
    fn default() -> Self {
        Self {
            max_tokens_per_combination: 15,
            max_combinations: 10,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("feature f{surface} out of range (dataset has {feature_count} features)")]
    FeatureOutOfRange {
        surface: usize,
        feature_count: usize,
    },
    #[error("operator `{operator}` found {found} operands on the stack, needs {needs}")]
    StackUnderflow {
        operator: String,
        needs: u8,
        found: usize,
    },
    #[error("combination leaves {0} values on the stack, expected exactly 1")]
    LeftoverOperands(usize),
    #[error("empty sequence")]
    EmptySequence,
}

/// One structural problem found by [`validate_structure`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    UnknownOperator { combination: usize, name: String },
    FeatureOutOfRange { combination: usize, index: usize },
    StackUnderflow { combination: usize },
    LeftoverOperands { combination: usize, count: usize },
    EmptyCombination { combination: usize },
    CombinationTooLong { combination: usize, len: usize },
    SequenceTooLong { len: usize },
    EmptySequence,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnknownOperator { combination, name } => {
                write!(f, "combination {combination}: unknown operator `{name}`")
            }
            Diagnostic::FeatureOutOfRange { combination, index } => {
                write!(f, "combination {combination}: feature f{} out of range", index + 1)
            }
            Diagnostic::StackUnderflow { combination } => {
                write!(f, "combination {combination}: stack underflow")
            }
            Diagnostic::LeftoverOperands { combination, count } => {
                write!(f, "combination {combination}: {count} leftover operands")
            }
            Diagnostic::EmptyCombination { combination } => {
                write!(f, "combination {combination}: empty")
            }
            Diagnostic::CombinationTooLong { combination, len } => {
                write!(f, "combination {combination}: {len} tokens exceeds cap")
            }
            Diagnostic::SequenceTooLong { len } => {
                write!(f, "sequence of {len} combinations exceeds cap")
            }
            Diagnostic::EmptySequence => write!(f, "empty sequence"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderStyle {
    Postfix,
    Infix,
}

/// Parses the comma-separated surface form into a sequence.
///
/// Feature tokens are written `f<i>` with 1-based `i`; combinations are
/// separated by `<SEP>`; a leading `<SOS>` and trailing `<EOS>` are accepted
/// and discarded. Every returned combination is stack-valid.
pub fn parse_sequence(
    text: &str,
    ops: &OperatorSet,
    feature_count: usize,
) -> Result<TransformationSequence, ParseError> {
    let raw: Vec<&str> = text
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect();

    let mut groups: Vec<Vec<Token>> = vec![vec![]];
    for (i, tok) in raw.iter().enumerate() {
        match *tok {
            "<SOS>" if i == 0 => continue,
            "<EOS>" if i == raw.len() - 1 => continue,
            "<SEP>" => groups.push(vec![]),
            t => groups.last_mut().unwrap().push(lex_token(t, ops, feature_count)?),
        }
    }

    let combinations: Vec<Combination> = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|tokens| Combination { tokens })
        .collect();
    if combinations.is_empty() {
        return Err(ParseError::EmptySequence);
    }
    for comb in &combinations {
        check_stack(comb, ops)?;
    }
    Ok(TransformationSequence { combinations })
}

fn lex_token(tok: &str, ops: &OperatorSet, feature_count: usize) -> Result<Token, ParseError> {
    if let Some(rest) = tok.strip_prefix('f') {
        if let Ok(surface) = rest.parse::<usize>() {
            if surface == 0 || surface > feature_count {
                return Err(ParseError::FeatureOutOfRange {
                    surface,
                    feature_count,
                });
            }
            return Ok(Token::Feature(surface - 1));
        }
    }
    match ops.resolve(tok) {
        Some(op) => Ok(Token::Operator(op.name.clone())),
        None => Err(ParseError::UnknownToken(tok.to_string())),
    }
}

fn check_stack(comb: &Combination, ops: &OperatorSet) -> Result<(), ParseError> {
    let mut depth: usize = 0;
    for tok in &comb.tokens {
        match tok {
            Token::Feature(_) => depth += 1,
            Token::Operator(name) => {
                let op = ops
                    .get(name)
                    .ok_or_else(|| ParseError::UnknownToken(name.clone()))?;
                if depth < op.arity as usize {
                    return Err(ParseError::StackUnderflow {
                        operator: name.clone(),
                        needs: op.arity,
                        found: depth,
                    });
                }
                depth = depth - op.arity as usize + 1;
            }
            _ => unreachable!("structural tokens are stripped during lexing"),
        }
    }
    match depth {
        1 => Ok(()),
        0 => Err(ParseError::EmptySequence),
        n => Err(ParseError::LeftoverOperands(n)),
    }
}

/// Renders a sequence as text. Postfix round-trips through [`parse_sequence`];
/// infix is the fully parenthesized human-readable form.
pub fn render_sequence(seq: &TransformationSequence, style: RenderStyle, ops: &OperatorSet) -> String {
    match style {
        RenderStyle::Postfix => seq
            .combinations
            .iter()
            .map(|c| render_combination_postfix(c, ops))
            .collect::<Vec<_>>()
            .join(",<SEP>,"),
        RenderStyle::Infix => seq
            .combinations
            .iter()
            .map(|c| render_combination_infix(c, ops))
            .collect::<Vec<_>>()
            .join(","),
    }
}

pub fn render_combination_postfix(comb: &Combination, ops: &OperatorSet) -> String {
    comb.tokens
        .iter()
        .map(|t| match t {
            Token::Feature(i) => format!("f{}", i + 1),
            Token::Operator(name) => ops
                .get(name)
                .map(|o| o.surface.clone())
                .unwrap_or_else(|| name.clone()),
            Token::Sos => "<SOS>".into(),
            Token::Sep => "<SEP>".into(),
            Token::Eos => "<EOS>".into(),
        })
        .collect::<Vec<_>>()
        .join(",")
}

pub fn render_combination_infix(comb: &Combination, ops: &OperatorSet) -> String {
    let mut stack: Vec<String> = Vec::new();
    for tok in &comb.tokens {
        match tok {
            Token::Feature(i) => stack.push(format!("f{}", i + 1)),
            Token::Operator(name) => {
                let op = ops.get(name).expect("combination validated before rendering");
                if op.arity == 1 {
                    let x = stack.pop().expect("stack-valid combination");
                    stack.push(format!("{}({x})", op.name));
                } else {
                    let rhs = stack.pop().expect("stack-valid combination");
                    let lhs = stack.pop().expect("stack-valid combination");
                    stack.push(format!("({lhs}{}{rhs})", op.surface));
                }
            }
            _ => {}
        }
    }
    stack.pop().unwrap_or_default()
}

/// Structural validation of an arbitrary (possibly hand-built) sequence.
/// Empty diagnostics means every combination is stack-valid, all operators are
/// known, all feature indices are in range, and length caps hold.
pub fn validate_structure(
    seq: &TransformationSequence,
    ops: &OperatorSet,
    feature_count: usize,
    limits: &SequenceLimits,
) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if seq.combinations.is_empty() {
        out.push(Diagnostic::EmptySequence);
    }
    if seq.combinations.len() > limits.max_combinations {
        out.push(Diagnostic::SequenceTooLong {
            len: seq.combinations.len(),
        });
    }
    for (ci, comb) in seq.combinations.iter().enumerate() {
        if comb.tokens.is_empty() {
            out.push(Diagnostic::EmptyCombination { combination: ci });
            continue;
        }
        if comb.tokens.len() > limits.max_tokens_per_combination {
            out.push(Diagnostic::CombinationTooLong {
                combination: ci,
                len: comb.tokens.len(),
            });
        }
        let mut depth: usize = 0;
        let mut broken = false;
        for tok in &comb.tokens {
            match tok {
                Token::Feature(i) => {
                    if *i >= feature_count {
                        out.push(Diagnostic::FeatureOutOfRange {
                            combination: ci,
                            index: *i,
                        });
                    }
                    depth += 1;
                }
                Token::Operator(name) => match ops.get(name) {
                    Some(op) => {
                        if depth < op.arity as usize {
                            out.push(Diagnostic::StackUnderflow { combination: ci });
                            broken = true;
                            break;
                        }
                        depth = depth - op.arity as usize + 1;
                    }
                    None => {
                        out.push(Diagnostic::UnknownOperator {
                            combination: ci,
                            name: name.clone(),
                        });
                        broken = true;
                        break;
                    }
                },
                _ => {}
            }
        }
        if !broken && depth != 1 {
            out.push(Diagnostic::LeftoverOperands {
                combination: ci,
                count: depth,
            });
        }
    }
    out
}

/// Size of the token vocabulary: operators + feature tokens + SOS/SEP/EOS.
pub fn vocabulary_size(ops: &OperatorSet, feature_count: usize) -> usize {
    ops.len() + feature_count + 3
}

/// Draws a random stack-valid combination. Shared by the seeded test
/// generators and the mock policy's append mutation.
pub fn random_combination<R: rand::Rng>(
    rng: &mut R,
    ops: &OperatorSet,
    feature_count: usize,
    max_tokens: usize,
) -> Combination {
    assert!(feature_count >= 1 && !ops.is_empty());
    let binary: Vec<&OperatorDescriptor> = ops.iter().filter(|o| o.arity == 2).collect();
    let mut tokens = vec![Token::Feature(rng.gen_range(0..feature_count))];
    let mut depth = 1usize;
    // Grow by alternating pushes and operator applications until the budget
    // would be exceeded, then drain the stack with binary operators.
    loop {
        let all: Vec<&OperatorDescriptor> = ops.iter().collect();
        let room = max_tokens.saturating_sub(tokens.len());
        if room == 0 || rng.gen_bool(0.35) {
            break;
        }
        let op = all[rng.gen_range(0..all.len())];
        if op.arity == 2 {
            if room < 2 + (depth - 1) {
                break;
            }
            tokens.push(Token::Feature(rng.gen_range(0..feature_count)));
            tokens.push(Token::Operator(op.name.clone()));
        } else {
            if room < 1 + (depth - 1) {
                break;
            }
            tokens.push(Token::Operator(op.name.clone()));
        }
    }
    while depth > 1 {
        let op = binary[rng.gen_range(0..binary.len())];
        tokens.push(Token::Operator(op.name.clone()));
        depth -= 1;
    }
    Combination { tokens }
}

/// Draws a random valid sequence within the given limits.
pub fn random_sequence<R: rand::Rng>(
    rng: &mut R,
    ops: &OperatorSet,
    feature_count: usize,
    limits: &SequenceLimits,
) -> TransformationSequence {
    let n = rng.gen_range(1..=limits.max_combinations);
    let combinations = (0..n)
        .map(|_| random_combination(rng, ops, feature_count, limits.max_tokens_per_combination))
        .collect();
    TransformationSequence { combinations }
}
