//! The experience library: downstream-verified sequences with scores, plus
//! the entropy/redundancy measures and the quality-diversity context selector.
//!
//! Coverage of a selection is the entropy of its pattern-signature
//! distribution; redundancy is the average pairwise Jaccard similarity over
//! combination strings. Context selection greedily maximizes
//! `mean score + lambda * H(S) - mu * Red(S)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{Metric, Score};
use crate::expr::{
    parse_sequence, render_combination_postfix, render_sequence, OperatorSet, RenderStyle, Token,
    TransformationSequence,
};
use crate::table::{Dataset, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct DatasetSignature {
    pub name: String,
    pub rows: usize,
    pub features: usize,
    pub task: TaskKind,
    pub columns_hash: String,
}

impl DatasetSignature {
    pub fn of(d: &Dataset) -> Self {
        let mut hasher = Sha256::new();
        for (name, _) in &d.columns {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let columns_hash = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        Self {
            name: d.name.clone(),
            rows: d.n_rows(),
            features: d.feature_count(),
            task: d.task,
            columns_hash,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Rl,
    Llm,
    Enhancement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub sequence: TransformationSequence,
    pub score: Score,
    pub dataset: DatasetSignature,
    pub origin: Origin,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceLibrary {
    pub experiences: Vec<Experience>,
    pub version: u64,
}

impl Default for ExperienceLibrary {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelectionParams {
    pub context_size: usize,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            context_size: 5,
            lambda: 0.05,
            mu: 0.10,
        }
    }
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("empty selection")]
    EmptySelection,
    #[error("library holds {available} experiences for this dataset, {requested} requested")]
    InsufficientExperiences { available: usize, requested: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed library file: {0}")]
    Malformed(String),
}

/// Canonical, order-insensitive pattern key: sorted (operator, count) pairs
/// with counts clipped at 3.
pub fn signature_of(seq: &TransformationSequence) -> Vec<(String, u8)> {
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    for comb in &seq.combinations {
        for tok in &comb.tokens {
            if let Token::Operator(name) = tok {
                *counts.entry(name).or_insert(0) += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(name, c)| (name.to_string(), c.min(3) as u8))
        .collect()
}

/// Jaccard index over the two sequences' sets of canonical postfix
/// combination strings.
pub fn similarity(a: &TransformationSequence, b: &TransformationSequence) -> f64 {
    let ops = OperatorSet::default();
    let sa: std::collections::BTreeSet<String> = a
        .combinations
        .iter()
        .map(|c| render_combination_postfix(c, &ops))
        .collect();
    let sb: std::collections::BTreeSet<String> = b
        .combinations
        .iter()
        .map(|c| render_combination_postfix(c, &ops))
        .collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Shannon entropy (natural log) of the empirical signature distribution.
pub fn entropy(selection: &[&Experience]) -> Result<f64, LibraryError> {
    if selection.is_empty() {
        return Err(LibraryError::EmptySelection);
    }
    let mut counts: BTreeMap<Vec<(String, u8)>, usize> = BTreeMap::new();
    for e in selection {
        *counts.entry(signature_of(&e.sequence)).or_insert(0) += 1;
    }
    let n = selection.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Mean pairwise similarity over ordered pairs; 0 for a singleton.
pub fn redundancy(selection: &[&Experience]) -> Result<f64, LibraryError> {
    if selection.is_empty() {
        return Err(LibraryError::EmptySelection);
    }
    let n = selection.len();
    if n == 1 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += similarity(&selection[i].sequence, &selection[j].sequence);
            }
        }
    }
    Ok(sum / (n * (n - 1)) as f64)
}

/// The greedy objective for a candidate selection.
pub fn selection_objective(
    selection: &[&Experience],
    params: &SelectionParams,
) -> Result<f64, LibraryError> {
    let mean = selection.iter().map(|e| e.score.value).sum::<f64>() / selection.len() as f64;
    Ok(mean + params.lambda * entropy(selection)? - params.mu * redundancy(selection)?)
}

impl ExperienceLibrary {
    pub fn new() -> Self {
        Self {
            experiences: Vec::new(),
            version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    /// Library indices of experiences recorded for the given dataset.
    pub fn indices_for(&self, sig: &DatasetSignature) -> Vec<usize> {
        (0..self.experiences.len())
            .filter(|&i| self.experiences[i].dataset == *sig)
            .collect()
    }

    pub fn for_dataset(&self, sig: &DatasetSignature) -> Vec<&Experience> {
        self.experiences
            .iter()
            .filter(|e| e.dataset == *sig)
            .collect()
    }

    pub fn best_score_for(&self, sig: &DatasetSignature) -> Option<f64> {
        self.for_dataset(sig)
            .iter()
            .map(|e| e.score.value)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    /// Greedy quality-diversity selection of `params.context_size` experiences
    /// for the dataset. Ties break toward the higher score, then the earlier
    /// library index. Returned in the order they were picked.
    pub fn select_context(
        &self,
        sig: &DatasetSignature,
        params: &SelectionParams,
    ) -> Result<Vec<&Experience>, LibraryError> {
        let pool = self.indices_for(sig);
        if params.context_size == 0 || pool.len() < params.context_size {
            return Err(LibraryError::InsufficientExperiences {
                available: pool.len(),
                requested: params.context_size,
            });
        }
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < params.context_size {
            let mut best: Option<(f64, f64, usize)> = None; // (objective, score, index)
            for &i in &pool {
                if chosen.contains(&i) {
                    continue;
                }
                let trial: Vec<&Experience> = chosen
                    .iter()
                    .chain(std::iter::once(&i))
                    .map(|&j| &self.experiences[j])
                    .collect();
                let obj = selection_objective(&trial, params)?;
                let score = self.experiences[i].score.value;
                let better = match best {
                    None => true,
                    Some((bo, bs, bi)) => {
                        obj > bo
                            || (obj == bo && score > bs)
                            || (obj == bo && score == bs && i < bi)
                    }
                };
                if better {
                    best = Some((obj, score, i));
                }
            }
            chosen.push(best.expect("pool is large enough").2);
        }
        Ok(chosen.iter().map(|&i| &self.experiences[i]).collect())
    }

    /// Merges verified experiences, dropping exact duplicates always and
    /// near-duplicates (similarity above the threshold to an existing
    /// same-dataset experience) unless they score strictly higher. The version
    /// is bumped exactly once per call.
    pub fn write_back(&mut self, verified: Vec<Experience>, dedup_threshold: f64) {
        let ops = OperatorSet::default();
        for incoming in verified {
            let rendering = render_sequence(&incoming.sequence, RenderStyle::Postfix, &ops);
            let mut keep = true;
            for existing in self
                .experiences
                .iter()
                .filter(|e| e.dataset == incoming.dataset)
            {
                if render_sequence(&existing.sequence, RenderStyle::Postfix, &ops) == rendering {
                    keep = false;
                    break;
                }
                let sim = similarity(&existing.sequence, &incoming.sequence);
                if sim > dedup_threshold && incoming.score.value <= existing.score.value {
                    keep = false;
                    break;
                }
            }
            if keep {
                self.experiences.push(incoming);
            }
        }
        self.version += 1;
    }
}

// ---------------------------------------------------------------------------
// Persistence: versioned JSON, written atomically via temp-file rename.

#[derive(serde::Serialize, serde::Deserialize)]
struct WireLibrary {
    version: u64,
    experiences: Vec<WireExperience>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct WireExperience {
    dataset: DatasetSignature,
    sequence: String,
    score: Score,
    origin: Origin,
    iteration: u32,
}

impl ExperienceLibrary {
    pub fn to_json(&self) -> String {
        let ops = OperatorSet::default();
        let wire = WireLibrary {
            version: self.version,
            experiences: self
                .experiences
                .iter()
                .map(|e| WireExperience {
                    dataset: e.dataset.clone(),
                    sequence: render_sequence(&e.sequence, RenderStyle::Postfix, &ops),
                    score: e.score,
                    origin: e.origin,
                    iteration: e.iteration,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("library serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LibraryError> {
        let ops = OperatorSet::default();
        let wire: WireLibrary =
            serde_json::from_str(text).map_err(|e| LibraryError::Malformed(e.to_string()))?;
        let mut experiences = Vec::with_capacity(wire.experiences.len());
        for we in wire.experiences {
            let sequence = parse_sequence(&we.sequence, &ops, we.dataset.features)
                .map_err(|e| LibraryError::Malformed(format!("`{}`: {e}", we.sequence)))?;
            experiences.push(Experience {
                sequence,
                score: we.score,
                dataset: we.dataset,
                origin: we.origin,
                iteration: we.iteration,
            });
        }
        Ok(Self {
            experiences,
            version: wire.version,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LibraryError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(self.to_json().as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LibraryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Convenience constructor used across modules and tests.
pub fn make_score(metric: Metric, value: f64) -> Score {
    Score { metric, value }
}
