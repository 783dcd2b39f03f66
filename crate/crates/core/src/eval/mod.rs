//! Decoding evaluation: correlation, pairwise matching, error metrics,
//! score aggregation, and significance testing.
//!
//! The headline metric is pairwise matching: for every sentence pair
//! `(i, j)`, the decoder scores a win when the decoded vectors correlate
//! better with their own targets than with the swapped ones,
//!
//! ```text
//! corr(D_i, Z_i) + corr(D_j, Z_j) > corr(D_i, Z_j) + corr(D_j, Z_i),
//! ```
//!
//! with strict inequality; exact ties score zero and are counted separately.
//! A decoder with no information about the targets wins half its pairs in
//! expectation, so chance level is 0.50.

mod scores;
mod student;

pub use scores::{aggregate_scores, AggregateLevel, ScoreEntry, ScoreTable};
pub use student::{bonferroni_adjust, paired_test, TestResult, ALPHA};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmbeddingSet;
use crate::decoder::DecodedVectors;
use crate::exec::{self, ExecMode};
use crate::matrix::Matrix;

/// Outcome lists are dropped above this pair count to keep reports small.
const MAX_COLLECTED_PAIRS: usize = 250_000;

/// Errors for evaluation metrics and aggregation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: expected {expected}, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("shape mismatch: {context} (expected {expected}, found {actual})")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("empty group: {0}")]
    EmptyGroup(String),
    #[error("missing key field: {0}")]
    MissingKey(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("parse error: {0}")]
    ParseError(String),
}

/// Which sentence pairs enter the matching score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// Every unordered sentence pair.
    #[default]
    AllPairs,
    /// Only pairs whose sentences were held out by the same fold.
    WithinFold,
}

/// Pairwise matching outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// `wins / n_pairs`; ties score zero.
    pub accuracy: f64,
    pub n_pairs: usize,
    pub wins: usize,
    /// Pairs where both orderings score identically; counted as losses.
    pub ties: usize,
    /// Per-pair outcomes in lexicographic `(i, j)` order, when collected.
    pub per_pair_outcomes: Option<Vec<bool>>,
}

/// Mean squared error per decoded sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    /// `per_sentence[i]` averages the squared error over dimensions.
    pub per_sentence: Vec<f64>,
    /// Mean of the per-sentence errors.
    pub mean: f64,
}

/// Pearson product-moment correlation, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(EvalError::ZeroVariance(format!(
            "vectors of length {} carry no variance",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteInput("correlation input"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 {
        return Err(EvalError::ZeroVariance("first input".into()));
    }
    if vy == 0.0 {
        return Err(EvalError::ZeroVariance("second input".into()));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Scores decoded vectors against their targets with the default execution
/// mode, collecting per-pair outcomes when the pair count is small.
pub fn pairwise_match(
    decoded: &DecodedVectors,
    truth: &EmbeddingSet,
    mode: MatchMode,
) -> Result<MatchReport, EvalError> {
    pairwise_match_exec(decoded, truth, mode, ExecMode::default(), true)
}

/// [`pairwise_match`] with explicit execution mode and outcome collection.
///
/// Cross-correlations are computed row-parallel and pair outcomes are
/// reduced in lexicographic order, so results are identical across modes.
pub fn pairwise_match_exec(
    decoded: &DecodedVectors,
    truth: &EmbeddingSet,
    mode: MatchMode,
    exec_mode: ExecMode,
    collect_outcomes: bool,
) -> Result<MatchReport, EvalError> {
    let d = &decoded.data;
    let z = &truth.data;
    if d.rows() != z.rows() {
        return Err(EvalError::ShapeMismatch {
            context: "decoded rows vs truth rows",
            expected: z.rows(),
            actual: d.rows(),
        });
    }
    if d.cols() != z.cols() {
        return Err(EvalError::ShapeMismatch {
            context: "decoded dims vs truth dims",
            expected: z.cols(),
            actual: d.cols(),
        });
    }
    let n = d.rows();
    if n < 2 {
        return Err(EvalError::DegenerateSample(format!(
            "pairwise matching needs at least 2 sentences, got {n}"
        )));
    }
    if d.cols() < 2 {
        return Err(EvalError::ZeroVariance(
            "single-dimension rows carry no correlation".into(),
        ));
    }

    let d_centered = center_rows(d, "decoded row")?;
    let z_centered = center_rows(z, "truth row")?;

    // cross[i][j] = corr(D_i, Z_j); rows are independent jobs.
    let cross: Vec<Vec<f64>> = exec::map_range(exec_mode, n, |i| {
        let di = &d_centered[i];
        (0..n)
            .map(|j| {
                let zj = &z_centered[j];
                let dot: f64 = di.values.iter().zip(&zj.values).map(|(a, b)| a * b).sum();
                (dot / (di.norm * zj.norm)).clamp(-1.0, 1.0)
            })
            .collect()
    });

    let pairs = match mode {
        MatchMode::AllPairs => n * (n - 1) / 2,
        MatchMode::WithinFold => {
            if decoded.fold_assignment.len() != n {
                return Err(EvalError::LengthMismatch {
                    expected: n,
                    actual: decoded.fold_assignment.len(),
                });
            }
            let mut count = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    count += usize::from(decoded.fold_assignment[i] == decoded.fold_assignment[j]);
                }
            }
            count
        }
    };
    if pairs == 0 {
        return Err(EvalError::DegenerateSample(
            "no sentence pairs to score".into(),
        ));
    }

    let mut wins = 0usize;
    let mut ties = 0usize;
    let mut outcomes = if collect_outcomes && pairs <= MAX_COLLECTED_PAIRS {
        Some(Vec::with_capacity(pairs))
    } else {
        None
    };
    for i in 0..n {
        for j in (i + 1)..n {
            if mode == MatchMode::WithinFold
                && decoded.fold_assignment[i] != decoded.fold_assignment[j]
            {
                continue;
            }
            let own = cross[i][i] + cross[j][j];
            let swapped = cross[i][j] + cross[j][i];
            let win = own > swapped;
            if win {
                wins += 1;
            } else if own == swapped {
                ties += 1;
            }
            if let Some(out) = outcomes.as_mut() {
                out.push(win);
            }
        }
    }

    Ok(MatchReport {
        accuracy: wins as f64 / pairs as f64,
        n_pairs: pairs,
        wins,
        ties,
        per_pair_outcomes: outcomes,
    })
}

struct CenteredRow {
    values: Vec<f64>,
    norm: f64,
}

fn center_rows(m: &Matrix, what: &str) -> Result<Vec<CenteredRow>, EvalError> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::NonFiniteInput("matching input"));
            }
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let values: Vec<f64> = row.iter().map(|v| v - mean).collect();
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(EvalError::ZeroVariance(format!("{what} {i}")));
            }
            Ok(CenteredRow { values, norm })
        })
        .collect()
}

/// Mean squared error between decoded vectors and their targets.
pub fn mse_metric(decoded: &DecodedVectors, truth: &EmbeddingSet) -> Result<MseReport, EvalError> {
    let d = &decoded.data;
    let z = &truth.data;
    if d.rows() != z.rows() {
        return Err(EvalError::ShapeMismatch {
            context: "decoded rows vs truth rows",
            expected: z.rows(),
            actual: d.rows(),
        });
    }
    if d.cols() != z.cols() {
        return Err(EvalError::ShapeMismatch {
            context: "decoded dims vs truth dims",
            expected: z.cols(),
            actual: d.cols(),
        });
    }
    if d.rows() == 0 || d.cols() == 0 {
        return Err(EvalError::DegenerateSample("empty matrices".into()));
    }
    let per_sentence: Vec<f64> = (0..d.rows())
        .map(|i| {
            let sse: f64 = d
                .row(i)
                .iter()
                .zip(z.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sse / d.cols() as f64
        })
        .collect();
    let mean = per_sentence.iter().sum::<f64>() / per_sentence.len() as f64;
    Ok(MseReport { per_sentence, mean })
}
