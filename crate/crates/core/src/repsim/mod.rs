//! Representational similarity analysis.
//!
//! Embedding sets are compared either through their representational
//! dissimilarity matrices (RDM mode, the default) or by correlating the
//! flattened matrices directly. In RDM mode each set is first reduced to the
//! pairwise Pearson correlations among its sentence rows; two sets are then
//! compared by correlating the strict upper triangles of those matrices.
//! RDM comparisons are invariant to dimensionality and to affine maps of the
//! embedding space, which makes them the right tool for comparing models
//! with different widths.
//!
//! [`correlation_matrix`] assembles all pairwise comparisons, and
//! [`hcluster`] organizes them into a dendrogram using the dissimilarity
//! `d = 1 - r`.

mod cluster;

pub use cluster::{hcluster, Dendrogram, Linkage, Merge};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmbeddingSet;
use crate::eval::{pearson, EvalError};
use crate::exec::{self, ExecMode};
use crate::matrix::Matrix;

/// Errors for representational similarity computations.
#[derive(Debug, Error)]
pub enum RepsimError {
    #[error("shape mismatch: {context} (expected {expected}, found {actual})")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("length mismatch: expected {expected}, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("duplicate embedding set name: {0}")]
    DuplicateName(String),
}

impl From<EvalError> for RepsimError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ZeroVariance(what) => RepsimError::ZeroVariance(what),
            EvalError::LengthMismatch { expected, actual } => {
                RepsimError::LengthMismatch { expected, actual }
            }
            other => RepsimError::InvalidMatrix(other.to_string()),
        }
    }
}

/// How two embedding sets are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RsaMode {
    /// Correlate strict upper triangles of the sets' dissimilarity matrices.
    #[default]
    Rdm,
    /// Correlate the flattened embedding matrices entry by entry; requires
    /// equal dimensionality.
    Direct,
}

/// Symmetric matrix of pairwise representation correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepCorrelationMatrix {
    pub names: Vec<String>,
    /// `names.len() x names.len()`, diagonal exactly 1.
    pub values: Matrix,
}

/// Linear fit of accuracies against representation correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub slope: f64,
    pub intercept: f64,
    /// Squared Pearson correlation of the fit; 0 when accuracies are
    /// constant.
    pub r_squared: f64,
    pub n_points: usize,
}

/// Correlation between two embedding sets under the chosen mode.
pub fn rep_correlation(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    mode: RsaMode,
) -> Result<f64, RepsimError> {
    if a.n_sentences() != b.n_sentences() {
        return Err(RepsimError::ShapeMismatch {
            context: "sentence rows of the two sets",
            expected: a.n_sentences(),
            actual: b.n_sentences(),
        });
    }
    match mode {
        RsaMode::Direct => {
            if a.n_dims() != b.n_dims() {
                return Err(RepsimError::ShapeMismatch {
                    context: "direct mode requires equal dimensionality",
                    expected: a.n_dims(),
                    actual: b.n_dims(),
                });
            }
            Ok(pearson(a.data.data(), b.data.data())?)
        }
        RsaMode::Rdm => {
            let ta = rdm_upper_triangle(&a.data, &a.name)?;
            let tb = rdm_upper_triangle(&b.data, &b.name)?;
            Ok(pearson(&ta, &tb)?)
        }
    }
}

/// Strict upper triangle of a set's row-correlation matrix, in lexicographic
/// `(i, j)` order.
fn rdm_upper_triangle(data: &Matrix, name: &str) -> Result<Vec<f64>, RepsimError> {
    let n = data.rows();
    if n < 3 {
        return Err(RepsimError::ShapeMismatch {
            context: "rdm mode needs at least 3 sentences",
            expected: 3,
            actual: n,
        });
    }
    let mut triangle = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = pearson(data.row(i), data.row(j)).map_err(|e| match e {
                EvalError::ZeroVariance(_) => {
                    RepsimError::ZeroVariance(format!("{name} sentence row {i} or {j}"))
                }
                other => other.into(),
            })?;
            triangle.push(r);
        }
    }
    Ok(triangle)
}

/// All pairwise representation correlations with the default execution mode.
pub fn correlation_matrix(
    sets: &[EmbeddingSet],
    mode: RsaMode,
) -> Result<RepCorrelationMatrix, RepsimError> {
    correlation_matrix_exec(sets, mode, ExecMode::default())
}

/// [`correlation_matrix`] with an explicit execution mode.
///
/// Unordered pairs are computed once (in parallel under
/// [`ExecMode::Parallel`]) and mirrored, so the result is exactly symmetric
/// with a unit diagonal regardless of scheduling.
pub fn correlation_matrix_exec(
    sets: &[EmbeddingSet],
    mode: RsaMode,
    exec_mode: ExecMode,
) -> Result<RepCorrelationMatrix, RepsimError> {
    let k = sets.len();
    if k < 2 {
        return Err(RepsimError::DegenerateSample(format!(
            "correlation matrix needs at least 2 sets, got {k}"
        )));
    }
    for (i, s) in sets.iter().enumerate() {
        if sets[..i].iter().any(|p| p.name == s.name) {
            return Err(RepsimError::DuplicateName(s.name.clone()));
        }
    }

    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
        .collect();
    let results = exec::map_range(exec_mode, pairs.len(), |p| {
        let (i, j) = pairs[p];
        rep_correlation(&sets[i], &sets[j], mode)
    });

    let mut values = Matrix::identity(k);
    for (p, result) in results.into_iter().enumerate() {
        let (i, j) = pairs[p];
        let r = result?;
        values.set(i, j, r);
        values.set(j, i, r);
    }
    Ok(RepCorrelationMatrix {
        names: sets.iter().map(|s| s.name.clone()).collect(),
        values,
    })
}

/// Regresses decoding accuracies on representation correlations.
///
/// Constant accuracies yield `r_squared = 0`; constant correlations cannot
/// be regressed on and error out.
pub fn variance_explained(
    accuracies: &[f64],
    correlations: &[f64],
) -> Result<VarianceReport, RepsimError> {
    if accuracies.len() != correlations.len() {
        return Err(RepsimError::LengthMismatch {
            expected: accuracies.len(),
            actual: correlations.len(),
        });
    }
    let n = accuracies.len();
    if n < 3 {
        return Err(RepsimError::DegenerateSample(format!(
            "regression needs at least 3 points, got {n}"
        )));
    }
    if accuracies
        .iter()
        .chain(correlations)
        .any(|v| !v.is_finite())
    {
        return Err(RepsimError::InvalidMatrix(
            "non-finite regression input".into(),
        ));
    }
    let x = correlations;
    let y = accuracies;
    // Identical inputs are checked bitwise; the computed variance of a
    // constant list is not exactly zero once the mean rounds.
    if x.iter().all(|v| *v == x[0]) {
        return Err(RepsimError::ZeroVariance("correlations".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        var_x += (a - mx) * (a - mx);
        var_y += (b - my) * (b - my);
    }
    if var_x == 0.0 {
        return Err(RepsimError::ZeroVariance("correlations".into()));
    }
    let slope = cov / var_x;
    let intercept = my - slope * mx;
    let y_constant = y.iter().all(|v| *v == y[0]) || var_y == 0.0;
    let r_squared = if y_constant {
        0.0
    } else {
        (cov / (var_x * var_y).sqrt()).powi(2)
    };
    Ok(VarianceReport {
        slope,
        intercept,
        r_squared,
        n_points: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_set(name: &str, rows: usize, cols: usize, seed: u64) -> EmbeddingSet {
        let mut rng = rng::stream(seed, 0);
        let mut m = Matrix::zeros(rows, cols);
        rng::fill_normal(&mut rng, m.data_mut());
        EmbeddingSet::new(name.into(), m).unwrap()
    }

    #[test]
    fn rdm_self_correlation_is_one() {
        let e = random_set("a", 8, 5, 1);
        let r = rep_correlation(&e, &e, RsaMode::Rdm).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let d = rep_correlation(&e, &e, RsaMode::Direct).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rdm_mode_is_invariant_to_affine_maps() {
        let e = random_set("a", 8, 5, 2);
        let mut scaled = e.data.clone();
        for v in scaled.data_mut() {
            *v = 2.0 * *v + 3.0;
        }
        let e2 = EmbeddingSet::new("b".into(), scaled).unwrap();
        let r = rep_correlation(&e, &e2, RsaMode::Rdm).unwrap();
        assert!(
            (r - 1.0).abs() < 1e-10,
            "affine map must preserve the rdm, got {r}"
        );
    }

    #[test]
    fn rdm_mode_compares_sets_of_different_widths() {
        let a = random_set("a", 10, 4, 3);
        let b = random_set("b", 10, 7, 4);
        let r = rep_correlation(&a, &b, RsaMode::Rdm).unwrap();
        assert!((-1.0..=1.0).contains(&r));
        assert!(matches!(
            rep_correlation(&a, &b, RsaMode::Direct),
            Err(RepsimError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn direct_mode_matches_flat_pearson() {
        let a = random_set("a", 6, 3, 5);
        let b = random_set("b", 6, 3, 6);
        let r = rep_correlation(&a, &b, RsaMode::Direct).unwrap();
        let expected = pearson(a.data.data(), b.data.data()).unwrap();
        assert_eq!(r, expected);
    }

    #[test]
    fn row_count_mismatch_and_constant_rows_error() {
        let a = random_set("a", 6, 3, 7);
        let b = random_set("b", 7, 3, 8);
        assert!(matches!(
            rep_correlation(&a, &b, RsaMode::Rdm),
            Err(RepsimError::ShapeMismatch { .. })
        ));
        let mut constant = a.data.clone();
        for v in constant.row_mut(2) {
            *v = 4.0;
        }
        let c = EmbeddingSet::new("c".into(), constant).unwrap();
        assert!(matches!(
            rep_correlation(&c, &a, RsaMode::Rdm),
            Err(RepsimError::ZeroVariance(_))
        ));
    }

    #[test]
    fn eleven_sets_give_an_eleven_square_matrix() {
        let sets: Vec<EmbeddingSet> = (0..10)
            .map(|i| random_set(&format!("task-{i}"), 9, 4, 10 + i as u64))
            .chain(std::iter::once(random_set("untuned", 9, 4, 99)))
            .collect();
        let m = correlation_matrix(&sets, RsaMode::Rdm).unwrap();
        assert_eq!(m.values.rows(), 11);
        assert_eq!(m.values.cols(), 11);
        assert_eq!(m.names.len(), 11);
        for i in 0..11 {
            assert_eq!(m.values.get(i, i), 1.0);
            for j in 0..11 {
                assert_eq!(m.values.get(i, j), m.values.get(j, i));
                assert!((-1.0..=1.0).contains(&m.values.get(i, j)));
            }
        }
    }

    #[test]
    fn matrix_modes_agree_across_execution_modes() {
        let sets: Vec<EmbeddingSet> = (0..5)
            .map(|i| random_set(&format!("s{i}"), 8, 3, 20 + i as u64))
            .collect();
        let seq = correlation_matrix_exec(&sets, RsaMode::Rdm, ExecMode::Sequential).unwrap();
        let par = correlation_matrix_exec(&sets, RsaMode::Rdm, ExecMode::Parallel).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let sets = vec![random_set("same", 6, 3, 1), random_set("same", 6, 3, 2)];
        assert!(matches!(
            correlation_matrix(&sets, RsaMode::Rdm),
            Err(RepsimError::DuplicateName(_))
        ));
    }

    #[test]
    fn perfect_linear_relation_explains_all_variance() {
        let x = [0.1, 0.3, 0.5, 0.9];
        let y: Vec<f64> = x.iter().map(|v| 0.4 + 0.5 * v).collect();
        let report = variance_explained(&y, &x).unwrap();
        assert!((report.slope - 0.5).abs() < 1e-12);
        assert!((report.intercept - 0.4).abs() < 1e-12);
        assert!((report.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(report.n_points, 4);
    }

    #[test]
    fn r_squared_is_squared_pearson() {
        let x = [0.2, 0.4, 0.1, 0.8, 0.5];
        let y = [0.55, 0.61, 0.50, 0.72, 0.66];
        let report = variance_explained(&y, &x).unwrap();
        let r = pearson(&x, &y).unwrap();
        assert!((report.r_squared - r * r).abs() < 1e-12);
    }

    #[test]
    fn constant_accuracies_explain_nothing() {
        let report = variance_explained(&[0.5, 0.5, 0.5], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(report.r_squared, 0.0);
        assert_eq!(report.slope, 0.0);
    }

    #[test]
    fn degenerate_regressions_error() {
        assert!(matches!(
            variance_explained(&[0.5, 0.6], &[0.1, 0.2]),
            Err(RepsimError::DegenerateSample(_))
        ));
        assert!(matches!(
            variance_explained(&[0.5, 0.6, 0.7], &[0.1, 0.1, 0.1]),
            Err(RepsimError::ZeroVariance(_))
        ));
        assert!(matches!(
            variance_explained(&[0.5, 0.6], &[0.1, 0.2, 0.3]),
            Err(RepsimError::LengthMismatch { .. })
        ));
    }
}
