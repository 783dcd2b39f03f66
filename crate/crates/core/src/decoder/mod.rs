//! Cross-validated ridge decoders.
//!
//! A decoder maps voxel responses `V` (`N_E x N_V`) to sentence embeddings
//! `Z` (`N_E x N_D`) by solving
//!
//! ```text
//! W = argmin ||V W - Z||_F^2 + lambda ||W||_F^2
//! ```
//!
//! via the normal equations. Two algebraically equivalent routes exist: the
//! primal solve `(VᵀV + lambda I) W = VᵀZ` over an `N_V x N_V` system, and
//! the dual solve `W = Vᵀ (VVᵀ + lambda I)⁻¹ Z` over an `N_E x N_E` system.
//! [`Solver::Auto`] picks whichever system is smaller.
//!
//! [`run_cv`] wraps the solver in k-fold cross-validation with leakage-free
//! preprocessing: voxel standardization and target centering use statistics
//! of each training fold only, and the ridge penalty is chosen by a nested
//! cross-validation on the training fold.

mod folds;
mod solve;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmbeddingSet, VoxelDataset};
use crate::exec::{self, ExecMode};
use crate::matrix::Matrix;

pub use folds::complement;

/// Errors for decoder fitting, prediction, and configuration.
#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("shape mismatch: {context} (expected {expected}, found {actual})")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("normal equations are singular; use a positive ridge penalty")]
    SingularSystem,
    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Which normal-equation route to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Primal,
    Dual,
    /// Primal when `N_V <= N_E`, dual otherwise.
    Auto,
}

/// Ridge penalty: one shared value, or one value per target dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaChoice {
    Shared(f64),
    PerDimension(Vec<f64>),
}

/// How [`select_lambda`] searches the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    Shared,
    PerDimension,
}

/// Fold construction strategy for the outer cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldStrategy {
    /// Rows are shuffled by the fold seed, then split into balanced folds.
    SeededShuffle,
    /// Whole passages are dealt to folds, so related sentences never split
    /// across a train/test boundary.
    ByPassage,
    /// Rows are split in their given order; no randomness.
    Contiguous,
}

/// Cross-validation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub n_folds: usize,
    pub fold_seed: u64,
    pub fold_strategy: FoldStrategy,
    /// Candidate ridge penalties; must be positive and finite.
    pub lambda_grid: Vec<f64>,
    pub lambda_mode: LambdaMode,
    /// Folds of the nested selection loop inside each training fold.
    pub inner_folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            n_folds: 5,
            fold_seed: 0,
            fold_strategy: FoldStrategy::SeededShuffle,
            lambda_grid: default_lambda_grid(),
            lambda_mode: LambdaMode::Shared,
            inner_folds: 3,
        }
    }
}

/// Seven-point logarithmic grid from 1e-3 to 1e3.
pub fn default_lambda_grid() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(e)).collect()
}

/// Per-column preprocessing statistics captured from a training fold.
///
/// Voxel standard deviations are population deviations; constant voxels get
/// a deviation of 1 so they standardize to zero instead of dividing by zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub voxel_means: Vec<f64>,
    pub voxel_sds: Vec<f64>,
    pub target_means: Vec<f64>,
}

impl Preprocess {
    /// Identity statistics: predictions use the raw inputs unchanged.
    pub fn identity(n_voxels: usize, n_dims: usize) -> Preprocess {
        Preprocess {
            voxel_means: vec![0.0; n_voxels],
            voxel_sds: vec![1.0; n_voxels],
            target_means: vec![0.0; n_dims],
        }
    }
}

/// A fitted ridge decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    /// `N_V x N_D` weight matrix applied to standardized voxels.
    pub weights: Matrix,
    pub lambda: LambdaChoice,
    pub preprocess: Preprocess,
}

/// Held-out predictions for every sentence, assembled across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedVectors {
    /// `N_E x N_D`; row `i` is the prediction for sentence `i` made by the
    /// fold that held it out.
    pub data: Matrix,
    /// `fold_assignment[i]` is the fold that held out sentence `i`.
    pub fold_assignment: Vec<usize>,
}

impl DecodedVectors {
    /// Wraps a plain prediction matrix as a single fold 0.
    pub fn unfolded(data: Matrix) -> DecodedVectors {
        let n = data.rows();
        DecodedVectors {
            data,
            fold_assignment: vec![0; n],
        }
    }
}

/// One fold's fitted decoder and the rows it held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFit {
    pub test_rows: Vec<usize>,
    pub weights: DecoderWeights,
}

/// Full cross-validation output: pooled predictions plus per-fold decoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub decoded: DecodedVectors,
    pub folds: Vec<FoldFit>,
}

/// Inner cross-validation error for every grid value.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCurve {
    /// Grid sorted ascending.
    pub grid: Vec<f64>,
    /// Mean squared prediction error across all dimensions, per grid value.
    pub shared_mse: Vec<f64>,
    /// Per-dimension mean squared error; `grid.len() x n_dims`.
    pub per_dim_mse: Matrix,
}

/// Fits a ridge decoder on raw (unpreprocessed) inputs.
///
/// `lambda = 0` is permitted only when the chosen system is invertible;
/// otherwise the fit fails with [`DecoderError::SingularSystem`]. The
/// returned decoder carries identity preprocessing statistics.
pub fn fit_ridge(
    v: &Matrix,
    z: &Matrix,
    lambda: f64,
    solver: Solver,
) -> Result<DecoderWeights, DecoderError> {
    check_fit_inputs(v, z)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(DecoderError::InvalidConfig(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let weights = ridge_solve(v, z, &LambdaChoice::Shared(lambda), solver)?;
    Ok(DecoderWeights {
        weights,
        lambda: LambdaChoice::Shared(lambda),
        preprocess: Preprocess::identity(v.cols(), z.cols()),
    })
}

/// Applies a fitted decoder to new voxel data.
pub fn predict(weights: &DecoderWeights, v: &Matrix) -> Result<Matrix, DecoderError> {
    if v.cols() != weights.preprocess.voxel_means.len() {
        return Err(DecoderError::ShapeMismatch {
            context: "prediction columns vs fitted voxels",
            expected: weights.preprocess.voxel_means.len(),
            actual: v.cols(),
        });
    }
    let x = standardize(
        v,
        &weights.preprocess.voxel_means,
        &weights.preprocess.voxel_sds,
    );
    let mut out = x.matmul(&weights.weights);
    for i in 0..out.rows() {
        for (value, mean) in out
            .row_mut(i)
            .iter_mut()
            .zip(&weights.preprocess.target_means)
        {
            *value += mean;
        }
    }
    Ok(out)
}

/// Selects a ridge penalty from the grid by nested cross-validation.
///
/// Rows are split into `inner_folds` contiguous validation folds in their
/// given order; each inner fit standardizes voxels and centers targets using
/// inner-training statistics only. Ties in validation error break toward the
/// larger penalty. A single-element grid short-circuits without any fitting.
pub fn select_lambda(
    v: &Matrix,
    z: &Matrix,
    config: &CvConfig,
) -> Result<LambdaChoice, DecoderError> {
    check_fit_inputs(v, z)?;
    check_grid(&config.lambda_grid)?;
    if config.lambda_grid.len() == 1 {
        let l = config.lambda_grid[0];
        return Ok(match config.lambda_mode {
            LambdaMode::Shared => LambdaChoice::Shared(l),
            LambdaMode::PerDimension => LambdaChoice::PerDimension(vec![l; z.cols()]),
        });
    }
    let curve = lambda_curve(v, z, config)?;
    Ok(match config.lambda_mode {
        LambdaMode::Shared => {
            let best = argmin_prefer_last(&curve.shared_mse);
            LambdaChoice::Shared(curve.grid[best])
        }
        LambdaMode::PerDimension => {
            let per_dim = (0..z.cols())
                .map(|d| {
                    let errors = curve.per_dim_mse.col(d);
                    curve.grid[argmin_prefer_last(&errors)]
                })
                .collect();
            LambdaChoice::PerDimension(per_dim)
        }
    })
}

/// Computes the inner cross-validation error curve behind [`select_lambda`].
pub fn lambda_curve(
    v: &Matrix,
    z: &Matrix,
    config: &CvConfig,
) -> Result<LambdaCurve, DecoderError> {
    check_fit_inputs(v, z)?;
    check_grid(&config.lambda_grid)?;
    let n = v.rows();
    if config.inner_folds < 2 || config.inner_folds > n {
        return Err(DecoderError::InvalidConfig(format!(
            "inner_folds must be in 2..={n}, got {}",
            config.inner_folds
        )));
    }
    let mut grid = config.lambda_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("grid checked finite"));

    let k = config.inner_folds;
    let mut sse_per_dim = Matrix::zeros(grid.len(), z.cols());
    let base = n / k;
    let remainder = n % k;
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < remainder);
        let val_rows: Vec<usize> = (start..start + size).collect();
        start += size;
        let train_rows = folds::complement(n, &val_rows);

        let v_train = v.select_rows(&train_rows);
        let z_train = z.select_rows(&train_rows);
        let v_val = v.select_rows(&val_rows);
        let (means, sds) = column_stats(&v_train);
        let target_means = column_means(&z_train);
        let x_train = standardize(&v_train, &means, &sds);
        let z_centered = center_columns(&z_train, &target_means);
        let x_val = standardize(&v_val, &means, &sds);

        for (g, &lambda) in grid.iter().enumerate() {
            let w = ridge_solve(
                &x_train,
                &z_centered,
                &LambdaChoice::Shared(lambda),
                Solver::Auto,
            )?;
            let pred = x_val.matmul(&w);
            for (local, &row) in val_rows.iter().enumerate() {
                for (d, &target_mean) in target_means.iter().enumerate() {
                    let err = pred.get(local, d) + target_mean - z.get(row, d);
                    let acc = sse_per_dim.get(g, d) + err * err;
                    sse_per_dim.set(g, d, acc);
                }
            }
        }
    }

    let scale = 1.0 / n as f64;
    let mut per_dim_mse = sse_per_dim;
    for vptr in per_dim_mse.data_mut() {
        *vptr *= scale;
    }
    let shared_mse: Vec<f64> = (0..grid.len())
        .map(|g| per_dim_mse.row(g).iter().sum::<f64>() / z.cols() as f64)
        .collect();
    Ok(LambdaCurve {
        grid,
        shared_mse,
        per_dim_mse,
    })
}

/// Runs k-fold cross-validated decoding with the default execution mode.
pub fn run_cv(
    dataset: &VoxelDataset,
    embeddings: &EmbeddingSet,
    config: &CvConfig,
) -> Result<DecodedVectors, DecoderError> {
    Ok(run_cv_full(dataset, embeddings, config, ExecMode::default())?.decoded)
}

/// [`run_cv`] with an explicit execution mode.
pub fn run_cv_exec(
    dataset: &VoxelDataset,
    embeddings: &EmbeddingSet,
    config: &CvConfig,
    mode: ExecMode,
) -> Result<DecodedVectors, DecoderError> {
    Ok(run_cv_full(dataset, embeddings, config, mode)?.decoded)
}

/// Cross-validated decoding that also returns each fold's fitted decoder.
///
/// Folds are fitted independently (in parallel under
/// [`ExecMode::Parallel`]) and assembled in fold order, so the result is
/// identical across execution modes.
pub fn run_cv_full(
    dataset: &VoxelDataset,
    embeddings: &EmbeddingSet,
    config: &CvConfig,
    mode: ExecMode,
) -> Result<CvOutcome, DecoderError> {
    let v = &dataset.data;
    let z = &embeddings.data;
    check_fit_inputs(v, z)?;
    check_grid(&config.lambda_grid)?;
    let n = v.rows();
    let folds = folds::partition(n, config, &dataset.stimulus)?;
    let min_train = folds
        .iter()
        .map(|f| n - f.len())
        .min()
        .expect("n_folds >= 2");
    if config.lambda_grid.len() > 1 && config.inner_folds > min_train {
        return Err(DecoderError::InvalidConfig(format!(
            "inner_folds {} exceeds the smallest training fold ({min_train} rows)",
            config.inner_folds
        )));
    }

    let fits = exec::map_range(mode, folds.len(), |f| fit_fold(v, z, &folds[f], config));

    let mut decoded = Matrix::zeros(n, z.cols());
    let mut fold_assignment = vec![0usize; n];
    let mut fold_fits = Vec::with_capacity(folds.len());
    for (f, fit) in fits.into_iter().enumerate() {
        let (weights, predictions) = fit?;
        for (local, &row) in folds[f].iter().enumerate() {
            decoded.row_mut(row).copy_from_slice(predictions.row(local));
            fold_assignment[row] = f;
        }
        fold_fits.push(FoldFit {
            test_rows: folds[f].clone(),
            weights,
        });
    }
    Ok(CvOutcome {
        decoded: DecodedVectors {
            data: decoded,
            fold_assignment,
        },
        folds: fold_fits,
    })
}

/// Fits one fold: selects lambda on the training rows, fits with training
/// statistics, and predicts the held-out rows.
fn fit_fold(
    v: &Matrix,
    z: &Matrix,
    test_rows: &[usize],
    config: &CvConfig,
) -> Result<(DecoderWeights, Matrix), DecoderError> {
    let train_rows = folds::complement(v.rows(), test_rows);
    let v_train = v.select_rows(&train_rows);
    let z_train = z.select_rows(&train_rows);

    let lambda = select_lambda(&v_train, &z_train, config)?;

    let (means, sds) = column_stats(&v_train);
    let target_means = column_means(&z_train);
    let x_train = standardize(&v_train, &means, &sds);
    let z_centered = center_columns(&z_train, &target_means);
    let weights = DecoderWeights {
        weights: ridge_solve(&x_train, &z_centered, &lambda, Solver::Auto)?,
        lambda,
        preprocess: Preprocess {
            voxel_means: means,
            voxel_sds: sds,
            target_means,
        },
    };

    let v_test = v.select_rows(test_rows);
    let predictions = predict(&weights, &v_test)?;
    Ok((weights, predictions))
}

/// Solves the ridge normal equations for raw design and target matrices.
///
/// Per-dimension penalties group target columns by penalty value and solve
/// each group against the same Gram matrix plus its own ridge.
fn ridge_solve(
    v: &Matrix,
    z: &Matrix,
    lambda: &LambdaChoice,
    solver: Solver,
) -> Result<Matrix, DecoderError> {
    match lambda {
        LambdaChoice::Shared(l) => ridge_solve_shared(v, z, *l, solver),
        LambdaChoice::PerDimension(ls) => {
            if ls.len() != z.cols() {
                return Err(DecoderError::ShapeMismatch {
                    context: "per-dimension lambdas vs target dimensions",
                    expected: z.cols(),
                    actual: ls.len(),
                });
            }
            let mut weights = Matrix::zeros(v.cols(), z.cols());
            // Group dimensions sharing a penalty so each distinct value costs
            // one factorization; first occurrence order keeps this stable.
            let mut seen: Vec<f64> = Vec::new();
            for &l in ls {
                if !seen.contains(&l) {
                    seen.push(l);
                }
            }
            for l in seen {
                let dims: Vec<usize> = (0..z.cols()).filter(|&d| ls[d] == l).collect();
                let z_group = z.select_cols(&dims);
                let w_group = ridge_solve_shared(v, &z_group, l, solver)?;
                for (g, &d) in dims.iter().enumerate() {
                    for r in 0..v.cols() {
                        weights.set(r, d, w_group.get(r, g));
                    }
                }
            }
            Ok(weights)
        }
    }
}

fn ridge_solve_shared(
    v: &Matrix,
    z: &Matrix,
    lambda: f64,
    solver: Solver,
) -> Result<Matrix, DecoderError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(DecoderError::InvalidConfig(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let use_primal = match solver {
        Solver::Primal => true,
        Solver::Dual => false,
        Solver::Auto => v.cols() <= v.rows(),
    };
    if use_primal {
        let mut gram = v.gram();
        gram.add_scaled_identity(lambda);
        let rhs = v.transpose().matmul(z);
        solve::cholesky_solve(&gram, &rhs).ok_or(DecoderError::SingularSystem)
    } else {
        let mut kernel = v.outer_gram();
        kernel.add_scaled_identity(lambda);
        let alpha = solve::cholesky_solve(&kernel, z).ok_or(DecoderError::SingularSystem)?;
        Ok(v.transpose().matmul(&alpha))
    }
}

fn check_fit_inputs(v: &Matrix, z: &Matrix) -> Result<(), DecoderError> {
    if v.rows() != z.rows() {
        return Err(DecoderError::ShapeMismatch {
            context: "design rows vs target rows",
            expected: v.rows(),
            actual: z.rows(),
        });
    }
    if !v.is_finite() {
        return Err(DecoderError::NonFiniteInput("design matrix"));
    }
    if !z.is_finite() {
        return Err(DecoderError::NonFiniteInput("target matrix"));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<(), DecoderError> {
    if grid.is_empty() {
        return Err(DecoderError::InvalidGrid("grid is empty".into()));
    }
    for &l in grid {
        if !l.is_finite() || l <= 0.0 {
            return Err(DecoderError::InvalidGrid(format!(
                "grid values must be positive and finite, got {l}"
            )));
        }
    }
    Ok(())
}

/// Index of the minimum, preferring the later (larger-penalty) entry on ties.
fn argmin_prefer_last(errors: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e <= errors[best] {
            best = i;
        }
    }
    best
}

/// Column means and population standard deviations; zero deviations become 1.
fn column_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let means = column_means(m);
    let n = m.rows() as f64;
    let mut sds = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            let d = v - means[j];
            sds[j] += d * d;
        }
    }
    for sd in &mut sds {
        *sd = (*sd / n).sqrt();
        if *sd == 0.0 {
            *sd = 1.0;
        }
    }
    (means, sds)
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    let mut means = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            means[j] += v;
        }
    }
    for mean in &mut means {
        *mean /= n;
    }
    means
}

fn standardize(m: &Matrix, means: &[f64], sds: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v - means[j]) / sds[j];
        }
    }
    out
}

fn center_columns(m: &Matrix, means: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v -= means[j];
        }
    }
    out
}
