//! Covariate preprocessing and L1-regularized regression onto the latent space.
//!
//! The solver minimizes `(1/(2n))·‖y − β₀ − Xβ‖² + λ‖β‖₁` with an
//! unpenalized intercept by cyclic coordinate descent on the centered Gram
//! matrix. Optimality is verified separately from explicit residuals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Matrix;
use crate::pksim::{CovariateRecord, Race, Sex};

pub const PATH_FORMAT_VERSION: u32 = 1;
pub const SELECTION_FORMAT_VERSION: u32 = 1;

/// The nine source covariates, in record order.
pub const COVARIATES: [&str; 9] = [
    "snp", "age", "sex", "weight", "hgb", "alb", "race", "extra_1", "extra_2",
];

/// The paper-style grid of regularization strengths.
pub const DEFAULT_LAMBDAS: [f64; 7] = [0.0001, 0.002, 0.005, 0.008, 0.01, 0.1, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum LassoError {
    #[error("no records to preprocess")]
    Empty,
    #[error("column '{column}' has min == max ({value}); min-max scaling is undefined")]
    DegenerateScaling { column: String, value: f64 },
    #[error("scaling constants do not match the design columns")]
    ScalingMismatch,
    #[error("need at least 2 observations, got {0}")]
    TooFewRows(usize),
    #[error("target length {targets} does not match {rows} design rows")]
    RowMismatch { rows: usize, targets: usize },
    #[error("invalid lambda {0}: must be finite and >= 0")]
    InvalidLambda(f64),
    #[error("lambda grid is empty")]
    EmptyGrid,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub column: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConstants {
    pub columns: Vec<ColumnScale>,
}

/// Whether to fit min-max constants on these records or reuse existing ones.
#[derive(Debug, Clone, Copy)]
pub enum Scaling<'a> {
    Fit,
    Apply(&'a ScalingConstants),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub column_names: Vec<String>,
    /// Index into [`COVARIATES`] for each column.
    pub group_of_column: Vec<usize>,
    /// `n × p`.
    pub values: Matrix,
    pub scaling: ScalingConstants,
}

const CONTINUOUS: [&str; 7] = ["snp", "age", "weight", "hgb", "alb", "extra_1", "extra_2"];

/// Column layout: continuous covariates keep their record position, the
/// categorical ones expand in place.
///
/// `snp, age, sex_male, sex_female, weight, hgb, alb, race_caucasian_american,
/// race_african_american, race_hispanic, race_asian, race_other, extra_1, extra_2`
pub fn design_columns() -> Vec<(String, usize)> {
    let mut cols = Vec::new();
    for (g, &name) in COVARIATES.iter().enumerate() {
        match name {
            "sex" => cols.extend(Sex::ALL.iter().map(|s| (format!("sex_{s}"), g))),
            "race" => cols.extend(Race::ALL.iter().map(|r| (format!("race_{r}"), g))),
            _ => cols.push((name.to_string(), g)),
        }
    }
    cols
}

fn raw_value(record: &CovariateRecord, column: &str) -> f64 {
    match column {
        "snp" => f64::from(record.snp),
        "age" => record.age,
        "weight" => record.weight,
        "hgb" => record.hgb,
        "alb" => record.alb,
        "extra_1" => record.extra_1,
        "extra_2" => record.extra_2,
        other => {
            if let Some(s) = other.strip_prefix("sex_") {
                f64::from(u8::from(record.sex.as_str() == s))
            } else if let Some(r) = other.strip_prefix("race_") {
                f64::from(u8::from(record.race.as_str() == r))
            } else {
                unreachable!("unknown design column {other}")
            }
        }
    }
}

/// One-hot encodes sex and race and min-max scales the continuous covariates.
pub fn preprocess_covariates(records: &[CovariateRecord], scaling: Scaling<'_>) -> Result<DesignMatrix, LassoError> {
    if records.is_empty() {
        return Err(LassoError::Empty);
    }
    let columns = design_columns();
    let p = columns.len();
    let n = records.len();
    let mut values = Matrix::zeros(n, p);
    for (i, rec) in records.iter().enumerate() {
        let row = values.row_mut(i);
        for (j, (name, _)) in columns.iter().enumerate() {
            row[j] = raw_value(rec, name);
        }
    }
    if !values.is_finite() {
        return Err(LassoError::NonFinite("covariates"));
    }

    let constants = match scaling {
        Scaling::Fit => {
            let mut out = Vec::new();
            for (j, (name, _)) in columns.iter().enumerate() {
                if !CONTINUOUS.contains(&name.as_str()) {
                    continue;
                }
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for i in 0..n {
                    let v = values.get(i, j);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                if lo == hi {
                    return Err(LassoError::DegenerateScaling {
                        column: name.clone(),
                        value: lo,
                    });
                }
                out.push(ColumnScale {
                    column: name.clone(),
                    min: lo,
                    max: hi,
                });
            }
            ScalingConstants { columns: out }
        }
        Scaling::Apply(c) => {
            let expected: Vec<&str> = columns
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| CONTINUOUS.contains(n))
                .collect();
            let given: Vec<&str> = c.columns.iter().map(|s| s.column.as_str()).collect();
            if expected != given {
                return Err(LassoError::ScalingMismatch);
            }
            if let Some(s) = c.columns.iter().find(|s| s.min == s.max) {
                return Err(LassoError::DegenerateScaling {
                    column: s.column.clone(),
                    value: s.min,
                });
            }
            c.clone()
        }
    };

    for s in &constants.columns {
        let j = columns.iter().position(|(n, _)| *n == s.column).unwrap();
        let span = s.max - s.min;
        for i in 0..n {
            let v = values.get(i, j);
            values.set(i, j, (v - s.min) / span);
        }
    }

    Ok(DesignMatrix {
        column_names: columns.iter().map(|(n, _)| n.clone()).collect(),
        group_of_column: columns.iter().map(|(_, g)| *g).collect(),
        values,
        scaling: constants,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Convergence when the largest coefficient change in a sweep falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Objective after each sweep.
    pub objective_trace: Vec<f64>,
}

/// Centered second moments of a design, shared by every target.
#[derive(Debug, Clone)]
struct CenteredGram {
    n: usize,
    x_mean: Vec<f64>,
    /// `X_cᵀX_c / n`, `p × p`.
    gram: Matrix,
}

impl CenteredGram {
    fn new(x: &Matrix) -> Self {
        let (n, p) = x.shape();
        let mut x_mean = vec![0.0; p];
        for i in 0..n {
            for (m, v) in x_mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        for m in &mut x_mean {
            *m /= n as f64;
        }
        let mut gram = Matrix::zeros(p, p);
        let mut centered = vec![0.0; p];
        for i in 0..n {
            for ((c, v), m) in centered.iter_mut().zip(x.row(i)).zip(&x_mean) {
                *c = v - m;
            }
            for a in 0..p {
                let ca = centered[a];
                if ca == 0.0 {
                    continue;
                }
                let row = gram.row_mut(a);
                for b in a..p {
                    row[b] += ca * centered[b];
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                let v = gram.get(a, b) / n as f64;
                gram.set(a, b, v);
                gram.set(b, a, v);
            }
        }
        Self { n, x_mean, gram }
    }

    /// `(X_cᵀy_c / n, y_cᵀy_c / n, ȳ)`.
    fn target_moments(&self, x: &Matrix, y: &[f64]) -> (Vec<f64>, f64, f64) {
        let n = self.n as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let p = self.x_mean.len();
        let mut xty = vec![0.0; p];
        let mut yty = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let yc = yi - y_mean;
            yty += yc * yc;
            for ((acc, v), m) in xty.iter_mut().zip(x.row(i)).zip(&self.x_mean) {
                *acc += (v - m) * yc;
            }
        }
        for v in &mut xty {
            *v /= n;
        }
        (xty, yty / n, y_mean)
    }
}

fn soft_threshold(value: f64, threshold: f64) -> f64 {
    if value > threshold {
        value - threshold
    } else if value < -threshold {
        value + threshold
    } else {
        0.0
    }
}

fn objective(gram: &Matrix, xty: &[f64], yty: f64, beta: &[f64], lambda: f64) -> f64 {
    let p = beta.len();
    let mut quad = 0.0;
    for a in 0..p {
        if beta[a] == 0.0 {
            continue;
        }
        let row = gram.row(a);
        let mut s = 0.0;
        for b in 0..p {
            s += row[b] * beta[b];
        }
        quad += beta[a] * s;
    }
    let lin: f64 = xty.iter().zip(beta).map(|(c, b)| c * b).sum();
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    0.5 * (yty - 2.0 * lin + quad) + lambda * l1
}

fn coordinate_descent(
    gram: &Matrix,
    xty: &[f64],
    yty: f64,
    lambda: f64,
    opts: &SolverOptions,
    mut beta: Vec<f64>,
) -> (Vec<f64>, usize, bool, Vec<f64>) {
    let p = xty.len();
    // q = G·β, kept in sync with β.
    let mut q = vec![0.0; p];
    for a in 0..p {
        q[a] = (0..p).map(|b| gram.get(a, b) * beta[b]).sum();
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_iterations {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let gjj = gram.get(j, j);
            if gjj <= 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let old = beta[j];
            let rho = xty[j] - q[j] + gjj * old;
            let new = soft_threshold(rho, lambda) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                for (qa, g) in q.iter_mut().zip(gram.row(j)) {
                    *qa += g * delta;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        trace.push(objective(gram, xty, yty, &beta, lambda));
        if max_change < opts.tolerance {
            converged = true;
            break;
        }
    }
    (beta, sweeps, converged, trace)
}

fn check_inputs(x: &Matrix, y: &[f64], lambda: f64) -> Result<(), LassoError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LassoError::InvalidLambda(lambda));
    }
    if x.rows() < 2 {
        return Err(LassoError::TooFewRows(x.rows()));
    }
    if y.len() != x.rows() {
        return Err(LassoError::RowMismatch {
            rows: x.rows(),
            targets: y.len(),
        });
    }
    if !x.is_finite() {
        return Err(LassoError::NonFinite("design"));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(LassoError::NonFinite("targets"));
    }
    Ok(())
}

/// Fits one target at one `lambda`, starting from zero coefficients.
pub fn fit_lasso(x: &Matrix, y: &[f64], lambda: f64, opts: &SolverOptions) -> Result<LassoFit, LassoError> {
    fit_lasso_warm(x, y, lambda, opts, None)
}

/// As [`fit_lasso`], optionally starting from `warm_start` coefficients.
pub fn fit_lasso_warm(
    x: &Matrix,
    y: &[f64],
    lambda: f64,
    opts: &SolverOptions,
    warm_start: Option<&[f64]>,
) -> Result<LassoFit, LassoError> {
    check_inputs(x, y, lambda)?;
    let g = CenteredGram::new(x);
    let (xty, yty, y_mean) = g.target_moments(x, y);
    Ok(solve(&g, &xty, yty, y_mean, lambda, opts, warm_start))
}

fn solve(
    g: &CenteredGram,
    xty: &[f64],
    yty: f64,
    y_mean: f64,
    lambda: f64,
    opts: &SolverOptions,
    warm_start: Option<&[f64]>,
) -> LassoFit {
    let p = xty.len();
    let init = warm_start.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let (beta, n_iterations, converged, objective_trace) =
        coordinate_descent(&g.gram, xty, yty, lambda, opts, init);
    let intercept = y_mean - beta.iter().zip(&g.x_mean).map(|(b, m)| b * m).sum::<f64>();
    LassoFit {
        coefficients: beta,
        intercept,
        lambda,
        n_iterations,
        converged,
        objective_trace,
    }
}

/// Objective evaluated directly from residuals.
pub fn lasso_objective(x: &Matrix, y: &[f64], coefficients: &[f64], intercept: f64, lambda: f64) -> f64 {
    let n = x.rows() as f64;
    let rss: f64 = (0..x.rows())
        .map(|i| {
            let pred = intercept + crate::nn::dot(x.row(i), coefficients);
            (y[i] - pred).powi(2)
        })
        .sum();
    rss / (2.0 * n) + lambda * coefficients.iter().map(|b| b.abs()).sum::<f64>()
}

/// Largest violation of the stationarity conditions, from explicit residuals:
/// `|X_jᵀr/n − λ·sign(β_j)|` for active coordinates and `max(0, |X_jᵀr/n| − λ)`
/// for zero ones.
pub fn kkt_violation(x: &Matrix, y: &[f64], fit: &LassoFit) -> f64 {
    let (n, p) = x.shape();
    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - fit.intercept - crate::nn::dot(x.row(i), &fit.coefficients))
        .collect();
    let mut worst: f64 = 0.0;
    for j in 0..p {
        let corr = (0..n).map(|i| x.get(i, j) * residuals[i]).sum::<f64>() / n as f64;
        let beta = fit.coefficients[j];
        let v = if beta != 0.0 {
            (corr - fit.lambda * beta.signum()).abs()
        } else {
            (corr.abs() - fit.lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Smallest λ for which the all-zero solution is optimal.
pub fn lambda_max(x: &Matrix, y: &[f64]) -> f64 {
    let g = CenteredGram::new(x);
    let (xty, _, _) = g.target_moments(x, y);
    xty.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPathResult {
    pub format_version: u32,
    /// Ascending.
    pub lambdas: Vec<f64>,
    pub column_names: Vec<String>,
    pub group_of_column: Vec<usize>,
    pub covariates: Vec<String>,
    pub latent_dim: usize,
    /// `[lambda][latent dim][column]`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    /// `[lambda][latent dim]`.
    pub intercepts: Vec<Vec<f64>>,
    pub converged: Vec<Vec<bool>>,
    pub iterations: Vec<Vec<usize>>,
    /// `[lambda][covariate]`: mean over latent dims of the summed |β| of the covariate's columns.
    pub importance: Vec<Vec<f64>>,
    pub solver: SolverOptions,
}

impl LassoPathResult {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().flatten().all(|&c| c)
    }

    /// Non-converged `(lambda, latent dim)` cells.
    pub fn unconverged_cells(&self) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        for (li, row) in self.converged.iter().enumerate() {
            for (d, &c) in row.iter().enumerate() {
                if !c {
                    out.push((self.lambdas[li], d));
                }
            }
        }
        out
    }

    pub fn fit_at(&self, lambda_index: usize, dim: usize) -> LassoFit {
        LassoFit {
            coefficients: self.coefficients[lambda_index][dim].clone(),
            intercept: self.intercepts[lambda_index][dim],
            lambda: self.lambdas[lambda_index],
            n_iterations: self.iterations[lambda_index][dim],
            converged: self.converged[lambda_index][dim],
            objective_trace: Vec::new(),
        }
    }

    /// Linear latent predictions (`n × latent_dim`) at one grid index.
    pub fn predict(&self, lambda_index: usize, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.latent_dim);
        for i in 0..x.rows() {
            for d in 0..self.latent_dim {
                let v = self.intercepts[lambda_index][d] + crate::nn::dot(x.row(i), &self.coefficients[lambda_index][d]);
                out.set(i, d, v);
            }
        }
        out
    }
}

pub fn validate_grid(lambdas: &[f64]) -> Result<(), LassoError> {
    if lambdas.is_empty() {
        return Err(LassoError::EmptyGrid);
    }
    if let Some(&bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(LassoError::InvalidLambda(bad));
    }
    Ok(())
}

/// Fits every latent dimension along the λ grid, largest λ first with warm
/// starts. Duplicate grid values share one fit.
pub fn fit_path(
    design: &DesignMatrix,
    latent_mu: &Matrix,
    lambdas: &[f64],
    opts: &SolverOptions,
) -> Result<LassoPathResult, LassoError> {
    validate_grid(lambdas)?;
    let x = &design.values;
    if latent_mu.rows() != x.rows() {
        return Err(LassoError::RowMismatch {
            rows: x.rows(),
            targets: latent_mu.rows(),
        });
    }
    check_inputs(x, &vec![0.0; x.rows()], 0.0)?;
    if !latent_mu.is_finite() {
        return Err(LassoError::NonFinite("latent targets"));
    }
    let mut grid = lambdas.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut unique = grid.clone();
    unique.dedup();

    let latent_dim = latent_mu.cols();
    let p = x.cols();
    let g = CenteredGram::new(x);
    // fits[u][d] for unique lambdas, ascending.
    let mut fits: Vec<Vec<Option<LassoFit>>> = vec![vec![None; latent_dim]; unique.len()];
    for d in 0..latent_dim {
        let y: Vec<f64> = (0..x.rows()).map(|i| latent_mu.get(i, d)).collect();
        let (xty, yty, y_mean) = g.target_moments(x, &y);
        let mut warm = vec![0.0; p];
        for u in (0..unique.len()).rev() {
            let fit = solve(&g, &xty, yty, y_mean, unique[u], opts, Some(&warm));
            warm.clone_from(&fit.coefficients);
            fits[u][d] = Some(fit);
        }
    }

    let n_cov = COVARIATES.len();
    let mut result = LassoPathResult {
        format_version: PATH_FORMAT_VERSION,
        lambdas: grid.clone(),
        column_names: design.column_names.clone(),
        group_of_column: design.group_of_column.clone(),
        covariates: COVARIATES.iter().map(|s| s.to_string()).collect(),
        latent_dim,
        coefficients: Vec::new(),
        intercepts: Vec::new(),
        converged: Vec::new(),
        iterations: Vec::new(),
        importance: Vec::new(),
        solver: *opts,
    };
    for &lambda in &grid {
        let u = unique.iter().position(|&v| v == lambda).unwrap();
        let cells: Vec<&LassoFit> = fits[u].iter().map(|f| f.as_ref().unwrap()).collect();
        let mut importance = vec![0.0; n_cov];
        for fit in &cells {
            for (j, b) in fit.coefficients.iter().enumerate() {
                importance[design.group_of_column[j]] += b.abs();
            }
        }
        for v in &mut importance {
            *v /= latent_dim as f64;
        }
        result.coefficients.push(cells.iter().map(|f| f.coefficients.clone()).collect());
        result.intercepts.push(cells.iter().map(|f| f.intercept).collect());
        result.converged.push(cells.iter().map(|f| f.converged).collect());
        result.iterations.push(cells.iter().map(|f| f.n_iterations).collect());
        result.importance.push(importance);
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub covariate: String,
    pub lambda: f64,
    pub importance: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub retained: Vec<String>,
    pub eliminated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub format_version: u32,
    pub zero_threshold: f64,
    pub per_lambda: Vec<LambdaSelection>,
    /// Per covariate, the smallest grid λ from which importance stays at or
    /// below the threshold; `None` when it is retained at the largest λ.
    pub elimination_lambda: Vec<(String, Option<f64>)>,
    pub series: Vec<SeriesRow>,
}

impl SelectionReport {
    pub fn elimination_of(&self, covariate: &str) -> Option<Option<f64>> {
        self.elimination_lambda
            .iter()
            .find(|(c, _)| c == covariate)
            .map(|(_, l)| *l)
    }

    pub fn retained_at(&self, lambda: f64) -> Option<&[String]> {
        self.per_lambda
            .iter()
            .find(|s| s.lambda == lambda)
            .map(|s| s.retained.as_slice())
    }
}

pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-10;

pub fn selection_report(path: &LassoPathResult, zero_threshold: f64) -> SelectionReport {
    let mut per_lambda = Vec::new();
    let mut series = Vec::new();
    for (li, &lambda) in path.lambdas.iter().enumerate() {
        let mut sel = LambdaSelection {
            lambda,
            retained: Vec::new(),
            eliminated: Vec::new(),
        };
        for (c, name) in path.covariates.iter().enumerate() {
            let imp = path.importance[li][c];
            let retained = imp > zero_threshold;
            if retained {
                sel.retained.push(name.clone());
            } else {
                sel.eliminated.push(name.clone());
            }
            series.push(SeriesRow {
                covariate: name.clone(),
                lambda,
                importance: imp,
                retained,
            });
        }
        per_lambda.push(sel);
    }
    let elimination_lambda = path
        .covariates
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mut elim = None;
            for li in (0..path.lambdas.len()).rev() {
                if path.importance[li][c] > zero_threshold {
                    break;
                }
                elim = Some(path.lambdas[li]);
            }
            (name.clone(), elim)
        })
        .collect();
    SelectionReport {
        format_version: SELECTION_FORMAT_VERSION,
        zero_threshold,
        per_lambda,
        elimination_lambda,
        series,
    }
}

/// Orders elimination points with "never eliminated" above every grid value.
pub fn elimination_rank(lambda: Option<f64>) -> f64 {
    lambda.unwrap_or(f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn record(age: f64, sex: Sex, race: Race) -> CovariateRecord {
        CovariateRecord {
            snp: 2,
            age,
            sex,
            weight: 70.0 + age,
            hgb: 12.0 + age / 100.0,
            alb: 4.0 + age / 1000.0,
            race,
            extra_1: age / 100.0,
            extra_2: 1.0 - age / 100.0,
        }
    }

    fn three_records() -> Vec<CovariateRecord> {
        let mut v = vec![
            record(30.0, Sex::Male, Race::Asian),
            record(50.0, Sex::Female, Race::Other),
            record(70.0, Sex::Male, Race::Hispanic),
        ];
        v[1].snp = 1;
        v[2].snp = 3;
        v
    }

    #[test]
    fn column_layout() {
        let cols = design_columns();
        assert_eq!(cols.len(), 14);
        assert_eq!(cols[2].0, "sex_male");
        assert_eq!(cols[7].0, "race_caucasian_american");
        assert_eq!(cols[13].0, "extra_2");
    }

    #[test]
    fn min_max_and_one_hot() {
        let d = preprocess_covariates(&three_records(), Scaling::Fit).unwrap();
        let age = d.column_names.iter().position(|c| c == "age").unwrap();
        assert_eq!(d.values.get(2, age), 1.0);
        assert_eq!(d.values.get(0, age), 0.0);
        assert_eq!(d.values.get(1, age), 0.5);
        let male = d.column_names.iter().position(|c| c == "sex_male").unwrap();
        assert_eq!((d.values.get(0, male), d.values.get(0, male + 1)), (1.0, 0.0));
        for i in 0..3 {
            let race_sum: f64 = (7..12).map(|j| d.values.get(i, j)).sum();
            assert_eq!(race_sum, 1.0);
        }
    }

    #[test]
    fn apply_scaling_reuses_constants() {
        let recs = three_records();
        let fit = preprocess_covariates(&recs, Scaling::Fit).unwrap();
        let applied = preprocess_covariates(&recs[..1], Scaling::Apply(&fit.scaling)).unwrap();
        assert_eq!(applied.values.row(0), fit.values.row(0));
    }

    #[test]
    fn degenerate_column_is_an_error() {
        let mut recs = three_records();
        for r in &mut recs {
            r.alb = 4.1;
        }
        assert!(matches!(
            preprocess_covariates(&recs, Scaling::Fit),
            Err(LassoError::DegenerateScaling { ref column, .. }) if column == "alb"
        ));
        assert_eq!(preprocess_covariates(&[], Scaling::Fit), Err(LassoError::Empty));
    }

    #[test]
    fn single_predictor_soft_threshold() {
        let x = Matrix::from_rows(&[[1.0], [-1.0], [1.0], [-1.0]]).unwrap();
        let y = [2.0, 0.0, 2.0, 0.0];
        let fit = fit_lasso(&x, &y, 0.3, &SolverOptions::default()).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coefficients[0], 0.7, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.intercept, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn above_lambda_max_everything_is_zero() {
        let x = Matrix::from_rows(&[[1.0, 0.2], [0.0, 0.9], [0.5, 0.1], [0.3, 0.3], [0.8, 0.6]]).unwrap();
        let y = [1.0, -0.5, 0.3, 0.2, 0.9];
        let lmax = lambda_max(&x, &y);
        let fit = fit_lasso(&x, &y, lmax, &SolverOptions::default()).unwrap();
        assert!(fit.coefficients.iter().all(|&b| b == 0.0));
        let mean = y.iter().sum::<f64>() / 5.0;
        assert_abs_diff_eq!(fit.intercept, mean, epsilon = 1e-15);
        let below = fit_lasso(&x, &y, lmax * 0.9, &SolverOptions::default()).unwrap();
        assert!(below.coefficients.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn input_errors() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let opts = SolverOptions::default();
        assert_eq!(fit_lasso(&x, &[1.0, 2.0], -1.0, &opts).unwrap_err(), LassoError::InvalidLambda(-1.0));
        assert!(matches!(fit_lasso(&x, &[1.0], 0.1, &opts), Err(LassoError::RowMismatch { .. })));
        let one = Matrix::from_rows(&[[1.0]]).unwrap();
        assert_eq!(fit_lasso(&one, &[1.0], 0.1, &opts).unwrap_err(), LassoError::TooFewRows(1));
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let x = Matrix::from_rows(&[[1.0, 0.9], [0.0, 0.1], [0.5, 0.45], [0.2, 0.25]]).unwrap();
        let y = [1.0, 0.0, 0.5, 0.3];
        let opts = SolverOptions {
            tolerance: 1e-14,
            max_iterations: 2,
        };
        let fit = fit_lasso(&x, &y, 0.0, &opts).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.n_iterations, 2);
    }

    fn toy_path(importance: Vec<Vec<f64>>, lambdas: Vec<f64>) -> LassoPathResult {
        LassoPathResult {
            format_version: PATH_FORMAT_VERSION,
            latent_dim: 1,
            coefficients: vec![vec![vec![]]; lambdas.len()],
            intercepts: vec![vec![0.0]; lambdas.len()],
            converged: vec![vec![true]; lambdas.len()],
            iterations: vec![vec![1]; lambdas.len()],
            lambdas,
            column_names: vec![],
            group_of_column: vec![],
            covariates: COVARIATES.iter().map(|s| s.to_string()).collect(),
            importance,
            solver: SolverOptions::default(),
        }
    }

    #[test]
    fn all_zero_path_eliminates_at_smallest_lambda() {
        let path = toy_path(vec![vec![0.0; 9]; 3], vec![0.1, 0.5, 1.0]);
        let rep = selection_report(&path, DEFAULT_ZERO_THRESHOLD);
        for (_, l) in &rep.elimination_lambda {
            assert_eq!(*l, Some(0.1));
        }
        for s in &rep.per_lambda {
            assert!(s.retained.is_empty());
            assert_eq!(s.eliminated.len(), 9);
        }
        assert_eq!(rep.series.len(), 27);
    }

    #[test]
    fn elimination_lambda_requires_staying_zero() {
        let mut imp = vec![vec![0.0; 9]; 4];
        // snp: nonzero everywhere; age: zero at 0.1 but back at 0.5; alb: zero from 0.5.
        for row in &mut imp {
            row[0] = 1.0;
        }
        imp[0][1] = 0.3;
        imp[2][1] = 0.2;
        imp[0][5] = 0.2;
        imp[1][5] = 0.1;
        let path = toy_path(imp, vec![0.01, 0.1, 0.5, 1.0]);
        let rep = selection_report(&path, DEFAULT_ZERO_THRESHOLD);
        assert_eq!(rep.elimination_of("snp"), Some(None));
        assert_eq!(rep.elimination_of("age"), Some(Some(1.0)));
        assert_eq!(rep.elimination_of("alb"), Some(Some(0.5)));
        assert_eq!(rep.elimination_of("weight"), Some(Some(0.01)));
        assert_eq!(rep.retained_at(0.1).unwrap(), ["snp", "alb"]);
    }

    /// Least squares with intercept via the normal equations and partial-pivot
    /// elimination; independent of the solver's centered Gram.
    fn least_squares(x: &Matrix, y: &[f64]) -> Vec<f64> {
        let (n, p) = x.shape();
        let k = p + 1;
        let aug = |i: usize, j: usize| if j == 0 { 1.0 } else { x.get(i, j - 1) };
        let mut a = vec![vec![0.0; k + 1]; k];
        for r in 0..k {
            for c in 0..k {
                a[r][c] = (0..n).map(|i| aug(i, r) * aug(i, c)).sum();
            }
            a[r][k] = (0..n).map(|i| aug(i, r) * y[i]).sum();
        }
        for col in 0..k {
            let piv = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..k {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=k {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..k).map(|r| a[r][k] / a[r][r]).collect()
    }

    fn random_problem(seed: u64, n: usize, p: usize) -> (Matrix, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_vec(n, p, (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let beta: Vec<f64> = (0..p).map(|j| if j % 3 == 0 { 0.0 } else { rng.random_range(-2.0..2.0) }).collect();
        let y = (0..n)
            .map(|i| 0.5 + crate::nn::dot(x.row(i), &beta) + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        (x, y)
    }

    #[test]
    fn unpenalized_fit_matches_normal_equations() {
        let (x, y) = random_problem(4, 100, 6);
        let tight = SolverOptions {
            tolerance: 1e-14,
            max_iterations: 100_000,
        };
        let fit = fit_lasso(&x, &y, 0.0, &tight).unwrap();
        let ls = least_squares(&x, &y);
        assert_abs_diff_eq!(fit.intercept, ls[0], epsilon = 1e-9);
        for (b, e) in fit.coefficients.iter().zip(&ls[1..]) {
            assert_abs_diff_eq!(*b, *e, epsilon = 1e-9);
        }
    }

    #[test]
    fn path_targets_are_fit_independently() {
        let recs: Vec<CovariateRecord> = (0..40)
            .map(|i| {
                let mut r = record(20.0 + i as f64, Sex::ALL[i % 2], Race::ALL[i % 5]);
                r.snp = (i % 3) as u8 + 1;
                r.extra_1 = ((i * 7) % 11) as f64 / 11.0;
                r
            })
            .collect();
        let design = preprocess_covariates(&recs, Scaling::Fit).unwrap();
        let mut mu = Matrix::zeros(40, 2);
        for i in 0..40 {
            mu.set(i, 0, design.values.get(i, 1) - 0.5 * design.values.get(i, 0));
            mu.set(i, 1, ((i * 13) % 7) as f64 / 7.0);
        }
        let path = fit_path(&design, &mu, &[1.0, 0.001, 0.01, 0.01], &SolverOptions::default()).unwrap();
        assert_eq!(path.lambdas, vec![0.001, 0.01, 0.01, 1.0]);
        assert_eq!(path.coefficients[1], path.coefficients[2]);
        assert!(path.all_converged());
        let y1: Vec<f64> = (0..40).map(|i| mu.get(i, 1)).collect();
        let direct = fit_lasso(&design.values, &y1, 0.01, &SolverOptions::default()).unwrap();
        let from_path = path.fit_at(1, 1);
        for (a, b) in direct.coefficients.iter().zip(&from_path.coefficients) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-7);
        }
        assert!(path.importance[3].iter().all(|&v| v == 0.0));
        let snp = path.covariates.iter().position(|c| c == "snp").unwrap();
        assert!(path.importance[0][snp] > 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(48))]

        #[test]
        fn objective_trace_never_increases(seed in 0u64..1000, p in 1usize..8, lambda in 0.0..0.3f64) {
            let (x, y) = random_problem(seed, 60, p);
            let fit = fit_lasso(&x, &y, lambda, &SolverOptions::default()).unwrap();
            for w in fit.objective_trace.windows(2) {
                proptest::prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            }
            let direct = lasso_objective(&x, &y, &fit.coefficients, fit.intercept, lambda);
            let last = *fit.objective_trace.last().unwrap();
            proptest::prop_assert!((direct - last).abs() <= 1e-9 * direct.max(1.0));
        }

        #[test]
        fn converged_fits_satisfy_kkt(seed in 0u64..1000, p in 1usize..10, lambda in 0.0..0.5f64) {
            let (x, y) = random_problem(seed, 80, p);
            let fit = fit_lasso(&x, &y, lambda, &SolverOptions::default()).unwrap();
            proptest::prop_assert!(fit.converged);
            proptest::prop_assert!(kkt_violation(&x, &y, &fit) < 10.0 * SolverOptions::default().tolerance);
        }

        #[test]
        fn row_order_does_not_matter(seed in 0u64..1000, p in 1usize..6, lambda in 0.001..0.2f64) {
            let (x, y) = random_problem(seed, 50, p);
            let perm: Vec<usize> = (0..50).map(|i| (i * 17 + 3) % 50).collect();
            let xp = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let opts = SolverOptions { tolerance: 1e-12, max_iterations: 100_000 };
            let a = fit_lasso(&x, &y, lambda, &opts).unwrap();
            let b = fit_lasso(&xp, &yp, lambda, &opts).unwrap();
            for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
                proptest::prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
