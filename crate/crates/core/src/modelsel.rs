//! Cross-validated choice of the weight and penalty parameters.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::blockmodel::{PrecisionModel, Target};
use crate::clusterpath::{compute_path, fit_at, refit, refit_settings, ClusterpathSolution, PathSettings};
use crate::error::{CggmError, Result};
use crate::optimizer::SolverSettings;
use crate::penalty::{build_weights, reference_matrix, PenaltyConfig};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub folds: usize,
    pub knn: Vec<usize>,
    pub phi: Vec<f64>,
    /// Explicit sparsity values; the data-driven grid is used when absent.
    pub lambda_s: Option<Vec<f64>>,
    pub target: Target,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self::for_target(Target::Precision)
    }
}

impl CvPlan {
    pub fn for_target(target: Target) -> Self {
        let phi = match target {
            Target::Precision => vec![1.0],
            Target::Covariance => vec![1.0, 2.0, 3.0],
        };
        Self { folds: 5, knn: vec![1, 3, 5], phi, lambda_s: None, target, seed: 0 }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.folds < 2 {
            return Err(CggmError::InvalidInput(format!("need at least 2 folds, got {}", self.folds)));
        }
        if n < self.folds {
            return Err(CggmError::InvalidInput(format!("{n} observations cannot fill {} folds", self.folds)));
        }
        if self.knn.is_empty() || self.phi.is_empty() || self.lambda_s.as_ref().is_some_and(Vec::is_empty) {
            return Err(CggmError::InvalidInput("empty tuning grid".into()));
        }
        if self.knn.contains(&0) || self.phi.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(CggmError::InvalidInput("knn and phi must be positive".into()));
        }
        if let Some(ls) = &self.lambda_s {
            if ls.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
                return Err(CggmError::InvalidInput("lambda_s values must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvSettings<T> {
    pub path: PathSettings<T>,
    pub refit: SolverSettings<T>,
    /// Smoothing width of the absolute value, also the zero threshold for refits.
    pub penalty_eps: T,
}

impl<T: Real> Default for CvSettings<T> {
    fn default() -> Self {
        let path = PathSettings::default();
        Self { refit: refit_settings(&path.solver), path, penalty_eps: T::lit(PenaltyConfig::<T>::DEFAULT_EPS_ABS) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvRow<T> {
    pub knn: usize,
    pub phi: T,
    pub lambda_s: T,
    pub lambda_c: T,
    pub raw_score: T,
    pub refit_score: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Choice<T> {
    pub knn: usize,
    pub phi: T,
    pub lambda_s: T,
    pub lambda_c: T,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult<T: Real> {
    /// Choice by the score of refitted fold models.
    pub best: Choice<T>,
    /// Choice by the score of penalized fold models.
    pub best_raw: Choice<T>,
    /// Full-data refit at `best`.
    pub refit: PrecisionModel<T>,
    /// Full-data penalized fit at `best_raw`.
    pub raw: PrecisionModel<T>,
    pub table: Vec<CvRow<T>>,
    pub folds: Vec<usize>,
    pub lambda_s_grid: Vec<T>,
}

/// Columns minus their means.
pub fn center<T: Real>(x: &DMatrix<T>) -> DMatrix<T> {
    let n = T::count(x.nrows().max(1));
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Centered columns scaled to unit sample standard deviation.
pub fn standardize<T: Real>(x: &DMatrix<T>) -> Result<DMatrix<T>> {
    if x.nrows() < 2 {
        return Err(CggmError::InvalidInput("standardizing needs at least two observations".into()));
    }
    let mut out = center(x);
    let denom = T::count(x.nrows() - 1);
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let sd = (col.norm_squared() / denom).sqrt();
        if !(sd > T::zero()) {
            return Err(CggmError::Degenerate(format!("column {j} is constant")));
        }
        col.unscale_mut(sd);
    }
    Ok(out)
}

/// Sample covariance with denominator `n - 1`.
pub fn sample_covariance<T: Real>(x: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = x.nrows();
    if n < 2 {
        return Err(CggmError::InvalidInput(format!("need at least two observations, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CggmError::InvalidInput("data contain non-finite values".into()));
    }
    let c = center(x);
    let s = c.transpose() * &c / T::count(n - 1);
    Ok((&s + s.transpose()) * T::lit(0.5))
}

/// Ten sparsity values: zero, then doubling steps ending at the largest
/// absolute off-diagonal entry of `s`.
pub fn lambda_s_grid<T: Real>(s: &DMatrix<T>) -> Vec<T> {
    let p = s.nrows();
    let mut max = T::zero();
    for i in 0..p {
        for j in 0..p {
            if i != j {
                max = max.max(s[(i, j)].abs());
            }
        }
    }
    (0..10).map(|i| max * T::count((1usize << i) - 1) / T::lit(511.0)).collect()
}

/// Fold index of every observation; fold sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || n < folds {
        return Err(CggmError::InvalidInput(format!("cannot split {n} observations into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        out[row] = pos % folds;
    }
    Ok(out)
}

/// Negative Gaussian log-likelihood (up to constants) of data with sample
/// covariance `s_test`. Covariance-target models are inverted first.
pub fn holdout_loss<T: Real>(model: &PrecisionModel<T>, s_test: &DMatrix<T>) -> Result<T> {
    let precision = match model.target {
        Target::Precision => model.clone(),
        Target::Covariance => model.block_inverse()?,
    };
    Ok(precision.trace_term(s_test)? - precision.log_det()?)
}

/// Mean held-out loss over matched fold models and fold covariances.
pub fn cv_score<T: Real>(models: &[PrecisionModel<T>], covariances: &[DMatrix<T>]) -> Result<T> {
    if models.len() != covariances.len() || models.is_empty() {
        return Err(CggmError::Dimension(format!("{} fold models for {} fold covariances", models.len(), covariances.len())));
    }
    let mut total = T::zero();
    for (m, s) in models.iter().zip(covariances) {
        total += holdout_loss(m, s)?;
    }
    Ok(total / T::count(models.len()))
}

/// Fitting input for a sample covariance: `S` itself, or its inverse when
/// the structured object is the covariance.
pub fn fitting_input<T: Real>(s: &DMatrix<T>, target: Target) -> Result<DMatrix<T>> {
    match target {
        Target::Precision => Ok(s.clone()),
        Target::Covariance => Ok(reference_matrix(s)?.0),
    }
}

fn rows_of<T: Real>(x: &DMatrix<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

fn check_variances<T: Real>(s: &DMatrix<T>, what: &str) -> Result<()> {
    match (0..s.nrows()).find(|&j| !(s[(j, j)] > T::zero())) {
        Some(j) => Err(CggmError::Degenerate(format!("{what}: column {j} is constant"))),
        None => Ok(()),
    }
}

struct Fold<T> {
    input: DMatrix<T>,
    test: DMatrix<T>,
}

#[derive(Clone, Copy)]
struct Combo<T> {
    knn: usize,
    phi: T,
    lambda_s: T,
}

/// (lambda_c, raw loss, refit loss) for every point of one fold's path.
fn score_path<T: Real>(
    fold: &Fold<T>,
    combo: Combo<T>,
    target: Target,
    settings: &CvSettings<T>,
) -> Result<Vec<(T, T, T)>> {
    let (path, _) = run_path(&fold.input, combo, target, settings)?;
    let mut memo: HashMap<(Vec<usize>, Vec<bool>), T> = HashMap::new();
    let mut out = Vec::with_capacity(path.points.len());
    for pt in &path.points {
        let model = pt.model();
        let raw = holdout_loss(model, &fold.test)?;
        let key = (model.assignment.labels().to_vec(), model.zero_pattern(settings.penalty_eps).iter().copied().collect());
        let refit_loss = match memo.get(&key) {
            Some(&v) => v,
            None => {
                let v = holdout_loss(&refit(model, &fold.input, &settings.refit, settings.penalty_eps)?.model, &fold.test)?;
                memo.insert(key, v);
                v
            }
        };
        out.push((pt.lambda_c, raw, refit_loss));
    }
    Ok(out)
}

fn run_path<T: Real>(
    input: &DMatrix<T>,
    combo: Combo<T>,
    target: Target,
    settings: &CvSettings<T>,
) -> Result<(ClusterpathSolution<T>, PenaltyConfig<T>)> {
    let w = build_weights(input, combo.knn, combo.phi)?;
    let mut cfg = PenaltyConfig::new(w).with_lambdas(T::zero(), combo.lambda_s);
    cfg.knn = combo.knn;
    cfg.phi = combo.phi;
    cfg.eps_abs = settings.penalty_eps;
    let path_settings = PathSettings { target, ..settings.path.clone() };
    Ok((compute_path(input, &cfg, &path_settings, None)?, cfg))
}

/// Mean fold scores at every lambda_c fitted by any fold, each fold using
/// its path point with the largest lambda_c not above that value.
fn align<T: Real>(per_fold: &[Vec<(T, T, T)>]) -> Vec<(T, T, T)> {
    let mut lambdas: Vec<T> = per_fold.iter().flatten().map(|e| e.0).collect();
    lambdas.sort_by(|a, b| a.partial_cmp(b).expect("finite lambda"));
    lambdas.dedup();
    let g = T::count(per_fold.len());
    lambdas
        .into_iter()
        .map(|lam| {
            let (mut raw, mut re) = (T::zero(), T::zero());
            for scores in per_fold {
                let at = scores.iter().take_while(|e| e.0 <= lam).last().unwrap_or(&scores[0]);
                raw += at.1;
                re += at.2;
            }
            (lam, raw / g, re / g)
        })
        .collect()
}

fn better<T: Real>(cand: &Choice<T>, best: &Choice<T>) -> bool {
    let tol = T::lit(1e-12) * cand.score.abs().max(best.score.abs()).max(T::one());
    if (cand.score - best.score).abs() > tol {
        return cand.score < best.score;
    }
    (cand.lambda_c, cand.lambda_s) > (best.lambda_c, best.lambda_s)
}

fn pick<T: Real>(table: &[CvRow<T>], score: impl Fn(&CvRow<T>) -> T) -> Result<Choice<T>> {
    let mut best: Option<Choice<T>> = None;
    for row in table {
        let cand = Choice { knn: row.knn, phi: row.phi, lambda_s: row.lambda_s, lambda_c: row.lambda_c, score: score(row) };
        if !cand.score.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| better(&cand, b)) {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| CggmError::Degenerate("no finite cross-validation score".into()))
}

/// Cross-validates over the plan's grid and returns the refitted full-data
/// model at the selected tuning parameters.
pub fn select<T: Real>(x: &DMatrix<T>, plan: &CvPlan, settings: &CvSettings<T>) -> Result<CvResult<T>> {
    let n = x.nrows();
    plan.validate(n)?;
    let s_full = sample_covariance(x)?;
    check_variances(&s_full, "data")?;
    let input_full = fitting_input(&s_full, plan.target)?;
    let grid: Vec<T> = match &plan.lambda_s {
        Some(ls) => ls.iter().map(|&l| T::lit(l)).collect(),
        None => lambda_s_grid(&input_full),
    };
    let folds = fold_assignment(n, plan.folds, plan.seed)?;
    let fold_data: Vec<Fold<T>> = (0..plan.folds)
        .map(|g| {
            let test_rows: Vec<usize> = (0..n).filter(|&i| folds[i] == g).collect();
            let train_rows: Vec<usize> = (0..n).filter(|&i| folds[i] != g).collect();
            let s_train = sample_covariance(&rows_of(x, &train_rows))?;
            check_variances(&s_train, &format!("fold {g} training data"))?;
            let test = if test_rows.len() > 1 {
                sample_covariance(&rows_of(x, &test_rows))?
            } else {
                DMatrix::zeros(x.ncols(), x.ncols())
            };
            Ok(Fold { input: fitting_input(&s_train, plan.target)?, test })
        })
        .collect::<Result<_>>()?;

    let mut combos = Vec::new();
    for &knn in &plan.knn {
        for &phi in &plan.phi {
            for &lambda_s in &grid {
                combos.push(Combo { knn, phi: T::lit(phi), lambda_s });
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..combos.len()).flat_map(|c| (0..plan.folds).map(move |g| (c, g))).collect();
    let scored: Vec<Vec<(T, T, T)>> = jobs
        .par_iter()
        .map(|&(c, g)| {
            score_path(&fold_data[g], combos[c], plan.target, settings)
                .map_err(|e| CggmError::Degenerate(format!("fold {g}: {e}")))
        })
        .collect::<Result<_>>()?;

    let mut table = Vec::new();
    for (c, combo) in combos.iter().enumerate() {
        let per_fold = &scored[c * plan.folds..(c + 1) * plan.folds];
        for (lambda_c, raw_score, refit_score) in align(per_fold) {
            table.push(CvRow { knn: combo.knn, phi: combo.phi, lambda_s: combo.lambda_s, lambda_c, raw_score, refit_score });
        }
    }
    let best = pick(&table, |r| r.refit_score)?;
    let best_raw = pick(&table, |r| r.raw_score)?;

    let mut paths: Vec<(Choice<T>, ClusterpathSolution<T>, PenaltyConfig<T>)> = Vec::new();
    let mut final_fit = |choice: &Choice<T>| -> Result<PrecisionModel<T>> {
        let same = |c: &Choice<T>| c.knn == choice.knn && c.phi == choice.phi && c.lambda_s == choice.lambda_s;
        if !paths.iter().any(|(c, _, _)| same(c)) {
            let combo = Combo { knn: choice.knn, phi: choice.phi, lambda_s: choice.lambda_s };
            let (path, cfg) = run_path(&input_full, combo, plan.target, settings)?;
            paths.push((*choice, path, cfg));
        }
        let (_, path, cfg) = paths.iter().find(|(c, _, _)| same(c)).expect("path was just computed");
        let below = path.at_or_below(choice.lambda_c).expect("paths start at zero");
        if below.lambda_c == choice.lambda_c {
            return Ok(below.model().clone());
        }
        Ok(fit_at(&input_full, cfg, &settings.path.solver, path.eps_fusion, choice.lambda_c, below.model())?.model)
    };
    let selected = final_fit(&best)?;
    let raw = final_fit(&best_raw)?;
    let refitted = refit(&selected, &input_full, &settings.refit, settings.penalty_eps)?.model;
    Ok(CvResult { best, best_raw, refit: refitted, raw, table, folds, lambda_s_grid: grid })
}
