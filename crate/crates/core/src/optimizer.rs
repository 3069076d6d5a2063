//! Cyclic block coordinate descent over clusters with fusion checks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::blockmodel::{PrecisionModel, Target};
use crate::error::{CggmError, Result};
use crate::objective::{Aggregates, ClusterLocalView, Penalties, SweepCache};
use crate::penalty::{cluster_distance_squared, median_distance_threshold, reference_matrix, PenaltyConfig};
use crate::scalar::Real;

/// How the fusion threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionThreshold<T> {
    Fixed(T),
    /// `tau` times the median column distance of `S^{-1}` (or `(S + I)^{-1}`).
    DataDriven { tau: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings<T> {
    pub fusion: FusionThreshold<T>,
    pub eps_conv: T,
    pub max_iter: usize,
    pub golden_tol: T,
    /// Verify positive definiteness after every update.
    pub check_pd: bool,
}

impl<T: Real> Default for SolverSettings<T> {
    fn default() -> Self {
        Self {
            fusion: FusionThreshold::DataDriven { tau: T::lit(1e-3) },
            eps_conv: T::lit(1e-7),
            max_iter: 5000,
            golden_tol: T::lit(5e-3),
            check_pd: false,
        }
    }
}

impl<T: Real> SolverSettings<T> {
    /// The fusion threshold as a number for input covariance `s`.
    pub fn resolve_fusion(&self, s: &DMatrix<T>) -> Result<T> {
        match self.fusion {
            FusionThreshold::Fixed(v) => Ok(v),
            FusionThreshold::DataDriven { tau } => Ok(median_distance_threshold(&reference_matrix(s)?.0, tau)),
        }
    }

    pub fn with_fixed_fusion(&self, eps_f: T) -> Self {
        Self { fusion: FusionThreshold::Fixed(eps_f), ..self.clone() }
    }
}

/// Clusters `a` and `b` (labels before the fusion) merged in sweep `iteration`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MergeEvent {
    pub iteration: usize,
    pub cluster_a: usize,
    pub cluster_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T: Real> {
    pub model: PrecisionModel<T>,
    /// Objective before the first sweep and after every sweep.
    pub objective_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    pub merge_log: Vec<MergeEvent>,
}

impl<T: Real> FitResult<T> {
    pub fn objective(&self) -> T {
        *self.objective_trace.last().expect("trace holds the initial objective")
    }
}

/// Restrictions used when refitting.
#[derive(Debug, Clone, Default)]
pub(crate) struct Constraints {
    pub no_fusion: bool,
    /// Entries of `R` held at zero.
    pub pinned: Option<DMatrix<bool>>,
}

/// Default starting point: singletons from `S^{-1}` or `(S + I)^{-1}`.
pub fn default_init<T: Real>(s: &DMatrix<T>, target: Target) -> Result<PrecisionModel<T>> {
    PrecisionModel::singletons_from(&reference_matrix(s)?.0, target)
}

/// Minimizes the penalized objective for fixed tuning parameters.
pub fn fit<T: Real>(
    s: &DMatrix<T>,
    cfg: &PenaltyConfig<T>,
    settings: &SolverSettings<T>,
    init: Option<&PrecisionModel<T>>,
) -> Result<FitResult<T>> {
    let start = match init {
        Some(m) => m.clone(),
        None => default_init(s, Target::Precision)?,
    };
    let eps_f = settings.resolve_fusion(s)?;
    fit_constrained(s, cfg, settings, eps_f, start, &Constraints::default())
}

pub(crate) fn fit_constrained<T: Real>(
    s: &DMatrix<T>,
    cfg: &PenaltyConfig<T>,
    settings: &SolverSettings<T>,
    eps_f: T,
    start: PrecisionModel<T>,
    constraints: &Constraints,
) -> Result<FitResult<T>> {
    let p = s.nrows();
    if s.ncols() != p || start.p() != p {
        return Err(CggmError::Dimension(format!("S is {}x{}, model has {} variables", s.nrows(), s.ncols(), start.p())));
    }
    start.check_pd()?;
    let mut model = start;
    let mut agg = Aggregates::new(s, &model.assignment, cfg)?;
    let pen = Penalties::from(cfg);
    let mut value = agg.objective(&model, &pen)?;
    let mut trace = vec![value];
    let mut merge_log = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let fusion = !constraints.no_fusion && constraints.pinned.is_none();

    for t in 1..=settings.max_iter {
        iterations = t;
        let mut fused = false;
        let mut cache = SweepCache::new(&model)?;
        let mut k = 0;
        while k < model.k() {
            if fusion && model.k() > 1 {
                let sizes = model.assignment.sizes();
                let near = cache.nearest(k).filter(|&l| cluster_distance_squared(k, l, &model.params, sizes).sqrt() <= eps_f);
                if let Some(l) = near {
                    if let Some(merged) = fuse(k, l, &model) {
                        let (a, b) = (k.min(l), k.max(l));
                        merge_log.push(MergeEvent { iteration: t, cluster_a: a, cluster_b: b });
                        model = merged;
                        agg = agg.merged(a, b);
                        fused = true;
                        cache = SweepCache::new(&model)?;
                        if settings.check_pd {
                            intrusive_check(&model, t)?;
                        }
                        if l > k {
                            k += 1;
                        }
                        continue;
                    }
                }
            }
            newton_update(k, &mut model, &agg, pen, settings, constraints.pinned.as_ref(), &mut cache)?;
            if settings.check_pd {
                intrusive_check(&model, t)?;
            }
            k += 1;
        }
        let next = agg
            .objective(&model, &pen)
            .map_err(|e| match e {
                CggmError::NonFinite { .. } => CggmError::NonFinite { iteration: t, clusters: model.k() },
                other => other,
            })?;
        let improvement = value - next;
        value = next;
        trace.push(value);
        if !fused && improvement <= settings.eps_conv * value.abs() {
            converged = true;
            break;
        }
    }
    Ok(FitResult { model, objective_trace: trace, iterations, converged, merge_log })
}

fn intrusive_check<T: Real>(model: &PrecisionModel<T>, iteration: usize) -> Result<()> {
    model
        .check_pd()
        .map_err(|e| CggmError::NotPositiveDefinite(format!("lost positive definiteness in sweep {iteration}: {e}")))
}

/// Nearest other cluster if it lies within `eps_f`; ties go to the smaller label.
pub fn fusion_candidate<T: Real>(k: usize, model: &PrecisionModel<T>, eps_f: T) -> Option<usize> {
    let sizes = model.assignment.sizes();
    let mut best: Option<(usize, T)> = None;
    for l in 0..sizes.len() {
        if l == k {
            continue;
        }
        let d = cluster_distance_squared(k, l, &model.params, sizes);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((l, d));
        }
    }
    best.filter(|&(_, d)| d.sqrt() <= eps_f).map(|(l, _)| l)
}

/// Merges clusters `k` and `l` by size-weighted averaging. Returns `None`
/// when the merged model is not positive definite.
pub fn fuse<T: Real>(k: usize, l: usize, model: &PrecisionModel<T>) -> Option<PrecisionModel<T>> {
    assert_ne!(k, l, "cannot fuse a cluster with itself");
    let merged = model.merged(k.min(l), k.max(l));
    merged.check_pd().ok().map(|_| merged)
}

fn newton_update<T: Real>(
    k: usize,
    model: &mut PrecisionModel<T>,
    agg: &Aggregates<T>,
    pen: Penalties<T>,
    settings: &SolverSettings<T>,
    pinned: Option<&DMatrix<bool>>,
    cache: &mut SweepCache<T>,
) -> Result<()> {
    let update = {
        let view = ClusterLocalView::with_cache(k, model, agg, pen, cache);
        let x = view.state();
        let (g, h) = view.derivatives(&x)?;
        let free = free_coordinates(k, model, pinned);
        let dir = newton_direction(&g, &h, &free);
        if dir.iter().all(|v| *v == T::zero()) {
            return Ok(());
        }
        let s_max = view.max_step(&x, &dir);
        let curv = dir.dot(&(&h * &dir));
        let slope = g.dot(&dir);
        let s_newton = if curv > T::zero() { -slope / curv } else { s_max };
        let s_hi = s_max.min(s_newton + s_newton);
        let line = view.along(&x, &dir);
        let f = |s: T| line.value(s);
        let extra = if s_newton < s_max { vec![s_newton] } else { Vec::new() };
        let step = search(&f, s_hi, settings.golden_tol, &extra);
        if step > T::zero() {
            Some((x + dir * step, view.local_inverse().clone()))
        } else {
            None
        }
    };
    if let Some((next, v)) = update {
        let kk = model.k();
        let old: Vec<T> = (0..kk).map(|m| model.params.r_at(m, k)).collect();
        model.params.set_b(k, next[0]);
        for (pos, m) in (0..kk).filter(|&m| m != k).enumerate() {
            model.params.set_r(k, m, next[pos + 1]);
        }
        model.params.set_r(k, k, next[kk]);
        cache.refresh(k, &v, &old, model);
    }
    Ok(())
}

/// Coordinates of `(b_k, r_k, r_kk)` the update may move.
fn free_coordinates<T: Real>(k: usize, model: &PrecisionModel<T>, pinned: Option<&DMatrix<bool>>) -> Vec<bool> {
    let kk = model.k();
    let mut free = vec![true; kk + 1];
    let mut pos = 1;
    for m in 0..kk {
        if m == k {
            continue;
        }
        if pinned.is_some_and(|z| z[(k, m)]) {
            free[pos] = false;
        }
        pos += 1;
    }
    if model.assignment.size(k) == 1 || pinned.is_some_and(|z| z[(k, k)]) {
        free[kk] = false;
    }
    free
}

/// Newton direction on the free coordinates, ridged until it descends and
/// replaced by the negative gradient as a last resort.
pub fn newton_direction<T: Real>(g: &DVector<T>, h: &DMatrix<T>, free: &[bool]) -> DVector<T> {
    let idx: Vec<usize> = (0..g.len()).filter(|&i| free[i]).collect();
    let n = idx.len();
    let mut out = DVector::zeros(g.len());
    if n == 0 {
        return out;
    }
    let gf = DVector::from_fn(n, |i, _| g[idx[i]]);
    if gf.iter().all(|v| *v == T::zero()) {
        return out;
    }
    let hf = DMatrix::from_fn(n, n, |i, j| h[(idx[i], idx[j])]);
    let descends = |d: &DVector<T>| d.iter().all(|v| v.is_finite()) && gf.dot(d) < T::zero();

    let mut dir = hf.clone().cholesky().map(|c| -c.solve(&gf));
    if !dir.as_ref().is_some_and(descends) {
        dir = hf.clone().lu().solve(&gf).map(|d| -d);
    }
    if !dir.as_ref().is_some_and(descends) {
        dir = None;
        let mut ridge = T::lit(1e-6);
        while ridge <= T::lit(1e8) {
            let shifted = &hf + DMatrix::identity(n, n) * ridge;
            if let Some(d) = shifted.cholesky().map(|c| -c.solve(&gf)) {
                if descends(&d) {
                    dir = Some(d);
                    break;
                }
            }
            ridge *= T::lit(10.0);
        }
    }
    let dir = dir.unwrap_or_else(|| -gf.clone());
    for (i, &j) in idx.iter().enumerate() {
        out[j] = dir[i];
    }
    out
}

/// Largest feasible step along `direction` for the cluster view.
pub fn max_step<T: Real>(view: &ClusterLocalView<'_, T>, state: &DVector<T>, direction: &DVector<T>) -> T {
    view.max_step(state, direction)
}

/// Golden-section search for the step minimizing the view's objective on
/// `[0, s_max]`. Returns 0 when no evaluated step improves on the start.
pub fn line_search<T: Real>(
    view: &ClusterLocalView<'_, T>,
    state: &DVector<T>,
    direction: &DVector<T>,
    s_max: T,
    golden_tol: T,
) -> T {
    let line = view.along(state, direction);
    search(&|s: T| line.value(s), s_max, golden_tol, &[])
}

/// Golden-section search of `f` over `[0, s_max]`, also trying `extra`
/// steps. Infeasible points (`None`) count as `+inf`.
pub fn search<T: Real>(f: &dyn Fn(T) -> Option<T>, s_max: T, tol: T, extra: &[T]) -> T {
    let Some(f0) = f(T::zero()) else { return T::zero() };
    if !(s_max > T::zero()) {
        return T::zero();
    }
    let eval = |s: T| f(s).unwrap_or_else(|| T::lit(f64::INFINITY));
    let mut best = (T::zero(), f0);
    let mut consider = |s: T, v: T| {
        if v < best.1 {
            best = (s, v);
        }
    };
    for &s in extra {
        if s > T::zero() && s < s_max {
            consider(s, eval(s));
        }
    }
    let ratio = T::lit(0.618_033_988_749_894_9);
    let (mut lo, mut hi) = (T::zero(), s_max);
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let (mut fc, mut fd) = (eval(c), eval(d));
    consider(c, fc);
    consider(d, fd);
    let width = tol * s_max;
    while hi - lo > width {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = eval(c);
            consider(c, fc);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = eval(d);
            consider(d, fd);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmodel::{BlockParameters, ClusterAssignment};
    use crate::penalty::SparseSymmetric;

    fn sample_cov() -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 4, &[
            1.2, 0.3, 0.1, 0.0, //
            0.3, 1.0, 0.2, 0.1, //
            0.1, 0.2, 1.5, 0.4, //
            0.0, 0.1, 0.4, 0.9,
        ])
    }

    #[test]
    fn unpenalized_fit_reaches_inverse_from_diagonal() {
        let s = sample_cov();
        let cfg = PenaltyConfig::new(SparseSymmetric::new(4));
        let settings = SolverSettings { eps_conv: 1e-15, ..SolverSettings::default() };
        let init = PrecisionModel::singletons_from(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0])), Target::Precision).unwrap();
        let res = fit(&s, &cfg, &settings.with_fixed_fusion(0.0), Some(&init)).unwrap();
        let inv = s.try_inverse().unwrap();
        assert!((res.model.materialize() - &inv).norm() < 1e-6, "{} after {} sweeps, trace {:?}", (res.model.materialize() - &inv).norm(), res.iterations, &res.objective_trace[res.objective_trace.len().saturating_sub(4)..]);
        assert!(res.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn fusion_candidate_argmin_and_ties() {
        let b = DVector::from_vec(vec![1.0, 1.0 + 2e-4, 1.0 + 5e-4, 1.0 - 2e-4]);
        let params = BlockParameters::new(b, DMatrix::zeros(4, 4)).unwrap();
        let model = PrecisionModel::new(ClusterAssignment::singletons(4), params, Target::Precision).unwrap();
        // distances from 0: 2e-4 to both 1 and 3, tie goes to 1
        assert_eq!(fusion_candidate(0, &model, 1e-3), Some(1));
        assert_eq!(fusion_candidate(2, &model, 1e-3), Some(1));
        assert_eq!(fusion_candidate(0, &model, 1e-4), None);
    }

    #[test]
    fn fusing_identical_singletons_keeps_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 2.0, 0.1, 0.1, 0.1, 1.0]);
        let model = PrecisionModel::singletons_from(&m, Target::Precision).unwrap();
        assert_eq!(fusion_candidate(0, &model, 1e-9), Some(1));
        let fused = fuse(0, 1, &model).unwrap();
        assert_eq!(fused.k(), 2);
        assert_eq!(fused.materialize(), m);
    }

    #[test]
    fn search_finds_quadratic_minimum() {
        let f = |s: f64| Some((s - 0.3) * (s - 0.3));
        let s = search(&f, 1.0, 5e-3, &[]);
        assert!((s - 0.3).abs() <= 5e-3);
    }

    #[test]
    fn search_returns_zero_for_ascent() {
        let f = |s: f64| Some(s);
        assert_eq!(search(&f, 1.0, 5e-3, &[]), 0.0);
    }

    #[test]
    fn search_boundary_minimum_stays_feasible() {
        let f = |s: f64| if s < 2.0 { Some(-s) } else { None };
        let s = search(&f, 2.0, 5e-3, &[]);
        assert!(s < 2.0 && s > 2.0 - 2.0 * 5e-3);
    }

    #[test]
    fn ridge_fixes_indefinite_hessian() {
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let d = newton_direction(&g, &h, &[true, true]);
        assert!(g.dot(&d) < 0.0);
        let masked = newton_direction(&g, &h, &[true, false]);
        assert_eq!(masked[1], 0.0);
    }

    #[test]
    fn penalized_fit_is_monotone_and_deterministic() {
        let s = sample_cov();
        let w = SparseSymmetric::ones(4);
        let cfg = PenaltyConfig::new(w).with_lambdas(0.3, 0.05);
        let settings = SolverSettings { check_pd: true, ..SolverSettings::default() };
        let a = fit(&s, &cfg, &settings, None).unwrap();
        let b = fit(&s, &cfg, &settings, None).unwrap();
        assert_eq!(a, b);
        for w in a.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn strong_aggregation_fuses_everything() {
        let s = sample_cov();
        let cfg = PenaltyConfig::new(SparseSymmetric::ones(4)).with_lambdas(50.0, 0.0);
        let res = fit(&s, &cfg, &SolverSettings::default(), None).unwrap();
        assert_eq!(res.model.k(), 1);
        assert_eq!(res.merge_log.len(), 3);
        res.model.check_pd().unwrap();
    }
}
