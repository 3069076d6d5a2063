//! Penalized negative log-likelihood in block coordinates.
//!
//! The per-cluster view fixes every cluster except `k` and exposes the
//! objective as a function of the state `x = (b_k, r_k, r_kk)`, where `r_k`
//! lists `r[k][m]` for the other clusters in label order. Values of the view
//! differ from the full objective by a constant.

use nalgebra::{DMatrix, DVector};

use crate::blockmodel::{BlockParameters, ClusterAssignment, CovarianceAggregates, PrecisionModel};
use crate::error::{CggmError, Result};
use crate::penalty::{cluster_distance_squared, smoothed_abs, PairAggregates, PenaltyConfig};
use crate::scalar::Real;

const KINK: f64 = 1e-12;

/// Penalty coefficients as they enter the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalties<T> {
    pub lambda_c: T,
    pub lambda_s: T,
    pub eps: T,
}

impl<T: Real> Penalties<T> {
    pub fn none() -> Self {
        Self { lambda_c: T::zero(), lambda_s: T::zero(), eps: T::lit(PenaltyConfig::<T>::DEFAULT_EPS_ABS) }
    }
}

impl<T: Real> From<&PenaltyConfig<T>> for Penalties<T> {
    fn from(cfg: &PenaltyConfig<T>) -> Self {
        Self { lambda_c: cfg.lambda_c, lambda_s: cfg.lambda_s, eps: cfg.eps_abs }
    }
}

/// Cluster-level sums of `S`, `W` and `Z` for the current assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates<T: Real> {
    pub cov: CovarianceAggregates<T>,
    pub weights: PairAggregates<T>,
    pub sparsity: PairAggregates<T>,
}

impl<T: Real> Aggregates<T> {
    pub fn new(s: &DMatrix<T>, assignment: &ClusterAssignment, cfg: &PenaltyConfig<T>) -> Result<Self> {
        cfg.validate(assignment.p())?;
        Ok(Self {
            cov: CovarianceAggregates::new(s, assignment)?,
            weights: PairAggregates(cfg.weights.aggregate(assignment)),
            sparsity: PairAggregates(cfg.sparsity.aggregate(assignment)),
        })
    }

    pub(crate) fn merged(&self, a: usize, b: usize) -> Self {
        Self { cov: self.cov.merged(a, b), weights: self.weights.merged(a, b), sparsity: self.sparsity.merged(a, b) }
    }

    /// Full objective of `model`, whose assignment must match these aggregates.
    pub fn objective(&self, model: &PrecisionModel<T>, pen: &Penalties<T>) -> Result<T> {
        let params = &model.params;
        let sizes = model.assignment.sizes();
        let k = sizes.len();
        let mut value = -model.log_det()? + self.cov.trace_term(params);
        if pen.lambda_c > T::zero() {
            let mut clust = T::zero();
            for i in 0..k {
                for j in i + 1..k {
                    let w = self.weights.get(i, j);
                    if w > T::zero() {
                        clust += w * cluster_distance_squared(i, j, params, sizes).sqrt();
                    }
                }
            }
            value += pen.lambda_c * clust;
        }
        if pen.lambda_s > T::zero() {
            let mut sparse = T::zero();
            for i in 0..k {
                for j in 0..k {
                    let z = self.sparsity.get(i, j);
                    if z > T::zero() {
                        sparse += z * smoothed_abs(params.r_at(i, j), pen.eps).value;
                    }
                }
            }
            value += pen.lambda_s * sparse;
        }
        if !value.is_finite() {
            return Err(CggmError::NonFinite { iteration: 0, clusters: k });
        }
        Ok(value)
    }
}

/// `-log|Theta| + tr(S Theta)` plus both penalties, with the sparsity
/// penalty summed over ordered pairs.
pub fn full_objective<T: Real>(model: &PrecisionModel<T>, s: &DMatrix<T>, cfg: &PenaltyConfig<T>) -> Result<T> {
    Aggregates::new(s, &model.assignment, cfg)?.objective(model, &cfg.into())
}

/// Objective restricted to the parameters of one cluster.
#[derive(Debug, Clone)]
pub struct ClusterLocalView<'a, T: Real> {
    k: usize,
    sizes: &'a [usize],
    params: &'a BlockParameters<T>,
    agg: &'a Aggregates<T>,
    pen: Penalties<T>,
    others: Vec<usize>,
    /// Inverse of `R*` with row and column `k` removed.
    v: DMatrix<T>,
    /// Pairs of other clusters with nonzero weight: positions in `others`,
    /// aggregate weight and the part of their squared distance that does not
    /// involve cluster `k`.
    rest: Vec<(usize, usize, T, T)>,
}

impl<'a, T: Real> ClusterLocalView<'a, T> {
    pub fn new(
        k: usize,
        model: &'a PrecisionModel<T>,
        agg: &'a Aggregates<T>,
        pen: Penalties<T>,
    ) -> Result<Self> {
        let sizes = model.assignment.sizes();
        let params = &model.params;
        let kk = sizes.len();
        let others: Vec<usize> = (0..kk).filter(|&m| m != k).collect();
        let n = others.len();
        let r_star_rest = DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (others[i], others[j]);
            let mut v = params.r_at(a, b);
            if a == b {
                v += params.a_at(a) / T::count(sizes[a]);
            }
            v
        });
        let v = if n == 0 {
            r_star_rest
        } else {
            let inv = r_star_rest
                .cholesky()
                .ok_or_else(|| CggmError::NotPositiveDefinite(format!("R* without cluster {k} is not positive definite")))?
                .inverse();
            crate::penalty::symmetrize(inv)
        };
        let mut rest = Vec::new();
        if pen.lambda_c > T::zero() {
            for i in 0..n {
                for j in i + 1..n {
                    let (m, l) = (others[i], others[j]);
                    let w = agg.weights.get(m, l);
                    if w > T::zero() {
                        rest.push((i, j, w, distance_without(m, l, k, params, sizes)));
                    }
                }
            }
        }
        Ok(Self { k, sizes, params, agg, pen, others, v, rest })
    }

    pub fn cluster(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.others.len() + 2
    }

    fn last(&self) -> usize {
        self.others.len() + 1
    }

    fn pk(&self) -> usize {
        self.sizes[self.k]
    }

    /// Current `(b_k, r_k, r_kk)`.
    pub fn state(&self) -> DVector<T> {
        let n = self.others.len();
        DVector::from_fn(n + 2, |i, _| {
            if i == 0 {
                self.params.b_at(self.k)
            } else if i <= n {
                self.params.r_at(self.k, self.others[i - 1])
            } else {
                self.params.r_at(self.k, self.k)
            }
        })
    }

    /// Writes a state back into `params`.
    pub fn write(&self, x: &DVector<T>, params: &mut BlockParameters<T>) {
        params.set_b(self.k, x[0]);
        for (i, &m) in self.others.iter().enumerate() {
            params.set_r(self.k, m, x[i + 1]);
        }
        params.set_r(self.k, self.k, x[self.last()]);
    }

    fn r_part<'x>(&self, x: &'x DVector<T>) -> nalgebra::DVectorView<'x, T> {
        x.rows(1, self.others.len())
    }

    /// Schur complement `h` and the centering value `b - r_kk`.
    fn barriers(&self, x: &DVector<T>) -> (T, T) {
        let pk = T::count(self.pk());
        let n = self.others.len();
        let mut quad = T::zero();
        for j in 0..n {
            let rj = x[j + 1];
            let col = self.v.column(j);
            let mut acc = T::zero();
            for i in 0..n {
                acc += col[i] * x[i + 1];
            }
            quad += rj * acc;
        }
        let rkk = x[self.last()];
        (x[0] + (pk - T::one()) * rkk - pk * quad, x[0] - rkk)
    }

    /// True when `x` keeps the model positive definite.
    pub fn feasible(&self, x: &DVector<T>) -> bool {
        let (h, a) = self.barriers(x);
        h > T::zero() && (self.pk() == 1 || a > T::zero())
    }

    /// Squared distance to other cluster `i` (position in `others`).
    fn pair_distance_sq(&self, x: &DVector<T>, i: usize) -> T {
        let l = self.others[i];
        let p = self.params;
        let rkl = x[i + 1];
        let db = x[0] - p.b_at(l);
        let ek = x[self.last()] - rkl;
        let el = p.r_at(l, l) - rkl;
        let mut acc = db * db
            + T::count(self.pk() - 1) * ek * ek
            + T::count(self.sizes[l] - 1) * el * el;
        for (j, &m) in self.others.iter().enumerate() {
            if j != i {
                let e = x[j + 1] - p.r_at(l, m);
                acc += T::count(self.sizes[m]) * e * e;
            }
        }
        acc
    }

    fn rest_distance_sq(&self, x: &DVector<T>, entry: &(usize, usize, T, T)) -> T {
        let (i, j, _, rest) = *entry;
        let e = x[i + 1] - x[j + 1];
        rest + T::count(self.pk()) * e * e
    }

    /// Objective up to a constant, or `None` outside the feasible region.
    pub fn value(&self, x: &DVector<T>) -> Option<T> {
        let (h, a) = self.barriers(x);
        let pk = self.pk();
        if !(h > T::zero()) || (pk > 1 && !(a > T::zero())) {
            return None;
        }
        let cov = &self.agg.cov;
        let k = self.k;
        let two = T::lit(2.0);
        let mut val = -h.ln() + x[0] * cov.trace(k);
        if pk > 1 {
            let rkk = x[self.last()];
            val += -T::count(pk - 1) * a.ln() + rkk * (cov.cross(k, k) - cov.trace(k));
        }
        for (i, &m) in self.others.iter().enumerate() {
            val += two * x[i + 1] * cov.cross(k, m);
        }
        if self.pen.lambda_c > T::zero() {
            let mut clust = T::zero();
            for (i, &l) in self.others.iter().enumerate() {
                let w = self.agg.weights.get(k, l);
                if w > T::zero() {
                    clust += w * self.pair_distance_sq(x, i).sqrt();
                }
            }
            for entry in &self.rest {
                clust += entry.2 * self.rest_distance_sq(x, entry).sqrt();
            }
            val += self.pen.lambda_c * clust;
        }
        if self.pen.lambda_s > T::zero() {
            let mut sparse = T::zero();
            for (i, &m) in self.others.iter().enumerate() {
                let z = self.agg.sparsity.get(k, m);
                if z > T::zero() {
                    sparse += two * z * smoothed_abs(x[i + 1], self.pen.eps).value;
                }
            }
            let zkk = self.agg.sparsity.get(k, k);
            if pk > 1 && zkk > T::zero() {
                sparse += zkk * smoothed_abs(x[self.last()], self.pen.eps).value;
            }
            val += self.pen.lambda_s * sparse;
        }
        val.is_finite().then_some(val)
    }

    /// Gradient and Hessian at a feasible state.
    pub fn derivatives(&self, x: &DVector<T>) -> Result<(DVector<T>, DMatrix<T>)> {
        if !self.feasible(x) {
            return Err(CggmError::Infeasible(format!("cluster {} state is outside the feasible region", self.k)));
        }
        let n = self.others.len();
        let dim = n + 2;
        let last = n + 1;
        let k = self.k;
        let pk = self.pk();
        let pkf = T::count(pk);
        let two = T::lit(2.0);
        let cov = &self.agg.cov;
        let mut g = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);

        // -log h
        let (h, a) = self.barriers(x);
        let vr = if n == 0 { DVector::zeros(0) } else { &self.v * self.r_part(x) };
        let mut gh = DVector::zeros(dim);
        gh[0] = T::one();
        gh[last] = pkf - T::one();
        for i in 0..n {
            gh[i + 1] = -two * pkf * vr[i];
        }
        g.axpy(-T::one() / h, &gh, T::one());
        hess.ger(T::one() / (h * h), &gh, &gh, T::one());
        let scale = two * pkf / h;
        for i in 0..n {
            for j in 0..n {
                hess[(i + 1, j + 1)] += scale * self.v[(i, j)];
            }
        }

        // -(p_k - 1) log(b - r_kk) and the trace
        g[0] += cov.trace(k);
        for (i, &m) in self.others.iter().enumerate() {
            g[i + 1] += two * cov.cross(k, m);
        }
        if pk > 1 {
            let c = T::count(pk - 1);
            g[0] -= c / a;
            g[last] += c / a + cov.cross(k, k) - cov.trace(k);
            let curv = c / (a * a);
            hess[(0, 0)] += curv;
            hess[(last, last)] += curv;
            hess[(0, last)] -= curv;
            hess[(last, 0)] -= curv;
        }

        if self.pen.lambda_c > T::zero() {
            let lc = self.pen.lambda_c;
            let mut gq = DVector::zeros(dim);
            for (i, &l) in self.others.iter().enumerate() {
                let w = self.agg.weights.get(k, l);
                if w > T::zero() {
                    self.add_pair_term(x, i, lc * w, &mut gq, &mut g, &mut hess);
                }
            }
            for entry in &self.rest {
                let q = self.rest_distance_sq(x, entry);
                let d = q.sqrt();
                if d < T::lit(KINK) {
                    continue;
                }
                let (i, j, w, _) = *entry;
                let coef = lc * w;
                let u = x[i + 1] - x[j + 1];
                // q = rest + p_k u^2, dq = 2 p_k u (e_i - e_j)
                let gq = two * pkf * u;
                let gd = gq / (two * d);
                g[i + 1] += coef * gd;
                g[j + 1] -= coef * gd;
                let hq = two * pkf;
                let hd = hq / (two * d) - gq * gq / (T::lit(4.0) * d * d * d);
                hess[(i + 1, i + 1)] += coef * hd;
                hess[(j + 1, j + 1)] += coef * hd;
                hess[(i + 1, j + 1)] -= coef * hd;
                hess[(j + 1, i + 1)] -= coef * hd;
            }
        }

        if self.pen.lambda_s > T::zero() {
            let ls = self.pen.lambda_s;
            for (i, &m) in self.others.iter().enumerate() {
                let z = self.agg.sparsity.get(k, m);
                if z > T::zero() {
                    let sa = smoothed_abs(x[i + 1], self.pen.eps);
                    g[i + 1] += ls * two * z * sa.slope;
                    hess[(i + 1, i + 1)] += ls * two * z * sa.curvature;
                }
            }
            let zkk = self.agg.sparsity.get(k, k);
            if pk > 1 && zkk > T::zero() {
                let sa = smoothed_abs(x[last], self.pen.eps);
                g[last] += ls * zkk * sa.slope;
                hess[(last, last)] += ls * zkk * sa.curvature;
            }
        }

        if pk == 1 {
            g[last] = T::zero();
            hess.row_mut(last).fill(T::zero());
            hess.column_mut(last).fill(T::zero());
        }
        Ok((g, hess))
    }

    pub fn gradient(&self, x: &DVector<T>) -> Result<DVector<T>> {
        Ok(self.derivatives(x)?.0)
    }

    pub fn hessian(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(self.derivatives(x)?.1)
    }

    /// Adds `coef * d(k, l)` derivatives for other cluster at position `i`.
    fn add_pair_term(&self, x: &DVector<T>, i: usize, coef: T, gq: &mut DVector<T>, g: &mut DVector<T>, hess: &mut DMatrix<T>) {
        let q = self.pair_distance_sq(x, i);
        let d = q.sqrt();
        if d < T::lit(KINK) {
            return;
        }
        let n = self.others.len();
        let last = n + 1;
        let l = self.others[i];
        let p = self.params;
        let two = T::lit(2.0);
        let ck = T::count(self.pk() - 1);
        let cl = T::count(self.sizes[l] - 1);
        let rkl = x[i + 1];

        // gradient of q
        gq[0] = two * (x[0] - p.b_at(l));
        let ek = x[last] - rkl;
        let el = p.r_at(l, l) - rkl;
        gq[last] = two * ck * ek;
        gq[i + 1] = -two * ck * ek - two * cl * el;
        for (j, &m) in self.others.iter().enumerate() {
            if j != i {
                gq[j + 1] = two * T::count(self.sizes[m]) * (x[j + 1] - p.r_at(l, m));
            }
        }
        let inv2d = T::one() / (two * d);
        g.axpy(coef * inv2d, gq, T::one());

        // Hessian of q is constant and sparse
        let outer = coef / (T::lit(4.0) * d * d * d);
        hess.ger(-outer, gq, gq, T::one());
        let s = coef * inv2d * two;
        hess[(0, 0)] += s;
        hess[(last, last)] += s * ck;
        hess[(i + 1, i + 1)] += s * (ck + cl);
        hess[(last, i + 1)] -= s * ck;
        hess[(i + 1, last)] -= s * ck;
        for (j, &m) in self.others.iter().enumerate() {
            if j != i {
                hess[(j + 1, j + 1)] += s * T::count(self.sizes[m]);
            }
        }
    }

    /// Largest `s` such that `x + t dir` stays feasible for all `t < s`,
    /// capped at `1e6`.
    pub fn max_step(&self, x: &DVector<T>, dir: &DVector<T>) -> T {
        let cap = T::lit(1e6);
        let n = self.others.len();
        let last = n + 1;
        let pk = self.pk();
        let pkf = T::count(pk);
        let (h0, a0) = self.barriers(x);
        let mut s = cap;

        // h(s) = h0 + h1 s - h2 s^2
        let (h1, h2) = if n == 0 {
            (dir[0] + (pkf - T::one()) * dir[last], T::zero())
        } else {
            let r = self.r_part(x);
            let dr = dir.rows(1, n);
            let vdr = &self.v * dr;
            let cross = r.dot(&vdr);
            (dir[0] + (pkf - T::one()) * dir[last] - T::lit(2.0) * pkf * cross, pkf * dr.dot(&vdr))
        };
        let root = positive_root(h0, h1, h2);
        if let Some(r) = root {
            s = s.min(r);
        }
        if pk > 1 {
            let slope = dir[0] - dir[last];
            if slope < T::zero() {
                s = s.min(a0 / -slope);
            }
        }
        s
    }
}

/// Inverse of `R*` and all squared cluster distances, kept current across
/// the cluster updates of one sweep.
#[derive(Debug, Clone)]
pub(crate) struct SweepCache<T: Real> {
    rinv: DMatrix<T>,
    dist: DMatrix<T>,
}

impl<T: Real> SweepCache<T> {
    pub(crate) fn new(model: &PrecisionModel<T>) -> Result<Self> {
        let rinv = model
            .r_star()
            .cholesky()
            .ok_or_else(|| CggmError::NotPositiveDefinite("R* is not positive definite".into()))?
            .inverse();
        let kk = model.k();
        let sizes = model.assignment.sizes();
        let mut dist = DMatrix::zeros(kk, kk);
        for k in 0..kk {
            for l in k + 1..kk {
                let d = cluster_distance_squared(k, l, &model.params, sizes);
                dist[(k, l)] = d;
                dist[(l, k)] = d;
            }
        }
        Ok(Self { rinv: crate::penalty::symmetrize(rinv), dist })
    }

    /// Closest other cluster to `k`, the first one on ties.
    pub(crate) fn nearest(&self, k: usize) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for (l, &d) in self.dist.column(k).iter().enumerate() {
            if l != k && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((l, d));
            }
        }
        best.map(|(l, _)| l)
    }

    /// Inverse of `R*` with row and column `k` removed.
    fn local_inverse(&self, k: usize) -> DMatrix<T> {
        let kk = self.rinv.nrows();
        let pivot = self.rinv[(k, k)];
        let idx = |i: usize| if i < k { i } else { i + 1 };
        DMatrix::from_fn(kk - 1, kk - 1, |i, j| {
            let (a, b) = (idx(i), idx(j));
            self.rinv[(a, b)] - self.rinv[(a, k)] * self.rinv[(k, b)] / pivot
        })
    }

    /// Brings the cache up to date after cluster `k` moved to the current
    /// parameters of `model`; `old[m]` is the previous `r[m][k]`. `v` is the local inverse used for
    /// the update.
    pub(crate) fn refresh(&mut self, k: usize, v: &DMatrix<T>, old: &[T], model: &PrecisionModel<T>) {
        let params = &model.params;
        let sizes = model.assignment.sizes();
        let kk = sizes.len();
        let idx = |i: usize| if i < k { i } else { i + 1 };
        let n = kk - 1;
        let c: Vec<T> = (0..n).map(|i| params.r_at(k, idx(i))).collect();
        let diag = params.r_at(k, k) + params.a_at(k) / T::count(sizes[k]);
        let vc: Vec<T> = (0..n)
            .map(|i| {
                let mut acc = T::zero();
                for j in 0..n {
                    acc += v[(i, j)] * c[j];
                }
                acc
            })
            .collect();
        let schur = diag - c.iter().zip(&vc).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let inv = T::one() / schur;
        for j in 0..n {
            let b = idx(j);
            let s = vc[j] * inv;
            for i in 0..n {
                self.rinv[(idx(i), b)] = v[(i, j)] + vc[i] * s;
            }
            self.rinv[(k, b)] = -s;
            self.rinv[(b, k)] = -s;
        }
        self.rinv[(k, k)] = inv;

        let pk = T::count(sizes[k]);
        let delta: Vec<T> = (0..n)
            .map(|i| {
                let m = idx(i);
                params.r_at(m, k) - old[m]
            })
            .collect();
        let before: Vec<T> = (0..n).map(|i| old[idx(i)]).collect();
        for i in 0..n {
            let m = idx(i);
            for j in i + 1..n {
                let l = idx(j);
                let b = before[i] - before[j];
                let a = b + delta[i] - delta[j];
                let d = (self.dist[(m, l)] + pk * (a * a - b * b)).max(T::zero());
                self.dist[(m, l)] = d;
                self.dist[(l, m)] = d;
            }
            let d = cluster_distance_squared(k, m, params, sizes);
            self.dist[(k, m)] = d;
            self.dist[(m, k)] = d;
        }
    }
}

impl<'a, T: Real> ClusterLocalView<'a, T> {
    /// Same view as [`ClusterLocalView::new`], built from a sweep cache.
    pub(crate) fn with_cache(
        k: usize,
        model: &'a PrecisionModel<T>,
        agg: &'a Aggregates<T>,
        pen: Penalties<T>,
        cache: &SweepCache<T>,
    ) -> Self {
        let sizes = model.assignment.sizes();
        let params = &model.params;
        let kk = sizes.len();
        let others: Vec<usize> = (0..kk).filter(|&m| m != k).collect();
        let v = cache.local_inverse(k);
        let mut rest = Vec::with_capacity(others.len() * others.len().saturating_sub(1) / 2);
        if pen.lambda_c > T::zero() {
            let pk = T::count(sizes[k]);
            for (i, &m) in others.iter().enumerate() {
                for (j, &l) in others.iter().enumerate().skip(i + 1) {
                    let w = agg.weights.get(m, l);
                    if w > T::zero() {
                        let e = params.r_at(m, k) - params.r_at(l, k);
                        rest.push((i, j, w, (cache.dist[(m, l)] - pk * e * e).max(T::zero())));
                    }
                }
            }
        }
        Self { k, sizes, params, agg, pen, others, v, rest }
    }

    /// Inverse of `R*` without cluster `k`.
    pub(crate) fn local_inverse(&self) -> &DMatrix<T> {
        &self.v
    }
}

/// The local objective along `x + s * dir`, with every term reduced to its
/// polynomial coefficients in `s`.
#[derive(Debug, Clone)]
pub struct LineObjective<T> {
    h: (T, T, T),
    a: (T, T),
    log_a_coef: T,
    linear: (T, T),
    lambda_c: T,
    /// `(weight, q0, q1, q2)` with squared distance `q0 + q1 s + q2 s^2`.
    distances: Vec<(T, T, T, T)>,
    lambda_s: T,
    eps: T,
    /// `(weight, x0, dx)` for each smoothed absolute value.
    abs_terms: Vec<(T, T, T)>,
}

impl<T: Real> LineObjective<T> {
    /// Objective at step `s` up to a constant, or `None` when infeasible.
    pub fn value(&self, s: T) -> Option<T> {
        let h = self.h.0 + s * (self.h.1 + s * self.h.2);
        if !(h > T::zero()) {
            return None;
        }
        let mut val = -h.ln() + self.linear.0 + s * self.linear.1;
        if self.log_a_coef > T::zero() {
            let a = self.a.0 + s * self.a.1;
            if !(a > T::zero()) {
                return None;
            }
            val -= self.log_a_coef * a.ln();
        }
        if !self.distances.is_empty() {
            let mut clust = T::zero();
            for &(w, q0, q1, q2) in &self.distances {
                clust += w * (q0 + s * (q1 + s * q2)).max(T::zero()).sqrt();
            }
            val += self.lambda_c * clust;
        }
        if !self.abs_terms.is_empty() {
            let mut sparse = T::zero();
            for &(w, x0, dx) in &self.abs_terms {
                sparse += w * smoothed_abs(x0 + s * dx, self.eps).value;
            }
            val += self.lambda_s * sparse;
        }
        val.is_finite().then_some(val)
    }
}

impl<T: Real> ClusterLocalView<'_, T> {
    /// Restriction of [`ClusterLocalView::value`] to the line through `x`
    /// along `dir`; agrees with it up to a constant and rounding.
    pub fn along(&self, x: &DVector<T>, dir: &DVector<T>) -> LineObjective<T> {
        let n = self.others.len();
        let last = n + 1;
        let k = self.k;
        let pk = self.pk();
        let pkf = T::count(pk);
        let two = T::lit(2.0);
        let cov = &self.agg.cov;

        let (h0, a0) = self.barriers(x);
        let (h1, h2) = if n == 0 {
            (dir[0] + (pkf - T::one()) * dir[last], T::zero())
        } else {
            let r = self.r_part(x);
            let dr = dir.rows(1, n);
            let vdr = &self.v * dr;
            (dir[0] + (pkf - T::one()) * dir[last] - two * pkf * r.dot(&vdr), pkf * dr.dot(&vdr))
        };

        let mut lin0 = x[0] * cov.trace(k);
        let mut lin1 = dir[0] * cov.trace(k);
        if pk > 1 {
            let c = cov.cross(k, k) - cov.trace(k);
            lin0 += x[last] * c;
            lin1 += dir[last] * c;
        }
        for (i, &m) in self.others.iter().enumerate() {
            lin0 += two * x[i + 1] * cov.cross(k, m);
            lin1 += two * dir[i + 1] * cov.cross(k, m);
        }

        let mut distances = Vec::with_capacity(n + self.rest.len());
        if self.pen.lambda_c > T::zero() {
            let p = self.params;
            for (i, &l) in self.others.iter().enumerate() {
                let w = self.agg.weights.get(k, l);
                if !(w > T::zero()) {
                    continue;
                }
                let mut q = (T::zero(), T::zero(), T::zero());
                let mut add = |c: T, u: T, v: T| {
                    q.0 += c * u * u;
                    q.1 += two * c * u * v;
                    q.2 += c * v * v;
                };
                let rkl = x[i + 1];
                let drkl = dir[i + 1];
                add(T::one(), x[0] - p.b_at(l), dir[0]);
                add(T::count(pk - 1), x[last] - rkl, dir[last] - drkl);
                add(T::count(self.sizes[l] - 1), p.r_at(l, l) - rkl, -drkl);
                for (j, &m) in self.others.iter().enumerate() {
                    if j != i {
                        add(T::count(self.sizes[m]), x[j + 1] - p.r_at(l, m), dir[j + 1]);
                    }
                }
                distances.push((w, q.0, q.1, q.2));
            }
            for &(i, j, w, rest) in &self.rest {
                let u = x[i + 1] - x[j + 1];
                let v = dir[i + 1] - dir[j + 1];
                distances.push((w, rest + pkf * u * u, two * pkf * u * v, pkf * v * v));
            }
        }

        let mut abs_terms = Vec::with_capacity(n + 1);
        if self.pen.lambda_s > T::zero() {
            for (i, &m) in self.others.iter().enumerate() {
                let z = self.agg.sparsity.get(k, m);
                if z > T::zero() {
                    abs_terms.push((two * z, x[i + 1], dir[i + 1]));
                }
            }
            let zkk = self.agg.sparsity.get(k, k);
            if pk > 1 && zkk > T::zero() {
                abs_terms.push((zkk, x[last], dir[last]));
            }
        }

        LineObjective {
            h: (h0, h1, -h2),
            a: (a0, dir[0] - dir[last]),
            log_a_coef: T::count(pk - 1),
            linear: (lin0, lin1),
            lambda_c: self.pen.lambda_c,
            distances,
            lambda_s: self.pen.lambda_s,
            eps: self.pen.eps,
            abs_terms,
        }
    }
}

/// Smallest positive root of `h0 + h1 s - h2 s^2` with `h0 > 0`, `h2 >= 0`.
fn positive_root<T: Real>(h0: T, h1: T, h2: T) -> Option<T> {
    if h2 > T::zero() {
        let disc = (h1 * h1 + T::lit(4.0) * h2 * h0).sqrt();
        // the two forms avoid cancellation for either sign of h1
        let r = if h1 < T::zero() { T::lit(2.0) * h0 / (disc - h1) } else { (h1 + disc) / (T::lit(2.0) * h2) };
        Some(r)
    } else if h1 < T::zero() {
        Some(h0 / -h1)
    } else {
        None
    }
}

/// Squared distance between clusters `m` and `l` without the contribution
/// of cluster `skip`.
fn distance_without<T: Real>(m: usize, l: usize, skip: usize, params: &BlockParameters<T>, sizes: &[usize]) -> T {
    let db = params.b_at(m) - params.b_at(l);
    let rml = params.r_at(m, l);
    let em = params.r_at(m, m) - rml;
    let el = params.r_at(l, l) - rml;
    let mut acc = db * db + T::count(sizes[m] - 1) * em * em + T::count(sizes[l] - 1) * el * el;
    for (n, &pn) in sizes.iter().enumerate() {
        if n != m && n != l && n != skip {
            let e = params.r_at(m, n) - params.r_at(l, n);
            acc += T::count(pn) * e * e;
        }
    }
    acc
}
