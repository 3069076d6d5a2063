//! G-block parameterization of a precision matrix.
//!
//! A model with `K` clusters stores a diagonal value `b[k]` shared by all
//! members of cluster `k` and a symmetric `K x K` matrix `R` whose entry
//! `r[k][l]` is the common off-diagonal value between members of `k` and `l`
//! (`r[k][k]` is the within-cluster value). The dense matrix is
//! `U R U^T + A` with `a[k] = b[k] - r[k][k]` on the diagonal.
//!
//! Everything here works on `K x K` quantities. Log-determinants, inverses
//! and positive-definiteness checks go through the cluster-mean matrix
//! `P^{1/2} R* P^{1/2}` with `R* = R + P^{-1} A`, never through the dense
//! `p x p` matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CggmError, Result};
use crate::scalar::Real;

/// Which matrix a fitted model stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Precision,
    Covariance,
}

/// Partition of `p` variables into `K` non-empty clusters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

impl ClusterAssignment {
    /// Builds an assignment from labels in `0..K`. Every label must be used.
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(CggmError::InvalidInput("assignment needs at least one variable".into()));
        }
        let k = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(CggmError::InvalidInput(format!("cluster {empty} has no members")));
        }
        Ok(Self { labels, sizes })
    }

    /// Every variable in its own cluster, labelled by position.
    pub fn singletons(p: usize) -> Self {
        Self { labels: (0..p).collect(), sizes: vec![1; p] }
    }

    /// Relabels arbitrary ids by order of first appearance.
    pub fn canonical(ids: &[usize]) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let labels = ids
            .iter()
            .map(|id| {
                let next = map.len();
                *map.entry(*id).or_insert(next)
            })
            .collect();
        Self::new(labels)
    }

    pub fn p(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, k: usize) -> usize {
        self.sizes[k]
    }

    pub fn label(&self, j: usize) -> usize {
        self.labels[j]
    }

    pub fn members(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(move |(_, &l)| l == k).map(|(j, _)| j)
    }

    /// True when labels are numbered by first appearance.
    pub fn is_canonical(&self) -> bool {
        let mut next = 0;
        for &l in &self.labels {
            if l > next {
                return false;
            }
            if l == next {
                next += 1;
            }
        }
        true
    }

    /// Permutation `perm` with `perm[new] = old` that makes the labels canonical.
    fn canonical_order(&self) -> Vec<usize> {
        let mut seen = vec![false; self.k()];
        let mut order = Vec::with_capacity(self.k());
        for &l in &self.labels {
            if !seen[l] {
                seen[l] = true;
                order.push(l);
            }
        }
        order
    }

    /// Merges cluster `b` into cluster `a` (`a < b`). Canonical labelling is
    /// preserved: the merged cluster keeps label `a` and labels above `b`
    /// shift down by one.
    pub(crate) fn merged(&self, a: usize, b: usize) -> Self {
        debug_assert!(a < b);
        let labels = self
            .labels
            .iter()
            .map(|&l| match l.cmp(&b) {
                std::cmp::Ordering::Less => l,
                std::cmp::Ordering::Equal => a,
                std::cmp::Ordering::Greater => l - 1,
            })
            .collect();
        let mut sizes = self.sizes.clone();
        sizes[a] += sizes[b];
        sizes.remove(b);
        Self { labels, sizes }
    }

    /// True when every cluster of `self` lies inside one cluster of `coarser`.
    pub fn refines(&self, coarser: &ClusterAssignment) -> bool {
        if self.p() != coarser.p() {
            return false;
        }
        let mut image = vec![usize::MAX; self.k()];
        for (j, &l) in self.labels.iter().enumerate() {
            let c = coarser.labels[j];
            if image[l] == usize::MAX {
                image[l] = c;
            } else if image[l] != c {
                return false;
            }
        }
        true
    }
}

/// Per-cluster diagonal values `b` and the symmetric matrix `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParameters<T: Real> {
    b: DVector<T>,
    r: DMatrix<T>,
}

impl<T: Real> BlockParameters<T> {
    /// `r` must be square, exactly symmetric and match `b` in size.
    pub fn new(b: DVector<T>, r: DMatrix<T>) -> Result<Self> {
        let k = b.len();
        if r.nrows() != k || r.ncols() != k {
            return Err(CggmError::Dimension(format!(
                "R is {}x{} but b has {k} entries",
                r.nrows(),
                r.ncols()
            )));
        }
        for i in 0..k {
            for j in 0..i {
                if r[(i, j)] != r[(j, i)] {
                    return Err(CggmError::InvalidInput(format!("R is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { b, r })
    }

    /// Builds parameters from the upper triangle of `r`, mirroring it.
    pub fn from_upper(b: DVector<T>, r: &DMatrix<T>) -> Result<Self> {
        let k = b.len();
        if r.nrows() != k || r.ncols() != k {
            return Err(CggmError::Dimension("R does not match b".into()));
        }
        let sym = DMatrix::from_fn(k, k, |i, j| if i <= j { r[(i, j)] } else { r[(j, i)] });
        Ok(Self { b, r: sym })
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    pub fn b(&self) -> &DVector<T> {
        &self.b
    }

    pub fn r(&self) -> &DMatrix<T> {
        &self.r
    }

    #[inline]
    pub fn b_at(&self, k: usize) -> T {
        self.b[k]
    }

    #[inline]
    pub fn r_at(&self, k: usize, l: usize) -> T {
        self.r[(k, l)]
    }

    /// `a[k] = b[k] - r[k][k]`.
    #[inline]
    pub fn a_at(&self, k: usize) -> T {
        self.b[k] - self.r[(k, k)]
    }

    pub fn set_b(&mut self, k: usize, value: T) {
        self.b[k] = value;
    }

    /// Writes both `(k, l)` and `(l, k)`.
    pub fn set_r(&mut self, k: usize, l: usize, value: T) {
        self.r[(k, l)] = value;
        self.r[(l, k)] = value;
    }

    /// Size-weighted merge of cluster `kb` into `ka` (`ka < kb`). The new
    /// within-cluster value is the average of every within-cluster
    /// off-diagonal entry of the dense matrix.
    pub(crate) fn merged(&self, ka: usize, kb: usize, sizes: &[usize]) -> Self {
        debug_assert!(ka < kb);
        let k = self.k();
        let (pa, pb) = (T::count(sizes[ka]), T::count(sizes[kb]));
        let total = pa + pb;
        let pairs = |n: T| n * (n - T::one()) / T::lit(2.0);
        let within = (pairs(pa) * self.r[(ka, ka)] + pairs(pb) * self.r[(kb, kb)] + pa * pb * self.r[(ka, kb)])
            / pairs(total);

        let keep: Vec<usize> = (0..k).filter(|&i| i != kb).collect();
        let mut b = DVector::from_fn(k - 1, |i, _| self.b[keep[i]]);
        let mut r = DMatrix::from_fn(k - 1, k - 1, |i, j| self.r[(keep[i], keep[j])]);
        b[ka] = (pa * self.b[ka] + pb * self.b[kb]) / total;
        for (i, &m) in keep.iter().enumerate() {
            if m == ka {
                continue;
            }
            let v = (pa * self.r[(ka, m)] + pb * self.r[(kb, m)]) / total;
            r[(ka, i)] = v;
            r[(i, ka)] = v;
        }
        r[(ka, ka)] = within;
        Self { b, r }
    }

    fn permuted(&self, order: &[usize]) -> Self {
        let k = order.len();
        Self {
            b: DVector::from_fn(k, |i, _| self.b[order[i]]),
            r: DMatrix::from_fn(k, k, |i, j| self.r[(order[i], order[j])]),
        }
    }
}

/// Cluster assignment plus block parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionModel<T: Real> {
    pub assignment: ClusterAssignment,
    pub params: BlockParameters<T>,
    pub target: Target,
}

impl<T: Real> PrecisionModel<T> {
    pub fn new(assignment: ClusterAssignment, params: BlockParameters<T>, target: Target) -> Result<Self> {
        if assignment.k() != params.k() {
            return Err(CggmError::Dimension(format!(
                "assignment has {} clusters, parameters have {}",
                assignment.k(),
                params.k()
            )));
        }
        Ok(Self { assignment, params, target })
    }

    /// Singleton model reproducing the symmetric matrix `m` exactly:
    /// `b = diag(m)`, `R` the off-diagonal part of `m`.
    pub fn singletons_from(m: &DMatrix<T>, target: Target) -> Result<Self> {
        let p = m.nrows();
        if m.ncols() != p {
            return Err(CggmError::Dimension("matrix must be square".into()));
        }
        let b = m.diagonal();
        let r = DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                T::zero()
            } else {
                (m[(i, j)] + m[(j, i)]) / T::lit(2.0)
            }
        });
        Ok(Self { assignment: ClusterAssignment::singletons(p), params: BlockParameters { b, r }, target })
    }

    pub fn p(&self) -> usize {
        self.assignment.p()
    }

    pub fn k(&self) -> usize {
        self.assignment.k()
    }

    /// Dense `p x p` matrix `U R U^T + A`.
    pub fn materialize(&self) -> DMatrix<T> {
        let labels = self.assignment.labels();
        let p = labels.len();
        DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                self.params.b[labels[i]]
            } else {
                self.params.r[(labels[i], labels[j])]
            }
        })
    }

    /// `P^{1/2} R* P^{1/2}`: entries `sqrt(p_k p_l) r_kl`, diagonal
    /// `b_k + (p_k - 1) r_kk`.
    pub fn cluster_mean_matrix(&self) -> DMatrix<T> {
        let sizes = self.assignment.sizes();
        let k = sizes.len();
        DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                self.params.b[i] + T::count(sizes[i] - 1) * self.params.r[(i, i)]
            } else {
                (T::count(sizes[i]) * T::count(sizes[j])).sqrt() * self.params.r[(i, j)]
            }
        })
    }

    /// `R* = R + P^{-1} A`.
    pub fn r_star(&self) -> DMatrix<T> {
        let sizes = self.assignment.sizes();
        let mut rs = self.params.r.clone();
        for (k, &pk) in sizes.iter().enumerate() {
            rs[(k, k)] += self.params.a_at(k) / T::count(pk);
        }
        rs
    }

    fn check_centering(&self) -> Result<()> {
        for (k, &pk) in self.assignment.sizes().iter().enumerate() {
            // a[k] only enters the dense matrix when the cluster has two or
            // more members; for singletons r[k][k] is inert.
            let a = self.params.a_at(k);
            if pk > 1 && !(a > T::zero()) {
                return Err(CggmError::NotPositiveDefinite(format!(
                    "cluster {k}: b - r = {} is not positive",
                    a.as_f64()
                )));
            }
        }
        Ok(())
    }

    /// Verifies positive definiteness through the `K x K` Cholesky factor.
    pub fn check_pd(&self) -> Result<()> {
        self.check_centering()?;
        let m = self.cluster_mean_matrix();
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CggmError::NotPositiveDefinite("non-finite parameters".into()));
        }
        m.cholesky()
            .map(|_| ())
            .ok_or_else(|| CggmError::NotPositiveDefinite("cluster-mean matrix is not positive definite".into()))
    }

    /// `log |Theta|` from the cluster decomposition.
    pub fn log_det(&self) -> Result<T> {
        self.check_centering()?;
        let chol = self
            .cluster_mean_matrix()
            .cholesky()
            .ok_or_else(|| CggmError::NotPositiveDefinite("cluster-mean matrix is not positive definite".into()))?;
        let l = chol.l_dirty();
        let mut acc = T::zero();
        for i in 0..l.nrows() {
            acc += l[(i, i)].ln();
        }
        acc *= T::lit(2.0);
        for (k, &pk) in self.assignment.sizes().iter().enumerate() {
            if pk > 1 {
                acc += T::count(pk - 1) * self.params.a_at(k).ln();
            }
        }
        Ok(acc)
    }

    /// `tr(S Theta)` via cluster aggregates of `s`.
    pub fn trace_term(&self, s: &DMatrix<T>) -> Result<T> {
        let agg = CovarianceAggregates::new(s, &self.assignment)?;
        Ok(agg.trace_term(&self.params))
    }

    /// Inverse in block form; the assignment is unchanged.
    pub fn block_inverse(&self) -> Result<Self> {
        self.check_centering()?;
        let sizes = self.assignment.sizes();
        let k = sizes.len();
        let m = self.cluster_mean_matrix();
        let inv = m
            .cholesky()
            .ok_or_else(|| CggmError::NotPositiveDefinite("cluster-mean matrix is not positive definite".into()))?
            .inverse();
        // R*' = P^{-1/2} M^{-1} P^{-1/2}, a' = 1 / a.
        let mut r = DMatrix::from_fn(k, k, |i, j| {
            inv[(i, j)] / (T::count(sizes[i]) * T::count(sizes[j])).sqrt()
        });
        let mut b = DVector::zeros(k);
        for i in 0..k {
            let rs = r[(i, i)];
            if sizes[i] > 1 {
                let a = T::one() / self.params.a_at(i);
                let rkk = rs - a / T::count(sizes[i]);
                r[(i, i)] = rkk;
                b[i] = a + rkk;
            } else {
                r[(i, i)] = T::zero();
                b[i] = rs;
            }
        }
        Ok(Self { assignment: self.assignment.clone(), params: BlockParameters { b, r }, target: self.target })
    }

    /// Equivalent model with labels numbered by first appearance.
    pub fn canonicalized(&self) -> Self {
        if self.assignment.is_canonical() {
            return self.clone();
        }
        let order = self.assignment.canonical_order();
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let labels = self.assignment.labels.iter().map(|&l| inverse[l]).collect();
        Self {
            assignment: ClusterAssignment::new(labels).expect("relabelled assignment is valid"),
            params: self.params.permuted(&order),
            target: self.target,
        }
    }

    /// Cluster `kb` merged into `ka` (`ka < kb`), parameters averaged by size.
    pub(crate) fn merged(&self, ka: usize, kb: usize) -> Self {
        Self {
            params: self.params.merged(ka, kb, self.assignment.sizes()),
            assignment: self.assignment.merged(ka, kb),
            target: self.target,
        }
    }

    /// Entries `r[k][l]` with `|r| < eps` that are visible in the dense
    /// matrix, reported as zeros.
    pub fn zero_pattern(&self, eps: T) -> DMatrix<bool> {
        let sizes = self.assignment.sizes();
        let k = sizes.len();
        DMatrix::from_fn(k, k, |i, j| {
            (i != j || sizes[i] > 1) && self.params.r[(i, j)].abs() < eps
        })
    }

    /// Dense matrix with entries inside the zero band set to exactly zero.
    pub fn thresholded(&self, eps: T) -> DMatrix<T> {
        let mut m = self.materialize();
        let labels = self.assignment.labels();
        let zeros = self.zero_pattern(eps);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i != j && zeros[(labels[i], labels[j])] {
                    m[(i, j)] = T::zero();
                }
            }
        }
        m
    }
}

/// `U^T S U` and the per-cluster traces `tr S_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAggregates<T: Real> {
    cross: DMatrix<T>,
    traces: DVector<T>,
}

impl<T: Real> CovarianceAggregates<T> {
    pub fn new(s: &DMatrix<T>, assignment: &ClusterAssignment) -> Result<Self> {
        let p = assignment.p();
        if s.nrows() != p || s.ncols() != p {
            return Err(CggmError::Dimension(format!("S is {}x{}, expected {p}x{p}", s.nrows(), s.ncols())));
        }
        let k = assignment.k();
        let labels = assignment.labels();
        let mut cross = DMatrix::zeros(k, k);
        let mut traces = DVector::zeros(k);
        for i in 0..p {
            traces[labels[i]] += s[(i, i)];
            for j in 0..p {
                cross[(labels[i], labels[j])] += s[(i, j)];
            }
        }
        Ok(Self { cross, traces })
    }

    /// `u_k^T S u_l`.
    #[inline]
    pub fn cross(&self, k: usize, l: usize) -> T {
        self.cross[(k, l)]
    }

    /// `tr S_k`.
    #[inline]
    pub fn trace(&self, k: usize) -> T {
        self.traces[k]
    }

    pub fn trace_term(&self, params: &BlockParameters<T>) -> T {
        let k = params.k();
        let mut acc = T::zero();
        for i in 0..k {
            acc += params.a_at(i) * self.traces[i];
            for j in 0..k {
                acc += params.r_at(i, j) * self.cross[(i, j)];
            }
        }
        acc
    }

    /// Aggregates after merging cluster `b` into `a` (`a < b`).
    pub(crate) fn merged(&self, a: usize, b: usize) -> Self {
        Self { cross: merge_pair_matrix(&self.cross, a, b), traces: merge_vector(&self.traces, a, b) }
    }
}

/// Additive merge of a `K x K` aggregate `u_k^T M u_l` under `u_a <- u_a + u_b`.
pub(crate) fn merge_pair_matrix<T: Real>(m: &DMatrix<T>, a: usize, b: usize) -> DMatrix<T> {
    let k = m.nrows();
    let keep: Vec<usize> = (0..k).filter(|&i| i != b).collect();
    let mut out = DMatrix::from_fn(k - 1, k - 1, |i, j| m[(keep[i], keep[j])]);
    for (i, &c) in keep.iter().enumerate() {
        if c == a {
            continue;
        }
        let v = m[(a, c)] + m[(b, c)];
        out[(a, i)] = v;
        out[(i, a)] = v;
    }
    out[(a, a)] = m[(a, a)] + m[(b, b)] + m[(a, b)] + m[(b, a)];
    out
}

pub(crate) fn merge_vector<T: Real>(v: &DVector<T>, a: usize, b: usize) -> DVector<T> {
    let keep: Vec<usize> = (0..v.len()).filter(|&i| i != b).collect();
    let mut out = DVector::from_fn(keep.len(), |i, _| v[keep[i]]);
    out[a] = v[a] + v[b];
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model(labels: Vec<usize>, b: Vec<f64>, r: Vec<f64>) -> PrecisionModel<f64> {
        let k = b.len();
        PrecisionModel::new(
            ClusterAssignment::new(labels).unwrap(),
            BlockParameters::from_upper(DVector::from_vec(b), &DMatrix::from_row_slice(k, k, &r)).unwrap(),
            Target::Precision,
        )
        .unwrap()
    }

    #[test]
    fn materialize_single_cluster() {
        let m = model(vec![0, 0], vec![2.0], vec![0.5]);
        assert_eq!(m.materialize(), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]));
    }

    #[test]
    fn singletons_reproduce_matrix() {
        let dense = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 1.0]);
        let m = PrecisionModel::singletons_from(&dense, Target::Precision).unwrap();
        assert_eq!(m.materialize(), dense);
    }

    #[test]
    fn log_det_identity_is_zero() {
        let m = PrecisionModel::singletons_from(&DMatrix::<f64>::identity(4, 4), Target::Precision).unwrap();
        assert_eq!(m.log_det().unwrap(), 0.0);
    }

    #[test]
    fn log_det_equicorrelated() {
        // eigenvalues 2, 0.5, 0.5
        let m = model(vec![0, 0, 0], vec![1.0], vec![0.5]);
        let expected = (2.0f64 * 0.5 * 0.5).ln();
        assert_relative_eq!(m.log_det().unwrap(), expected, epsilon = 1e-14);
        assert_relative_eq!(expected, -0.6931471805599453, epsilon = 1e-15);
    }

    #[test]
    fn rejects_zero_centering_value() {
        let m = model(vec![0, 0, 1], vec![1.0, 1.0], vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(m.check_pd(), Err(CggmError::NotPositiveDefinite(_))));
        assert!(m.log_det().is_err());
    }

    #[test]
    fn rejects_indefinite_r_star() {
        let m = model(vec![0, 1], vec![1.0, 1.0], vec![0.0, 2.0, 2.0, 0.0]);
        assert!(m.check_pd().is_err());
    }

    #[test]
    fn trace_with_identity_covariance() {
        let m = model(vec![0, 0, 1, 1, 1], vec![2.0, 3.0], vec![0.5, 0.1, 0.1, 0.2]);
        let s = DMatrix::<f64>::identity(5, 5);
        assert_relative_eq!(m.trace_term(&s).unwrap(), 2.0 * 2.0 + 3.0 * 3.0, epsilon = 1e-14);
    }

    #[test]
    fn trace_dimension_mismatch() {
        let m = model(vec![0, 0], vec![2.0], vec![0.5]);
        assert!(matches!(m.trace_term(&DMatrix::identity(3, 3)), Err(CggmError::Dimension(_))));
    }

    #[test]
    fn inverse_of_identity() {
        let m = PrecisionModel::singletons_from(&DMatrix::<f64>::identity(3, 3), Target::Precision).unwrap();
        let inv = m.block_inverse().unwrap();
        assert_eq!(inv.materialize(), DMatrix::identity(3, 3));
    }

    #[test]
    fn inverse_keeps_equal_entries() {
        let m = model(vec![0, 0, 0], vec![1.0], vec![0.5]);
        let dense_inv = m.materialize().try_inverse().unwrap();
        let inv = m.block_inverse().unwrap().materialize();
        assert!((&dense_inv - &inv).norm() < 1e-12);
        assert_relative_eq!(dense_inv[(0, 0)], dense_inv[(1, 1)], epsilon = 1e-10);
        assert_relative_eq!(dense_inv[(0, 1)], dense_inv[(1, 2)], epsilon = 1e-10);
    }

    #[test]
    fn canonical_relabelling() {
        let a = ClusterAssignment::canonical(&[7, 3, 7, 9]).unwrap();
        assert_eq!(a.labels(), &[0, 1, 0, 2]);
        assert!(a.is_canonical());
        assert!(!ClusterAssignment::new(vec![1, 0]).unwrap().is_canonical());
    }

    #[test]
    fn canonicalized_model_keeps_dense_matrix() {
        let m = model(vec![1, 0, 1, 2], vec![1.0, 2.0, 3.0], vec![0.1, 0.2, 0.3, 0.2, 0.4, 0.0, 0.3, 0.0, 0.0]);
        let c = m.canonicalized();
        assert!(c.assignment.is_canonical());
        assert_eq!(c.materialize(), m.materialize());
    }

    #[test]
    fn empty_cluster_rejected() {
        assert!(ClusterAssignment::new(vec![0, 2]).is_err());
    }

    #[test]
    fn merge_identical_singletons_is_exact() {
        let m = model(vec![0, 1], vec![2.0, 2.0], vec![0.0, 0.5, 0.5, 0.0]);
        let merged = m.merged(0, 1);
        assert_eq!(merged.k(), 1);
        assert_eq!(merged.params.b_at(0), 2.0);
        assert_eq!(merged.params.r_at(0, 0), 0.5);
        assert_eq!(merged.materialize(), m.materialize());
    }

    #[test]
    fn aggregates_merge_additively() {
        let s = DMatrix::from_fn(4, 4, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let a = ClusterAssignment::singletons(4);
        let agg = CovarianceAggregates::new(&s, &a).unwrap();
        let merged = agg.merged(1, 3);
        let direct = CovarianceAggregates::new(&s, &a.merged(1, 3)).unwrap();
        assert!((merged.cross - direct.cross).norm() < 1e-15);
        assert!((merged.traces - direct.traces).norm() < 1e-15);
    }

    #[test]
    fn refinement_relation() {
        let fine = ClusterAssignment::new(vec![0, 1, 2, 2]).unwrap();
        let coarse = ClusterAssignment::new(vec![0, 0, 1, 1]).unwrap();
        assert!(fine.refines(&coarse));
        assert!(!coarse.refines(&fine));
    }
}
