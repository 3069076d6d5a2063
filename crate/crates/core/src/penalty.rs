//! Clustering and sparsity weights, column distances and the smoothed
//! absolute value.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::blockmodel::{merge_pair_matrix, BlockParameters, ClusterAssignment};
use crate::error::{CggmError, Result};
use crate::scalar::Real;

/// Smoothed `|x|` with its first and second derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothAbs<T> {
    pub value: T,
    pub slope: T,
    pub curvature: T,
}

/// `(x^2 + eps^2) / (2 eps)` inside `|x| < eps`, `|x|` outside.
#[inline]
pub fn smoothed_abs<T: Real>(x: T, eps: T) -> SmoothAbs<T> {
    if x.abs() < eps {
        SmoothAbs { value: (x * x + eps * eps) / (eps + eps), slope: x / eps, curvature: T::one() / eps }
    } else {
        let slope = if x > T::zero() { T::one() } else { -T::one() };
        SmoothAbs { value: x.abs(), slope, curvature: T::zero() }
    }
}

/// Column distance of `m` between variables `j` and `k`, ignoring the
/// shared entry `m[j][k]`.
pub fn pairwise_distance<T: Real>(m: &DMatrix<T>, j: usize, k: usize) -> T {
    assert_ne!(j, k, "distance of a variable to itself");
    squared_pairwise(m, j, k).sqrt()
}

fn squared_pairwise<T: Real>(m: &DMatrix<T>, j: usize, k: usize) -> T {
    let d = m[(j, j)] - m[(k, k)];
    let mut acc = d * d;
    for i in 0..m.nrows() {
        if i != j && i != k {
            let e = m[(j, i)] - m[(k, i)];
            acc += e * e;
        }
    }
    acc
}

/// All squared column distances; the diagonal is zero.
pub fn squared_distances<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let p = m.nrows();
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j + 1..p {
            let d = squared_pairwise(m, j, k);
            out[(j, k)] = d;
            out[(k, j)] = d;
        }
    }
    out
}

/// Symmetric `p x p` matrix with zero diagonal, storing only `j < k` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric<T> {
    p: usize,
    entries: BTreeMap<(usize, usize), T>,
}

impl<T: Real> SparseSymmetric<T> {
    pub fn new(p: usize) -> Self {
        Self { p, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    /// Number of stored pairs.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn key(j: usize, k: usize) -> (usize, usize) {
        if j < k {
            (j, k)
        } else {
            (k, j)
        }
    }

    /// Sets the pair `{j, k}`; zero values are dropped.
    pub fn insert(&mut self, j: usize, k: usize, value: T) -> Result<()> {
        if j == k {
            return Err(CggmError::InvalidInput(format!("diagonal entry ({j}, {j}) in a weight matrix")));
        }
        if j >= self.p || k >= self.p {
            return Err(CggmError::Dimension(format!("pair ({j}, {k}) outside a {}-variable matrix", self.p)));
        }
        if !value.is_finite() || value < T::zero() {
            return Err(CggmError::InvalidInput(format!("weight ({j}, {k}) = {} must be finite and >= 0", value.as_f64())));
        }
        if value == T::zero() {
            self.entries.remove(&Self::key(j, k));
        } else {
            self.entries.insert(Self::key(j, k), value);
        }
        Ok(())
    }

    pub fn get(&self, j: usize, k: usize) -> T {
        if j == k {
            return T::zero();
        }
        self.entries.get(&Self::key(j, k)).copied().unwrap_or_else(T::zero)
    }

    /// Stored pairs `(j, k, value)` with `j < k` in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        self.entries.iter().map(|(&(j, k), &v)| (j, k, v))
    }

    /// Sum over unordered pairs.
    pub fn total(&self) -> T {
        self.entries.values().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.p, self.p);
        for (j, k, v) in self.iter() {
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
        m
    }

    /// Every off-diagonal pair set to one.
    pub fn ones(p: usize) -> Self {
        let mut entries = BTreeMap::new();
        for j in 0..p {
            for k in j + 1..p {
                entries.insert((j, k), T::one());
            }
        }
        Self { p, entries }
    }

    /// `u_k^T M u_l` for every pair of clusters; the diagonal holds the sum
    /// over ordered pairs inside each cluster.
    pub fn aggregate(&self, assignment: &ClusterAssignment) -> DMatrix<T> {
        let k = assignment.k();
        let mut out = DMatrix::zeros(k, k);
        for (j, i, v) in self.iter() {
            let (a, b) = (assignment.label(j), assignment.label(i));
            out[(a, b)] += v;
            out[(b, a)] += v;
        }
        out
    }
}

/// Sparsity weights `z`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum SparsityWeights<T> {
    /// One for every off-diagonal pair.
    #[default]
    Uniform,
    Custom(SparseSymmetric<T>),
}

impl<T: Real> SparsityWeights<T> {
    pub fn aggregate(&self, assignment: &ClusterAssignment) -> DMatrix<T> {
        match self {
            Self::Uniform => {
                let sizes = assignment.sizes();
                DMatrix::from_fn(sizes.len(), sizes.len(), |i, j| {
                    if i == j {
                        T::count(sizes[i] * (sizes[i] - 1))
                    } else {
                        T::count(sizes[i] * sizes[j])
                    }
                })
            }
            Self::Custom(z) => z.aggregate(assignment),
        }
    }
}

/// Weights and tuning parameters of the penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig<T: Real> {
    pub weights: SparseSymmetric<T>,
    pub sparsity: SparsityWeights<T>,
    /// Coefficient of the aggregation penalty as it enters the objective.
    pub lambda_c: T,
    pub lambda_s: T,
    pub phi: T,
    pub knn: usize,
    pub eps_abs: T,
}

impl<T: Real> PenaltyConfig<T> {
    pub const DEFAULT_EPS_ABS: f64 = 5e-3;

    pub fn new(weights: SparseSymmetric<T>) -> Self {
        Self {
            weights,
            sparsity: SparsityWeights::Uniform,
            lambda_c: T::zero(),
            lambda_s: T::zero(),
            phi: T::one(),
            knn: 5,
            eps_abs: T::lit(Self::DEFAULT_EPS_ABS),
        }
    }

    pub fn with_lambdas(mut self, lambda_c: T, lambda_s: T) -> Self {
        self.lambda_c = lambda_c;
        self.lambda_s = lambda_s;
        self
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.weights.dim() != p {
            return Err(CggmError::Dimension(format!("W is for {} variables, data has {p}", self.weights.dim())));
        }
        if let SparsityWeights::Custom(z) = &self.sparsity {
            if z.dim() != p {
                return Err(CggmError::Dimension(format!("Z is for {} variables, data has {p}", z.dim())));
            }
        }
        let nonneg = |x: T| x.is_finite() && x >= T::zero();
        if !nonneg(self.lambda_c) || !nonneg(self.lambda_s) {
            return Err(CggmError::InvalidInput("lambda_c and lambda_s must be finite and >= 0".into()));
        }
        if !(self.eps_abs > T::zero()) {
            return Err(CggmError::InvalidInput("smoothing width must be positive".into()));
        }
        Ok(())
    }
}

/// `S^{-1}` when `S` admits a Cholesky factor, otherwise `(S + I)^{-1}`.
/// The flag reports whether the fallback was used.
pub fn reference_matrix<T: Real>(s: &DMatrix<T>) -> Result<(DMatrix<T>, bool)> {
    let p = s.nrows();
    if s.ncols() != p {
        return Err(CggmError::Dimension("covariance must be square".into()));
    }
    if let Some(ch) = s.clone().cholesky() {
        let inv = ch.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return Ok((symmetrize(inv), false));
        }
    }
    let shifted = s + DMatrix::identity(p, p);
    let inv = shifted
        .cholesky()
        .ok_or_else(|| CggmError::Degenerate("S + I is not positive definite".into()))?
        .inverse();
    Ok((symmetrize(inv), true))
}

pub(crate) fn symmetrize<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] + m[(j, i)]) * half)
}

/// k-NN Gaussian weights on `S^{-1}` (or the regularized fallback).
pub fn build_weights<T: Real>(s: &DMatrix<T>, knn: usize, phi: T) -> Result<SparseSymmetric<T>> {
    let (m, _) = reference_matrix(s)?;
    weights_from_reference(&m, knn, phi)
}

/// Weights from the squared column distances of an already inverted matrix.
pub fn weights_from_reference<T: Real>(m: &DMatrix<T>, knn: usize, phi: T) -> Result<SparseSymmetric<T>> {
    if knn == 0 {
        return Err(CggmError::InvalidInput("knn must be positive".into()));
    }
    if !(phi > T::zero()) {
        return Err(CggmError::InvalidInput("phi must be positive".into()));
    }
    let d2 = squared_distances(m);
    if d2.iter().any(|v| !v.is_finite()) {
        return Err(CggmError::Degenerate("non-finite pairwise distance".into()));
    }
    let edges = neighbor_edges(&d2, knn);
    let p = m.nrows();
    let mut w = SparseSymmetric::new(p);
    if edges.is_empty() {
        return Ok(w);
    }
    let mean = edges.iter().fold(T::zero(), |acc, &(j, k)| acc + d2[(j, k)]) / T::count(edges.len());
    for &(j, k) in &edges {
        let value = if mean > T::zero() { (-phi * d2[(j, k)] / mean).exp() } else { T::one() };
        // exp underflow would drop the pair and could disconnect the graph
        let value = if value > T::zero() { value } else { T::lit(f64::MIN_POSITIVE).max(T::lit(1e-300)) };
        w.insert(j, k, value)?;
    }
    Ok(w)
}

/// Symmetrized k-NN pairs plus the minimum spanning tree edges needed to
/// connect them, sorted.
fn neighbor_edges<T: Real>(d2: &DMatrix<T>, knn: usize) -> Vec<(usize, usize)> {
    let p = d2.nrows();
    let mut set = std::collections::BTreeSet::new();
    for j in 0..p {
        let mut others: Vec<usize> = (0..p).filter(|&i| i != j).collect();
        others.sort_by(|&a, &b| d2[(j, a)].partial_cmp(&d2[(j, b)]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        for &i in others.iter().take(knn) {
            set.insert((j.min(i), j.max(i)));
        }
    }
    let mut components = UnionFind::new(p);
    for &(j, k) in &set {
        components.union(j, k);
    }
    if components.count() > 1 {
        for (j, k) in minimum_spanning_tree(d2) {
            if components.union(j, k) {
                set.insert((j, k));
            }
            if components.count() == 1 {
                break;
            }
        }
    }
    set.into_iter().collect()
}

/// Kruskal over all pairs; ties broken by `(j, k)`. Edges come out in the
/// order they were accepted.
fn minimum_spanning_tree<T: Real>(d2: &DMatrix<T>) -> Vec<(usize, usize)> {
    let p = d2.nrows();
    let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j + 1..p).map(move |k| (j, k))).collect();
    pairs.sort_by(|a, b| {
        d2[*a].partial_cmp(&d2[*b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
    });
    let mut uf = UnionFind::new(p);
    pairs.into_iter().filter(|&(j, k)| uf.union(j, k)).collect()
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    groups: usize,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), groups: n }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns true when the two elements were in different groups.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        self.groups -= 1;
        true
    }

    pub(crate) fn count(&self) -> usize {
        self.groups
    }
}

/// Number of connected components of the graph of nonzero weights.
pub fn connected_components<T: Real>(w: &SparseSymmetric<T>) -> usize {
    let mut uf = UnionFind::new(w.dim());
    for (j, k, _) in w.iter() {
        uf.union(j, k);
    }
    uf.count()
}

/// Squared distance between clusters `k` and `l` in block coordinates.
pub fn cluster_distance_squared<T: Real>(
    k: usize,
    l: usize,
    params: &BlockParameters<T>,
    sizes: &[usize],
) -> T {
    debug_assert_ne!(k, l);
    let db = params.b_at(k) - params.b_at(l);
    let rkl = params.r_at(k, l);
    let ek = params.r_at(k, k) - rkl;
    let el = params.r_at(l, l) - rkl;
    let mut acc = db * db + T::count(sizes[k] - 1) * ek * ek + T::count(sizes[l] - 1) * el * el;
    for (m, &pm) in sizes.iter().enumerate() {
        if m != k && m != l {
            let e = params.r_at(k, m) - params.r_at(l, m);
            acc += T::count(pm) * e * e;
        }
    }
    acc
}

/// Distance between the columns of any member of `k` and any member of `l`.
pub fn cluster_distance<T: Real>(
    k: usize,
    l: usize,
    params: &BlockParameters<T>,
    assignment: &ClusterAssignment,
) -> T {
    assert_ne!(k, l, "distance of a cluster to itself");
    cluster_distance_squared(k, l, params, assignment.sizes()).sqrt()
}

/// Sum of `w[j][i]` over `j` in cluster `k` and `i` in cluster `l`.
pub fn aggregate_weight<T: Real>(k: usize, l: usize, w: &SparseSymmetric<T>, assignment: &ClusterAssignment) -> T {
    assert_ne!(k, l, "aggregate weight of a cluster with itself");
    w.iter()
        .filter(|&(j, i, _)| {
            let (a, b) = (assignment.label(j), assignment.label(i));
            (a == k && b == l) || (a == l && b == k)
        })
        .fold(T::zero(), |acc, (_, _, v)| acc + v)
}

/// Cluster-level aggregate of a pairwise weight matrix, merged additively.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAggregates<T: Real>(pub DMatrix<T>);

impl<T: Real> PairAggregates<T> {
    pub fn get(&self, k: usize, l: usize) -> T {
        self.0[(k, l)]
    }

    pub(crate) fn merged(&self, a: usize, b: usize) -> Self {
        Self(merge_pair_matrix(&self.0, a, b))
    }
}

/// `tau` times the median column distance of `m` over `j < k`.
pub fn median_distance_threshold<T: Real>(m: &DMatrix<T>, tau: T) -> T {
    let p = m.nrows();
    let mut d: Vec<T> = (0..p).flat_map(|j| (j + 1..p).map(move |k| (j, k))).map(|(j, k)| pairwise_distance(m, j, k)).collect();
    if d.is_empty() {
        return T::zero();
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) * T::lit(0.5) };
    tau * median
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn smoothed_abs_at_zero() {
        let s = smoothed_abs(0.0f64, 5e-3);
        assert!((s.value - 2.5e-3).abs() < 1e-18);
        assert_eq!(s.slope, 0.0);
        assert!((s.curvature - 200.0).abs() < 1e-12);
    }

    #[test]
    fn smoothed_abs_outside_band() {
        let s = smoothed_abs(1.0f64, 5e-3);
        assert_eq!((s.value, s.slope, s.curvature), (1.0, 1.0, 0.0));
        let s = smoothed_abs(-2.0, 5e-3);
        assert_eq!((s.value, s.slope), (2.0, -1.0));
    }

    #[test]
    fn smoothed_abs_continuous_at_band_edge() {
        let eps = 5e-3f64;
        let inside = smoothed_abs(eps * (1.0 - 1e-12), eps);
        let outside = smoothed_abs(eps, eps);
        assert!((inside.value - outside.value).abs() < 1e-12);
        assert!((inside.slope - outside.slope).abs() < 1e-9);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_distance(&DMatrix::<f64>::identity(3, 3), 0, 2), 0.0);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        assert_eq!(pairwise_distance(&m, 0, 1), 1.0);
    }

    #[test]
    fn zero_distances_give_unit_weights() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.2, 0.2, 1.0, 0.2, 0.2, 0.2, 1.0]);
        let w = weights_from_reference(&m, 2, 1.0).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|(_, _, v)| v == 1.0));
    }

    #[test]
    fn equidistant_weights_are_exp_minus_phi() {
        // diagonal (0, -u, u) with u^2 = 1/3 puts all three columns at squared distance 4/3
        let u = (1.0f64 / 3.0).sqrt();
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, -u, 1.0, 0.0, 1.0, u]);
        let d2 = squared_distances(&m);
        assert!((d2[(0, 1)] - d2[(0, 2)]).abs() < 1e-15 && (d2[(0, 1)] - d2[(1, 2)]).abs() < 1e-15);
        let w = weights_from_reference(&m, 2, 1.5).unwrap();
        assert_eq!(w.len(), 3);
        for (_, _, v) in w.iter() {
            assert!((v - (-1.5f64).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_follow_normalized_distances() {
        let m: DMatrix<f64> = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 2.0, 0.3, 0.1, 0.3, 3.0]);
        let d2 = squared_distances(&m);
        let mean = (d2[(0, 1)] + d2[(0, 2)] + d2[(1, 2)]) / 3.0;
        let w = weights_from_reference(&m, 2, 0.5).unwrap();
        for (j, k, v) in w.iter() {
            assert!((v - (-0.5 * d2[(j, k)] / mean).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn repair_connects_separated_pairs() {
        // variables {0,1} and {2,3} far apart
        let m = DMatrix::from_row_slice(4, 4, &[1.0, 0.5, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 5.0, 2.0, 0.0, 0.0, 2.0, 5.0]);
        let d2 = squared_distances(&m);
        let knn_only = {
            let mut uf = UnionFind::new(4);
            uf.union(0, 1);
            uf.union(2, 3);
            uf.count()
        };
        assert_eq!(knn_only, 2);
        let w = weights_from_reference(&m, 1, 1.0).unwrap();
        assert_eq!(connected_components(&w), 1);
        assert_eq!(w.len(), 3);
        assert!(d2[(0, 1)] < d2[(0, 2)]);
    }

    #[test]
    fn singleton_cluster_distance_matches_pairwise() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 1.0]);
        let model = crate::blockmodel::PrecisionModel::singletons_from(&m, crate::blockmodel::Target::Precision).unwrap();
        for (j, k) in [(0, 1), (0, 2), (1, 2)] {
            assert_eq!(cluster_distance(j, k, &model.params, &model.assignment), pairwise_distance(&m, j, k));
        }
    }

    #[test]
    fn two_singletons_differing_in_diagonal() {
        let params = BlockParameters::from_upper(DVector::from_vec(vec![1.0, 2.0]), &DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.0, 0.0])).unwrap();
        let a = ClusterAssignment::singletons(2);
        assert_eq!(cluster_distance(0, 1, &params, &a), 1.0);
    }

    #[test]
    fn aggregate_weight_sums_members() {
        let mut w = SparseSymmetric::new(3);
        w.insert(0, 2, 0.3).unwrap();
        let a = ClusterAssignment::new(vec![0, 0, 1]).unwrap();
        assert_eq!(aggregate_weight(0, 1, &w, &a), 0.3);
        assert_eq!(w.aggregate(&a)[(0, 1)], 0.3);
    }

    #[test]
    fn uniform_sparsity_aggregate_merges_additively() {
        let a = ClusterAssignment::new(vec![0, 1, 1, 2, 2, 2]).unwrap();
        let z = SparsityWeights::<f64>::Uniform.aggregate(&a);
        let merged = PairAggregates(z).merged(1, 2);
        let direct = SparsityWeights::<f64>::Uniform.aggregate(&a.merged(1, 2));
        assert_eq!(merged.0, direct);
    }

    #[test]
    fn rejects_bad_weight_entries() {
        let mut w = SparseSymmetric::<f64>::new(2);
        assert!(w.insert(0, 0, 1.0).is_err());
        assert!(w.insert(0, 1, -1.0).is_err());
        assert!(w.insert(0, 2, 1.0).is_err());
    }

    #[test]
    fn fallback_when_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (m, regularized) = reference_matrix(&s).unwrap();
        assert!(regularized);
        let expected = (s + DMatrix::identity(2, 2)).try_inverse().unwrap();
        assert!((m - expected).norm() < 1e-12);
    }
}
