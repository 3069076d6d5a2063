//! Solutions over an increasing aggregation parameter, the merge tree they
//! induce, and constrained refitting.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::blockmodel::{BlockParameters, PrecisionModel, Target};
use crate::error::{CggmError, Result};
use crate::optimizer::{default_init, fit_constrained, Constraints, FitResult, SolverSettings};
use crate::penalty::{cluster_distance_squared, connected_components, PenaltyConfig, SparseSymmetric};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct PathSettings<T> {
    pub solver: SolverSettings<T>,
    /// First positive value of the aggregation parameter.
    pub start: T,
    pub growth: T,
    /// Maximum relative Frobenius change between neighbouring solutions.
    pub refine_tol: T,
    pub max_depth: usize,
    pub max_rough_steps: usize,
    pub target: Target,
}

impl<T: Real> Default for PathSettings<T> {
    fn default() -> Self {
        Self {
            solver: SolverSettings::default(),
            start: T::lit(0.5),
            growth: T::lit(1.5),
            refine_tol: T::lit(0.01),
            max_depth: 12,
            max_rough_steps: 200,
            target: Target::Precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint<T: Real> {
    /// Aggregation parameter on the user scale.
    pub lambda_c: T,
    /// Coefficient that entered the objective, `p * kappa * lambda_c`.
    pub gamma_c: T,
    pub fit: FitResult<T>,
}

impl<T: Real> PathPoint<T> {
    pub fn k(&self) -> usize {
        self.fit.model.k()
    }

    pub fn model(&self) -> &PrecisionModel<T> {
        &self.fit.model
    }
}

/// Two groups of variables joining at `lambda_c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Merge {
    pub lambda_c: f64,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterpathSolution<T: Real> {
    pub points: Vec<PathPoint<T>>,
    pub merges: Vec<Merge>,
    pub kappa: T,
    pub eps_fusion: T,
    /// Smallest attainable number of clusters (components of the weight graph).
    pub min_clusters: usize,
}

impl<T: Real> ClusterpathSolution<T> {
    /// Point with the largest `lambda_c <= lambda`, if any.
    pub fn at_or_below(&self, lambda: T) -> Option<&PathPoint<T>> {
        self.points.iter().take_while(|pt| pt.lambda_c <= lambda).last()
    }
}

/// `((p - 1)^{1/2} sum_{j<k} w_jk)^{-1}`, or zero without weights.
pub fn kappa<T: Real>(w: &SparseSymmetric<T>) -> T {
    let total = w.total();
    let p = w.dim();
    if p < 2 || !(total > T::zero()) {
        return T::zero();
    }
    T::one() / (T::count(p - 1).sqrt() * total)
}

/// Penalty config with the aggregation coefficient rescaled from `lambda_c`.
pub fn scaled_config<T: Real>(base: &PenaltyConfig<T>, lambda_c: T) -> PenaltyConfig<T> {
    let gamma = T::count(base.weights.dim()) * kappa(&base.weights) * lambda_c;
    PenaltyConfig { lambda_c: gamma, ..base.clone() }
}

struct PathRunner<'a, T: Real> {
    s: &'a DMatrix<T>,
    base: &'a PenaltyConfig<T>,
    settings: &'a PathSettings<T>,
    eps_f: T,
    scale: T,
}

impl<T: Real> PathRunner<'_, T> {
    fn fit(&self, lambda_c: T, warm: &PrecisionModel<T>) -> Result<PathPoint<T>> {
        let gamma_c = self.scale * lambda_c;
        let cfg = PenaltyConfig { lambda_c: gamma_c, ..self.base.clone() };
        let fit = fit_constrained(self.s, &cfg, &self.settings.solver, self.eps_f, warm.clone(), &Constraints::default())
            .map_err(|e| CggmError::Path { lambda_c: lambda_c.as_f64(), source: Box::new(e) })?;
        Ok(PathPoint { lambda_c, gamma_c, fit })
    }

    /// Average of `a` and `b`, with `b` written in the finer partition of
    /// `a`, when it keeps every pair of clusters outside the fusion threshold.
    fn midway(&self, a: &PrecisionModel<T>, b: &PrecisionModel<T>) -> Option<PrecisionModel<T>> {
        if !a.assignment.refines(&b.assignment) {
            return None;
        }
        let k = a.k();
        let mut image = vec![0; k];
        for (j, &l) in a.assignment.labels().iter().enumerate() {
            image[l] = b.assignment.label(j);
        }
        let half = T::lit(0.5);
        let (pa, pb) = (&a.params, &b.params);
        let bv = DVector::from_fn(k, |i, _| (pa.b_at(i) + pb.b_at(image[i])) * half);
        let r = DMatrix::from_fn(k, k, |i, j| (pa.r_at(i, j) + pb.r_at(image[i], image[j])) * half);
        let params = BlockParameters::new(bv, r).ok()?;
        let model = PrecisionModel::new(a.assignment.clone(), params, a.target).ok()?;
        let sizes = model.assignment.sizes();
        let eps_sq = self.eps_f * self.eps_f;
        let apart = (0..k).all(|i| (i + 1..k).all(|j| cluster_distance_squared(i, j, &model.params, sizes) > eps_sq));
        (apart && model.check_pd().is_ok()).then_some(model)
    }

    /// Fits `target` from `prev`, inserting midpoints while the solution
    /// jumps by more than the refinement tolerance. A fit at `target` from an
    /// earlier start is reused when it still coarsens the latest point, and
    /// `hint` (the solution beyond `target`) helps start midpoints.
    fn advance(
        &self,
        prev: &PathPoint<T>,
        target: T,
        fitted: Option<PathPoint<T>>,
        hint: Option<&PrecisionModel<T>>,
        depth: usize,
        out: &mut Vec<PathPoint<T>>,
    ) -> Result<()> {
        let cand = match fitted {
            Some(c) => c,
            None => match hint.and_then(|h| self.midway(prev.model(), h)) {
                Some(start) => self.fit(target, &start)?,
                None => self.fit(target, prev.model())?,
            },
        };
        if depth >= self.settings.max_depth || relative_change(prev.model(), cand.model()) <= self.settings.refine_tol {
            out.push(cand);
            return Ok(());
        }
        let mid = (prev.lambda_c + target) * T::lit(0.5);
        self.advance(prev, mid, None, Some(cand.model()), depth + 1, out)?;
        let last = out.last().expect("advance pushes at least one point").clone();
        let reuse = last.fit.model.assignment.refines(&cand.fit.model.assignment);
        self.advance(&last, target, reuse.then_some(cand), None, depth + 1, out)
    }
}

/// `||A - B||_F / ||A||_F` on the dense matrices.
pub fn relative_change<T: Real>(a: &PrecisionModel<T>, b: &PrecisionModel<T>) -> T {
    let ma = a.materialize();
    let mb = b.materialize();
    let denom = ma.norm();
    if denom > T::zero() {
        (ma - mb).norm() / denom
    } else {
        (ma - mb).norm()
    }
}

/// Clusterpath for fixed sparsity parameter: a fit at `lambda_c = 0`, then
/// geometric growth until the minimum number of clusters is reached, with
/// midpoints inserted wherever neighbouring solutions differ too much.
pub fn compute_path<T: Real>(
    s: &DMatrix<T>,
    base: &PenaltyConfig<T>,
    settings: &PathSettings<T>,
    init: Option<&PrecisionModel<T>>,
) -> Result<ClusterpathSolution<T>> {
    let p = s.nrows();
    base.validate(p)?;
    let eps_f = settings.solver.resolve_fusion(s)?;
    let k = kappa(&base.weights);
    let runner = PathRunner { s, base, settings, eps_f, scale: T::count(p) * k };
    let min_clusters = connected_components(&base.weights);

    let start = match init {
        Some(m) => m.clone(),
        None => default_init(s, settings.target)?,
    };
    let mut points = vec![runner.fit(T::zero(), &start)?];
    let mut lambda = settings.start;
    let mut steps = 0;
    while points.last().expect("path is non-empty").k() > min_clusters && steps < settings.max_rough_steps {
        let prev = points.last().expect("path is non-empty").clone();
        runner.advance(&prev, lambda, None, None, 0, &mut points)?;
        lambda *= settings.growth;
        steps += 1;
    }
    let merges = merges_from_points(&points);
    Ok(ClusterpathSolution { points, merges, kappa: k, eps_fusion: eps_f, min_clusters })
}

/// Fit at one aggregation parameter, warm-started from `warm`.
pub fn fit_at<T: Real>(
    s: &DMatrix<T>,
    base: &PenaltyConfig<T>,
    solver: &SolverSettings<T>,
    eps_f: T,
    lambda_c: T,
    warm: &PrecisionModel<T>,
) -> Result<FitResult<T>> {
    let cfg = scaled_config(base, lambda_c);
    fit_constrained(s, &cfg, solver, eps_f, warm.clone(), &Constraints::default())
}

fn merges_from_points<T: Real>(points: &[PathPoint<T>]) -> Vec<Merge> {
    let mut merges = Vec::new();
    for pair in points.windows(2) {
        let (before, after) = (&pair[0].fit.model.assignment, &pair[1].fit.model.assignment);
        if before.k() == after.k() {
            continue;
        }
        // groups of the coarser partition, each listing the finer clusters inside it
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); after.k()];
        let mut seen = vec![false; before.k()];
        for j in 0..before.p() {
            let c = before.label(j);
            if !seen[c] {
                seen[c] = true;
                parts[after.label(j)].push(c);
            }
        }
        let members = |c: usize| before.members(c).collect::<Vec<_>>();
        for group in parts.into_iter().filter(|g| g.len() > 1) {
            let mut acc = members(group[0]);
            for &c in &group[1..] {
                let right = members(c);
                merges.push(Merge { lambda_c: pair[1].lambda_c.as_f64(), left: acc.clone(), right: right.clone() });
                acc.extend(right);
                acc.sort_unstable();
            }
        }
    }
    merges
}

/// Maximum likelihood under the clustering and zero pattern of `model`.
/// Entries of `R` with magnitude below `zero_eps` are held at exactly zero.
pub fn refit<T: Real>(
    model: &PrecisionModel<T>,
    s: &DMatrix<T>,
    settings: &SolverSettings<T>,
    zero_eps: T,
) -> Result<FitResult<T>> {
    let p = model.p();
    let pinned = model.zero_pattern(zero_eps);
    let mut start = model.clone();
    let kk = model.k();
    for i in 0..kk {
        for j in i..kk {
            if pinned[(i, j)] {
                start.params.set_r(i, j, T::zero());
            }
        }
    }
    for i in 0..kk {
        if model.assignment.size(i) == 1 {
            start.params.set_r(i, i, T::zero());
        }
    }
    if start.check_pd().is_err() {
        start = diagonal_start(model, s)?;
    }
    let cfg = PenaltyConfig::new(SparseSymmetric::new(p));
    let constraints = Constraints { no_fusion: true, pinned: Some(pinned) };
    fit_constrained(s, &cfg, settings, T::zero(), start, &constraints)
}

/// Solver settings suited to refitting: no fusion and a tight tolerance.
pub fn refit_settings<T: Real>(base: &SolverSettings<T>) -> SolverSettings<T> {
    SolverSettings { eps_conv: T::lit(1e-13), ..base.with_fixed_fusion(T::zero()) }
}

fn diagonal_start<T: Real>(model: &PrecisionModel<T>, s: &DMatrix<T>) -> Result<PrecisionModel<T>> {
    let kk = model.k();
    let mut b = nalgebra::DVector::zeros(kk);
    for i in 0..kk {
        let tr: T = model.assignment.members(i).fold(T::zero(), |acc, j| acc + s[(j, j)]);
        if !(tr > T::zero()) {
            return Err(CggmError::Degenerate(format!("cluster {i} has zero variance")));
        }
        b[i] = T::count(model.assignment.size(i)) / tr;
    }
    PrecisionModel::new(model.assignment.clone(), BlockParameters::new(b, DMatrix::zeros(kk, kk))?, model.target)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DendrogramLeaf {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DendrogramNode {
    pub id: usize,
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub members: Vec<usize>,
}

/// Binary merge tree. Leaves are variables `0..p`; internal nodes follow.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dendrogram {
    pub leaves: Vec<DendrogramLeaf>,
    pub nodes: Vec<DendrogramNode>,
    pub root: usize,
}

/// Merge tree of a path. Groups that never merge are joined under extra
/// nodes at the final `lambda_c`.
pub fn dendrogram<T: Real>(path: &ClusterpathSolution<T>, names: Option<&[String]>) -> Dendrogram {
    let p = path.points.first().map_or(0, |pt| pt.fit.model.p());
    let leaves = (0..p)
        .map(|j| DendrogramLeaf { id: j, name: names.and_then(|n| n.get(j).cloned()).unwrap_or_else(|| format!("V{}", j + 1)) })
        .collect();
    let mut node_of: Vec<usize> = (0..p).collect();
    let mut nodes: Vec<DendrogramNode> = Vec::new();
    let mut join = |left: &[usize], right: &[usize], height: f64, node_of: &mut Vec<usize>| {
        let id = p + nodes.len();
        let mut members: Vec<usize> = left.iter().chain(right).copied().collect();
        members.sort_unstable();
        nodes.push(DendrogramNode { id, left: node_of[left[0]], right: node_of[right[0]], height, members: members.clone() });
        for &j in &members {
            node_of[j] = id;
        }
    };
    for m in &path.merges {
        join(&m.left, &m.right, m.lambda_c, &mut node_of);
    }
    // remaining roots, by smallest member
    let mut roots: Vec<Vec<usize>> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for j in 0..p {
        if seen.insert(node_of[j]) {
            roots.push((j..p).filter(|&i| node_of[i] == node_of[j]).collect());
        }
    }
    if roots.len() > 1 {
        let top = path.points.last().map_or(0.0, |pt| pt.lambda_c.as_f64());
        let mut acc = roots[0].clone();
        for r in &roots[1..] {
            join(&acc, r, top, &mut node_of);
            acc.extend(r);
        }
    }
    let root = if p == 0 { 0 } else { node_of[0] };
    Dendrogram { leaves, nodes, root }
}

impl Dendrogram {
    fn height(&self, id: usize) -> f64 {
        if id < self.leaves.len() {
            0.0
        } else {
            self.nodes[id - self.leaves.len()].height
        }
    }

    /// Newick text with branch lengths equal to merge-height differences.
    pub fn to_newick(&self) -> String {
        if self.leaves.is_empty() {
            return ";".into();
        }
        let mut out = String::new();
        self.write_newick(self.root, &mut out);
        out.push(';');
        out
    }

    fn write_newick(&self, id: usize, out: &mut String) {
        if id < self.leaves.len() {
            out.push_str(&newick_label(&self.leaves[id].name));
            return;
        }
        let node = &self.nodes[id - self.leaves.len()];
        out.push('(');
        for (i, child) in [node.left, node.right].into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            self.write_newick(child, out);
            out.push_str(&format!(":{}", node.height - self.height(child)));
        }
        out.push(')');
    }
}

fn newick_label(name: &str) -> String {
    if name.chars().any(|c| "()[]':;, \t".contains(c)) {
        format!("'{}'", name.replace('\'', "''"))
    } else {
        name.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmodel::ClusterAssignment;
    use crate::optimizer::FusionThreshold;

    fn cov(p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 + 0.2 * i as f64 } else { 0.3 / (1.0 + (i as f64 - j as f64).abs()) })
    }

    #[test]
    fn kappa_rescaling_identity() {
        let mut w = SparseSymmetric::new(3);
        w.insert(0, 1, 0.5).unwrap();
        w.insert(1, 2, 0.25).unwrap();
        assert!((kappa(&w) - 1.0 / (2f64.sqrt() * 0.75)).abs() < 1e-15);
        let mut doubled = SparseSymmetric::new(3);
        doubled.insert(0, 1, 1.0).unwrap();
        doubled.insert(1, 2, 0.5).unwrap();
        // gamma * w is unchanged when w doubles
        let g1 = scaled_config(&PenaltyConfig::new(w), 1.0).lambda_c * 0.5;
        let g2 = scaled_config(&PenaltyConfig::new(doubled), 1.0).lambda_c * 1.0;
        assert!((g1 - g2).abs() < 1e-15);
    }

    #[test]
    fn two_variable_path_has_one_merge() {
        let s = cov(2);
        let mut w = SparseSymmetric::new(2);
        w.insert(0, 1, 1.0).unwrap();
        let path = compute_path(&s, &PenaltyConfig::new(w), &PathSettings::default(), None).unwrap();
        assert_eq!(path.points.last().unwrap().k(), 1);
        assert_eq!(path.merges.len(), 1);
        let d = dendrogram(&path, None);
        assert_eq!(d.nodes.len(), 1);
        assert_eq!(d.nodes[0].height, path.merges[0].lambda_c);
        assert!(d.to_newick().starts_with("(V1:"));
    }

    #[test]
    fn path_is_hierarchical_and_smooth() {
        let s = cov(6);
        let w = crate::penalty::build_weights(&s, 2, 1.0).unwrap();
        let path = compute_path(&s, &PenaltyConfig::new(w), &PathSettings::default(), None).unwrap();
        assert_eq!(path.points.last().unwrap().k(), 1);
        for pair in path.points.windows(2) {
            assert!(pair[1].k() <= pair[0].k());
            assert!(pair[0].fit.model.assignment.refines(&pair[1].fit.model.assignment));
            assert!(relative_change(pair[0].model(), pair[1].model()) <= 0.01);
            assert!(pair[1].lambda_c > pair[0].lambda_c);
        }
        let d = dendrogram(&path, None);
        assert_eq!(d.nodes.len(), 5);
        for node in &d.nodes {
            assert!(node.height >= d.height(node.left) && node.height >= d.height(node.right));
        }
    }

    #[test]
    fn forest_is_joined_under_a_root() {
        let s = cov(4);
        let mut w = SparseSymmetric::new(4);
        w.insert(0, 1, 1.0).unwrap();
        w.insert(2, 3, 1.0).unwrap();
        let settings = PathSettings { solver: SolverSettings { fusion: FusionThreshold::Fixed(1e-4), ..Default::default() }, ..Default::default() };
        let path = compute_path(&s, &PenaltyConfig::new(w), &settings, None).unwrap();
        assert_eq!(path.min_clusters, 2);
        assert!(path.points.last().unwrap().k() <= 2);
        let d = dendrogram(&path, Some(&["a".into(), "b c".into(), "d".into(), "e".into()]));
        assert_eq!(d.nodes.len(), 3);
        assert!(d.to_newick().contains("'b c'"));
    }

    #[test]
    fn refit_without_constraints_is_mle() {
        let s = cov(4);
        let inv = s.clone().try_inverse().unwrap();
        let model = PrecisionModel::singletons_from(&inv, Target::Precision).unwrap();
        let res = refit(&model, &s, &refit_settings(&SolverSettings::default()), 5e-3).unwrap();
        assert!((res.model.materialize() - inv).norm() < 1e-6);
    }

    #[test]
    fn refit_keeps_pinned_zeros_and_clusters() {
        let s = cov(5);
        let labels = ClusterAssignment::new(vec![0, 0, 1, 1, 2]).unwrap();
        let b = nalgebra::DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let r = DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.1, 0.0, 0.1, 0.1, 0.1, 0.1, 0.0]);
        let model = PrecisionModel::new(labels.clone(), BlockParameters::new(b, r).unwrap(), Target::Precision).unwrap();
        let res = refit(&model, &s, &refit_settings(&SolverSettings::default()), 5e-3).unwrap();
        assert_eq!(res.model.assignment, labels);
        assert_eq!(res.model.params.r_at(0, 1), 0.0);
        let again = refit(&res.model, &s, &refit_settings(&SolverSettings::default()), 5e-3).unwrap();
        assert!((again.model.materialize() - res.model.materialize()).norm() < 1e-8);
    }
}
