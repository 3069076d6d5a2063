//! Simulation designs, sampling and evaluation metrics.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockmodel::{PrecisionModel, Target};
use crate::error::{CggmError, Result};
use crate::modelsel::{select, CvPlan, CvSettings};

const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Random,
    Chain,
    Unbalanced,
    Unstructured,
    DiagBalanced,
    DiagUnbalanced,
    BlockdiagBalanced,
    BlockdiagUnbalanced,
    ApproxVariant,
}

impl Design {
    pub const ALL: [Design; 9] = [
        Design::Random,
        Design::Chain,
        Design::Unbalanced,
        Design::Unstructured,
        Design::DiagBalanced,
        Design::DiagUnbalanced,
        Design::BlockdiagBalanced,
        Design::BlockdiagUnbalanced,
        Design::ApproxVariant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::Random => "random",
            Design::Chain => "chain",
            Design::Unbalanced => "unbalanced",
            Design::Unstructured => "unstructured",
            Design::DiagBalanced => "diag_balanced",
            Design::DiagUnbalanced => "diag_unbalanced",
            Design::BlockdiagBalanced => "blockdiag_balanced",
            Design::BlockdiagUnbalanced => "blockdiag_unbalanced",
            Design::ApproxVariant => "approx_variant",
        }
    }

    fn balanced(self) -> bool {
        !matches!(self, Design::Unbalanced | Design::DiagUnbalanced | Design::BlockdiagUnbalanced)
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = CggmError;

    fn from_str(s: &str) -> Result<Self> {
        Design::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| CggmError::InvalidInput(format!("unknown design '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub design: Design,
    pub p: usize,
    pub n: usize,
    pub k: usize,
    pub edge_prob: f64,
    pub seed: u64,
    /// Draw within-cluster values from [0.4, 0.6] and between-cluster values from [0.2, 0.3].
    pub approx: bool,
    /// Whether the structure is placed in the precision or the covariance matrix.
    pub target: Target,
}

impl DesignSpec {
    pub fn new(design: Design, seed: u64) -> Self {
        Self {
            design,
            p: 15,
            n: 120,
            k: 3,
            edge_prob: 0.1,
            seed,
            approx: design == Design::ApproxVariant,
            target: Target::Precision,
        }
    }

    pub fn with_target(mut self, target: Target) -> Self {
        self.target = target;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.p {
            return Err(CggmError::InvalidInput(format!("need 1 <= K <= p, got K = {}, p = {}", self.k, self.p)));
        }
        if self.n < 2 {
            return Err(CggmError::InvalidInput("need at least two observations".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(CggmError::InvalidInput(format!("edge probability {} outside [0, 1]", self.edge_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    /// n x p observations.
    pub data: DMatrix<f64>,
    /// Structured matrix (precision or covariance, depending on the target).
    pub truth: DMatrix<f64>,
    pub labels: Vec<usize>,
}

/// Cluster sizes: as equal as possible, or proportional to 3, 5, 7, ... when unbalanced.
pub fn cluster_sizes(p: usize, k: usize, balanced: bool) -> Vec<usize> {
    if balanced {
        return (0..k).map(|c| p / k + usize::from(c < p % k)).collect();
    }
    let weights: Vec<usize> = (0..k).map(|c| 2 * c + 3).collect();
    let total: usize = weights.iter().sum();
    let mut sizes: Vec<usize> = weights.iter().map(|w| ((p * w) as f64 / total as f64).round().max(1.0) as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let last = sizes.last_mut().expect("k >= 1");
    *last = (*last + p).saturating_sub(assigned).max(1);
    sizes
}

fn labels_from_sizes(sizes: &[usize]) -> Vec<usize> {
    sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect()
}

fn is_pd(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

/// Structured matrix and true labels, resampled until positive definite.
pub fn truth_matrix(spec: &DesignSpec, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, Vec<usize>)> {
    spec.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        let (m, labels) = draw_structure(spec, rng);
        if is_pd(&m) {
            return Ok((m, labels));
        }
    }
    Err(CggmError::Degenerate(format!("no positive definite {} matrix after {MAX_ATTEMPTS} draws", spec.design)))
}

fn draw_structure(spec: &DesignSpec, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Vec<usize>) {
    let p = spec.p;
    let within = |rng: &mut ChaCha8Rng| if spec.approx { rng.random_range(0.4..=0.6) } else { 0.5 };
    let between = |rng: &mut ChaCha8Rng| if spec.approx { rng.random_range(0.2..=0.3) } else { 0.25 };
    let mut m = DMatrix::<f64>::identity(p, p);
    let set = |m: &mut DMatrix<f64>, i: usize, j: usize, v: f64| {
        m[(i, j)] = v;
        m[(j, i)] = v;
    };
    match spec.design {
        Design::Unstructured => {
            for i in 0..p {
                for j in i + 1..p {
                    if rng.random_bool(spec.edge_prob) {
                        let v = between(rng);
                        set(&mut m, i, j, v);
                    }
                }
            }
            (m, (0..p).collect())
        }
        Design::DiagBalanced | Design::DiagUnbalanced => {
            let labels = labels_from_sizes(&cluster_sizes(p, spec.k, spec.design.balanced()));
            for i in 0..p {
                m[(i, i)] = (labels[i] + 1) as f64;
                for j in i + 1..p {
                    set(&mut m, i, j, 0.5);
                }
            }
            (m, labels)
        }
        Design::BlockdiagBalanced | Design::BlockdiagUnbalanced => {
            let labels = labels_from_sizes(&cluster_sizes(p, spec.k, spec.design.balanced()));
            for i in 0..p {
                for j in i + 1..p {
                    if labels[i] == labels[j] {
                        set(&mut m, i, j, 0.5);
                    } else if rng.random_bool(spec.edge_prob) {
                        set(&mut m, i, j, 0.25);
                    }
                }
            }
            (m, labels)
        }
        Design::Random | Design::Chain | Design::Unbalanced | Design::ApproxVariant => {
            let labels = labels_from_sizes(&cluster_sizes(p, spec.k, spec.design.balanced()));
            let linked = |a: usize, b: usize, pair: Option<(usize, usize)>| match pair {
                Some(pr) => (a.min(b), a.max(b)) == pr,
                None => a.abs_diff(b) == 1,
            };
            let pair = (spec.design == Design::Random && spec.k > 1).then(|| {
                let pairs: Vec<(usize, usize)> = (0..spec.k).flat_map(|a| (a + 1..spec.k).map(move |b| (a, b))).collect();
                pairs[rng.random_range(0..pairs.len())]
            });
            for i in 0..p {
                for j in i + 1..p {
                    let (a, b) = (labels[i], labels[j]);
                    if a == b {
                        let v = within(rng);
                        set(&mut m, i, j, v);
                    } else if linked(a, b, pair) {
                        let v = between(rng);
                        set(&mut m, i, j, v);
                    }
                }
            }
            (m, labels)
        }
    }
}

/// Draws the design and `n` mean-zero normal observations.
pub fn generate(spec: &DesignSpec) -> Result<Simulated> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (truth, labels) = truth_matrix(spec, &mut rng)?;
    let sigma = match spec.target {
        Target::Precision => truth.clone().try_inverse().ok_or_else(|| CggmError::Degenerate("singular precision".into()))?,
        Target::Covariance => truth.clone(),
    };
    let chol = sigma
        .cholesky()
        .ok_or_else(|| CggmError::NotPositiveDefinite("covariance of the design".into()))?;
    let z = DMatrix::<f64>::from_fn(spec.n, spec.p, |_, _| rng.sample(StandardNormal));
    let data = z * chol.l().transpose();
    Ok(Simulated { data, truth, labels })
}

/// Adjusted Rand index of two labelings of the same items.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "label vectors differ in length");
    let n = a.len();
    let relabel = |v: &[usize]| -> (Vec<usize>, usize) {
        let mut map = std::collections::HashMap::new();
        let out = v.iter().map(|&x| { let next = map.len(); *map.entry(x).or_insert(next) }).collect();
        (out, map.len())
    };
    let (ra, ka) = relabel(a);
    let (rb, kb) = relabel(b);
    let mut table = vec![0usize; ka * kb];
    for (&x, &y) in ra.iter().zip(&rb) {
        table[x * kb + y] += 1;
    }
    let pairs = |c: usize| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let rows: f64 = (0..ka).map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = pairs(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return if ka == kb && index == rows { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frobenius: f64,
    pub k_hat: Option<usize>,
    pub ari: Option<f64>,
    /// Undefined when the truth has no zero off-diagonal entries.
    pub fpr: Option<f64>,
    /// Undefined when the truth has no nonzero off-diagonal entries.
    pub fnr: Option<f64>,
}

/// Metrics for a dense estimate, treating entries with `|x| <= zero_eps` as zero.
pub fn evaluate_dense(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, zero_eps: f64) -> Result<EvalReport> {
    if estimate.shape() != truth.shape() {
        return Err(CggmError::Dimension(format!("estimate {:?} vs truth {:?}", estimate.shape(), truth.shape())));
    }
    let p = truth.nrows();
    let (mut zeros, mut false_pos, mut nonzeros, mut false_neg) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..p {
        for j in i + 1..p {
            let est_zero = estimate[(i, j)].abs() <= zero_eps;
            if truth[(i, j)] == 0.0 {
                zeros += 1;
                false_pos += usize::from(!est_zero);
            } else {
                nonzeros += 1;
                false_neg += usize::from(est_zero);
            }
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(EvalReport {
        frobenius: (estimate - truth).norm(),
        k_hat: None,
        ari: None,
        fpr: rate(false_pos, zeros),
        fnr: rate(false_neg, nonzeros),
    })
}

/// Metrics for a fitted model. Entries are zero if `R` entries fall within
/// `zero_eps` (use 0 for refits, whose zeros are exact).
pub fn evaluate(estimate: &PrecisionModel<f64>, truth: &DMatrix<f64>, true_labels: &[usize], zero_eps: f64) -> Result<EvalReport> {
    if true_labels.len() != estimate.p() {
        return Err(CggmError::Dimension(format!("{} labels for {} variables", true_labels.len(), estimate.p())));
    }
    let mut report = evaluate_dense(&estimate.thresholded(zero_eps), truth, 0.0)?;
    report.frobenius = (estimate.materialize() - truth).norm();
    report.k_hat = Some(estimate.k());
    report.ari = Some(ari(estimate.assignment.labels(), true_labels));
    Ok(report)
}

/// Independent 64-bit seed for a (base, stream, index) triple.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    fn mix(v: u64) -> u64 {
        let mut x = v.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    mix(base ^ mix(stream ^ mix(index)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub design: String,
    pub replication: usize,
    pub seed: u64,
    pub method: String,
    pub frobenius: Option<f64>,
    pub k_hat: Option<usize>,
    pub ari: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub error: Option<String>,
}

impl StudyRow {
    fn from_report(design: Design, replication: usize, seed: u64, method: &str, r: EvalReport) -> Self {
        Self {
            design: design.name().into(),
            replication,
            seed,
            method: method.into(),
            frobenius: Some(r.frobenius),
            k_hat: r.k_hat,
            ari: r.ari,
            fpr: r.fpr,
            fnr: r.fnr,
            error: None,
        }
    }

    fn failed(design: Design, replication: usize, seed: u64, err: &CggmError) -> Self {
        Self {
            design: design.name().into(),
            replication,
            seed,
            method: "all".into(),
            frobenius: None,
            k_hat: None,
            ari: None,
            fpr: None,
            fnr: None,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub designs: Vec<DesignSpec>,
    pub replications: usize,
    pub plan: CvPlan,
    pub settings: CvSettings<f64>,
}

/// Method names produced by [`replicate`] for each target.
pub fn method_names(target: Target) -> &'static [&'static str] {
    match target {
        Target::Precision => &["cggm_raw", "cggm_refit", "sample_inverse"],
        Target::Covariance => &["cggm_sigma", "cggm_theta_inverse", "sample_covariance"],
    }
}

/// One replication of one design: data, selection and all method reports.
pub fn replicate(spec: &DesignSpec, plan: &CvPlan, settings: &CvSettings<f64>) -> Result<Vec<(String, EvalReport)>> {
    let sim = generate(spec)?;
    let eps = settings.penalty_eps;
    let s = crate::modelsel::sample_covariance(&sim.data)?;
    match spec.target {
        Target::Precision => {
            let cv = select(&sim.data, &CvPlan { target: Target::Precision, ..plan.clone() }, settings)?;
            let baseline = crate::penalty::reference_matrix(&s)?.0;
            Ok(vec![
                ("cggm_raw".into(), evaluate(&cv.raw, &sim.truth, &sim.labels, eps)?),
                ("cggm_refit".into(), evaluate(&cv.refit, &sim.truth, &sim.labels, 0.0)?),
                ("sample_inverse".into(), evaluate_dense(&baseline, &sim.truth, 0.0)?),
            ])
        }
        Target::Covariance => {
            let sigma = select(&sim.data, &CvPlan { target: Target::Covariance, ..plan.clone() }, settings)?;
            let theta = select(&sim.data, &CvPlan { target: Target::Precision, ..plan.clone() }, settings)?;
            let inverted = theta.refit.block_inverse()?;
            Ok(vec![
                ("cggm_sigma".into(), evaluate(&sigma.refit, &sim.truth, &sim.labels, 0.0)?),
                ("cggm_theta_inverse".into(), evaluate(&inverted, &sim.truth, &sim.labels, 0.0)?),
                ("sample_covariance".into(), evaluate_dense(&s, &sim.truth, 0.0)?),
            ])
        }
    }
}

/// Runs every replication of every design. Replication seeds derive from
/// each design's seed, so results do not depend on scheduling.
pub fn run_study(config: &StudyConfig) -> Vec<StudyRow> {
    let jobs: Vec<(usize, usize)> = (0..config.designs.len()).flat_map(|d| (0..config.replications).map(move |r| (d, r))).collect();
    let results: Vec<Vec<StudyRow>> = jobs
        .par_iter()
        .map(|&(d, r)| {
            let base = &config.designs[d];
            let seed = derive_seed(base.seed, base.design as u64, r as u64);
            let spec = DesignSpec { seed, ..base.clone() };
            let plan = CvPlan { seed: derive_seed(seed, 1, 0), ..config.plan.clone() };
            match replicate(&spec, &plan, &config.settings) {
                Ok(reports) => reports
                    .into_iter()
                    .map(|(m, rep)| StudyRow::from_report(spec.design, r, seed, &m, rep))
                    .collect(),
                Err(e) => vec![StudyRow::failed(spec.design, r, seed, &e)],
            }
        })
        .collect();
    results.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
}

impl MetricSummary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { count: values.len(), mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub design: String,
    pub method: String,
    pub failures: usize,
    pub frobenius: Option<MetricSummary>,
    pub k_hat: Option<MetricSummary>,
    pub ari: Option<MetricSummary>,
    pub fpr: Option<MetricSummary>,
    pub fnr: Option<MetricSummary>,
}

/// Means and standard deviations per design and method, in first-seen order.
pub fn summarize(rows: &[StudyRow]) -> Vec<MethodSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.design.clone(), r.method.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(design, method)| {
            let group: Vec<&StudyRow> = rows.iter().filter(|r| r.design == design && r.method == method).collect();
            let collect = |f: &dyn Fn(&StudyRow) -> Option<f64>| MetricSummary::of(&group.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                failures: group.iter().filter(|r| r.error.is_some()).count(),
                frobenius: collect(&|r| r.frobenius),
                k_hat: collect(&|r| r.k_hat.map(|k| k as f64)),
                ari: collect(&|r| r.ari),
                fpr: collect(&|r| r.fpr),
                fnr: collect(&|r| r.fnr),
                design,
                method,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_truth_matches_layout() {
        let sim = generate(&DesignSpec::new(Design::Chain, 7)).unwrap();
        let t = &sim.truth;
        assert_eq!(sim.labels, labels_from_sizes(&[5, 5, 5]));
        for i in 0..15usize {
            for j in 0..15usize {
                let (a, b) = (i / 5, j / 5);
                let want = if i == j { 1.0 } else if a == b { 0.5 } else if a.abs_diff(b) == 1 { 0.25 } else { 0.0 };
                assert_eq!(t[(i, j)], want, "entry ({i}, {j})");
            }
        }
        assert_eq!(sim.data.shape(), (120, 15));
    }

    #[test]
    fn unbalanced_and_diag_layouts() {
        assert_eq!(cluster_sizes(15, 3, false), vec![3, 5, 7]);
        assert_eq!(cluster_sizes(16, 3, true), vec![6, 5, 5]);
        let sim = generate(&DesignSpec::new(Design::DiagBalanced, 1)).unwrap();
        let diag: Vec<f64> = sim.truth.diagonal().iter().copied().collect();
        assert_eq!(diag, [[1.0; 5], [2.0; 5], [3.0; 5]].concat());
        assert!(sim.truth.iter().all(|&v| v == 0.5 || v >= 1.0));
    }

    #[test]
    fn random_design_links_one_pair() {
        for seed in 0..5 {
            let sim = generate(&DesignSpec::new(Design::Random, seed)).unwrap();
            let linked: Vec<(usize, usize)> = (0..3)
                .flat_map(|a| (a + 1..3).map(move |b| (a, b)))
                .filter(|&(a, b)| sim.truth[(a * 5, b * 5)] == 0.25)
                .collect();
            assert_eq!(linked.len(), 1);
        }
    }

    #[test]
    fn approx_values_in_ranges() {
        let sim = generate(&DesignSpec::new(Design::ApproxVariant, 3)).unwrap();
        for i in 0..15 {
            for j in i + 1..15 {
                let v = sim.truth[(i, j)];
                match (i / 5).abs_diff(j / 5) {
                    0 => assert!((0.4..=0.6).contains(&v)),
                    1 => assert!((0.2..=0.3).contains(&v)),
                    _ => assert_eq!(v, 0.0),
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DesignSpec::new(Design::Unstructured, 11);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&DesignSpec::new(Design::Unstructured, 12)).unwrap();
        assert_ne!(generate(&spec).unwrap().data, other.data);
    }

    #[test]
    fn covariance_target_samples_sigma() {
        let spec = DesignSpec { n: 20000, ..DesignSpec::new(Design::Chain, 5).with_target(Target::Covariance) };
        let sim = generate(&spec).unwrap();
        let s = sim.data.transpose() * &sim.data / spec.n as f64;
        assert!((s - &sim.truth).norm() / sim.truth.norm() < 0.05);
    }

    fn brute_ari(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                both += f64::from(u8::from(sa && sb));
                only_a += f64::from(u8::from(sa));
                only_b += f64::from(u8::from(sb));
                pairs += 1.0;
            }
        }
        let expected = only_a * only_b / pairs;
        (both - expected) / (0.5 * (only_a + only_b) - expected)
    }

    #[test]
    fn ari_examples() {
        let truth = labels_from_sizes(&[5, 5, 5]);
        assert_eq!(ari(&truth, &truth), 1.0);
        assert_eq!(ari(&[0; 15], &truth), 0.0);
        let permuted: Vec<usize> = truth.iter().map(|&c| 2 - c).collect();
        assert_eq!(ari(&permuted, &truth), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
        assert!((ari(&a, &b) - brute_ari(&a, &b)).abs() < 1e-12);
        assert!((ari(&a, &b) - ari(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn perfect_estimate_scores_perfectly() {
        let sim = generate(&DesignSpec::new(Design::Chain, 2)).unwrap();
        let model = PrecisionModel::singletons_from(&sim.truth, Target::Precision).unwrap();
        let r = evaluate_dense(&model.materialize(), &sim.truth, 0.0).unwrap();
        assert_eq!((r.frobenius, r.fpr, r.fnr), (0.0, Some(0.0), Some(0.0)));
    }

    #[test]
    fn rates_on_constructed_confusion() {
        let truth = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let est = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.2, 0.0, 1.0, 0.0, 0.2, 0.0, 1.0]);
        let r = evaluate_dense(&est, &truth, 0.0).unwrap();
        assert_eq!(r.fnr, Some(1.0));
        assert_eq!(r.fpr, Some(0.5));
        let specificity = 1.0 / 2.0;
        assert_eq!(r.fpr.unwrap() + specificity, 1.0);
    }

    #[test]
    fn seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..100).map(|i| derive_seed(1, 0, i)).collect();
        assert_eq!(seeds.len(), 100);
    }
}
