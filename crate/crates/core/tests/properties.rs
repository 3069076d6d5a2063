use cggm::clusterpath::{compute_path, PathSettings};
use cggm::io::ModelDocument;
use cggm::modelsel::{fold_assignment, sample_covariance};
use cggm::optimizer::fuse;
use cggm::penalty::build_weights;
use cggm::simbench::{ari, generate, Design, DesignSpec};
use cggm::{BlockParameters, ClusterAssignment, Model, Penalty, PrecisionModel, Target};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn labels(max_p: usize, max_k: usize) -> impl Strategy<Value = Vec<usize>> {
    (1..=max_p).prop_flat_map(move |p| prop::collection::vec(0..max_k, p))
}

/// Block model with a diagonally dominant `R*`, hence positive definite.
fn block_model(max_p: usize) -> impl Strategy<Value = Model> {
    labels(max_p, 5).prop_flat_map(|ids| {
        let assignment = ClusterAssignment::canonical(&ids).unwrap();
        let k = assignment.k();
        (Just(assignment), prop::collection::vec(-0.3..0.3f64, k * k), prop::collection::vec(0.5..2.0f64, k))
    })
    .prop_map(|(assignment, raw, a)| {
        let k = assignment.k();
        let mut r = DMatrix::from_fn(k, k, |i, j| raw[i.min(j) * k + i.max(j)] / k as f64);
        for i in 0..k {
            if assignment.size(i) == 1 {
                r[(i, i)] = 0.0;
            }
        }
        let b = DVector::from_fn(k, |i, _| r[(i, i)] + a[i] + 1.0);
        PrecisionModel::new(assignment, BlockParameters::new(b, r).unwrap(), Target::Precision).unwrap()
    })
}

proptest! {
    #[test]
    fn ari_is_symmetric_and_label_invariant(a in labels(30, 6), seed in 0..1000usize) {
        let b: Vec<usize> = a.iter().enumerate().map(|(j, &l)| (l + j * seed) % 4).collect();
        prop_assert!((ari(&a, &b) - ari(&b, &a)).abs() < 1e-12);
        let renamed: Vec<usize> = a.iter().map(|&l| 17 - l).collect();
        prop_assert!((ari(&renamed, &b) - ari(&a, &b)).abs() < 1e-12);
        prop_assert!((ari(&a, &a) - 1.0).abs() < 1e-12);
        prop_assert!(ari(&a, &b) <= 1.0 + 1e-12);
    }

    #[test]
    fn folds_are_balanced(n in 2..200usize, folds in 2..10usize, seed in any::<u64>()) {
        prop_assume!(n >= folds);
        let f = fold_assignment(n, folds, seed).unwrap();
        prop_assert_eq!(f.len(), n);
        let mut counts = vec![0usize; folds];
        for &g in &f {
            counts[g] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(f, fold_assignment(n, folds, seed).unwrap());
    }

    #[test]
    fn block_inverse_is_an_involution(model in block_model(25)) {
        let back = model.block_inverse().unwrap().block_inverse().unwrap();
        let (a, b) = (model.materialize(), back.materialize());
        prop_assert!((&a - &b).norm() <= 1e-9 * a.norm());
        let product = model.materialize() * model.block_inverse().unwrap().materialize();
        prop_assert!((product - DMatrix::identity(model.p(), model.p())).amax() < 1e-9);
    }

    #[test]
    fn model_documents_round_trip_exactly(model in block_model(20)) {
        let text = cggm::io::to_json(&ModelDocument::new(&model, None)).unwrap();
        let doc: ModelDocument = serde_json::from_str(&text).unwrap();
        let back = doc.to_model().unwrap();
        prop_assert_eq!(back.assignment.labels(), model.assignment.labels());
        prop_assert_eq!(back.params.b(), model.params.b());
        prop_assert_eq!(back.params.r(), model.params.r());
        prop_assert_eq!(cggm::io::to_json(&ModelDocument::new(&back, None)).unwrap(), text);
    }

    #[test]
    fn fusing_identical_clusters_keeps_theta(model in block_model(12)) {
        prop_assume!(model.k() >= 2);
        // split the first cluster's parameters onto a copy of the second
        let mut twin = model.clone();
        let k = model.k();
        twin.params.set_b(1, model.params.b_at(0));
        for m in 2..k {
            twin.params.set_r(1, m, model.params.r_at(0, m));
        }
        let within = model.params.r_at(0, 0);
        let fill = if model.assignment.size(0) > 1 { within } else { 0.3 };
        twin.params.set_r(0, 0, fill);
        twin.params.set_r(0, 1, fill);
        twin.params.set_r(1, 1, if model.assignment.size(1) > 1 { fill } else { 0.0 });
        if model.assignment.size(0) == 1 {
            twin.params.set_r(0, 0, 0.0);
        }
        prop_assume!(twin.check_pd().is_ok());
        let d = cggm::penalty::cluster_distance(0, 1, &twin.params, &twin.assignment);
        prop_assume!(d < 1e-12);
        let fused = fuse(0, 1, &twin).unwrap();
        prop_assert_eq!(fused.k(), k - 1);
        prop_assert!((fused.materialize() - twin.materialize()).amax() < 1e-12);
    }
}

#[test]
fn path_partitions_are_nested() {
    for (i, design) in [Design::Chain, Design::Unbalanced, Design::DiagBalanced].into_iter().enumerate() {
        let spec = DesignSpec { p: 10, n: 80, ..DesignSpec::new(design, 11 + i as u64) };
        let sim = generate(&spec).unwrap();
        let s = sample_covariance(&sim.data).unwrap();
        let cfg = Penalty::new(build_weights(&s, 3, 1.0).unwrap()).with_lambdas(0.0, 0.01);
        let path = compute_path(&s, &cfg, &PathSettings::default(), None).unwrap();
        assert_eq!(path.points[0].lambda_c, 0.0);
        assert_eq!(path.points.last().unwrap().k(), path.min_clusters);
        for pair in path.points.windows(2) {
            assert!(pair[0].lambda_c < pair[1].lambda_c);
            assert!(pair[0].model().assignment.refines(&pair[1].model().assignment));
        }
        let merged: usize = path.merges.len();
        assert_eq!(merged, 10 - path.min_clusters);
    }
}
