use std::collections::BTreeSet;

use groklab::domain::{enumerate_samples, split, Fraction, Sample, TaskSpec};
use groklab::efftheory::{analytic_flow, init_uniform, linear_flow};
use groklab::lintheory::{build_a, constraint_row, hessian, nullity, RANK_TOL};
use groklab::parallelogram::{
    augment, full_permissible_set, ideal_closure, nonabelian_closure, permissible_set, rqi, ParallelogramSet,
    Representation, DEFAULT_DELTA,
};
use groklab::rng::{self, derive_seed};
use groklab::trainer::{Model, ModelConfig, TaskMode};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

fn subset(all: &[Sample], mask: u64, salt: u64) -> Vec<Sample> {
    let mut g = rng::rng(derive_seed(mask, salt));
    all.iter().copied().filter(|_| rng::unit(&mut g) < 0.5).collect()
}

fn pairs(d: &[Sample]) -> BTreeSet<(usize, usize)> {
    d.iter().map(|s| (s.i, s.j)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_all_samples(p in 2usize..12, f in 0.05f64..1.0, seed in any::<u64>()) {
        let spec = TaskSpec::addition(p).unwrap();
        let Ok(sp) = split(&spec, Fraction::float(f).unwrap(), seed) else { return Ok(()) };
        let train = pairs(&sp.train);
        let valid = pairs(&sp.valid);
        prop_assert!(train.is_disjoint(&valid));
        prop_assert_eq!(train.len() + valid.len(), spec.num_samples());
        prop_assert_eq!(sp.train.len(), Fraction::float(f).unwrap().count_of(spec.num_samples()));
        prop_assert_eq!(&split(&spec, Fraction::float(f).unwrap(), seed).unwrap(), &sp);
    }

    #[test]
    fn augment_is_extensive_and_monotone(p in 3usize..9, seed in any::<u64>()) {
        let spec = TaskSpec::addition(p).unwrap();
        let all = enumerate_samples(&spec);
        let d = subset(&all, seed, 1);
        let p0 = full_permissible_set(&spec);
        let mut small = ParallelogramSet::empty(spec);
        let mut g = rng::rng(derive_seed(seed, 2));
        for q in &p0 {
            if rng::unit(&mut g) < 0.3 {
                small.insert(*q);
            }
        }
        let lo = pairs(&augment(&d, &small));
        let hi = pairs(&augment(&d, &p0));
        prop_assert!(pairs(&d).is_subset(&lo));
        prop_assert!(lo.is_subset(&hi));
    }

    #[test]
    fn closure_is_monotone_and_bracketed(p in 3usize..9, seed in any::<u64>()) {
        let spec = TaskSpec::addition(p).unwrap();
        let all = enumerate_samples(&spec);
        let big = subset(&all, seed, 3);
        let small: Vec<Sample> = big.iter().copied().step_by(2).collect();
        let c_small = ideal_closure(&small, &spec).unwrap();
        let c_big = ideal_closure(&big, &spec).unwrap();
        prop_assert!(c_small.is_subset(&c_big));
        prop_assert!(permissible_set(&big, &spec).is_subset(&c_big));
        prop_assert!(c_big.is_subset(&full_permissible_set(&spec)));
    }

    #[test]
    fn nonabelian_closure_is_monotone(seed in any::<u64>()) {
        let spec = TaskSpec::s3();
        let all = enumerate_samples(&spec);
        let big = subset(&all, seed, 4);
        let small: Vec<Sample> = big.iter().copied().step_by(2).collect();
        let c_small = nonabelian_closure(&small, &spec).unwrap();
        let c_big = nonabelian_closure(&big, &spec).unwrap();
        prop_assert!(c_small.is_subset(&c_big));
        prop_assert!(permissible_set(&big, &spec).is_subset(&c_big));
    }

    #[test]
    fn nullity_never_grows_with_data(p in 3usize..10, seed in any::<u64>()) {
        let spec = TaskSpec::addition(p).unwrap();
        let all = enumerate_samples(&spec);
        let big = subset(&all, seed, 5);
        let small: Vec<Sample> = big.iter().copied().step_by(2).collect();
        let n_small = nullity(&build_a(&permissible_set(&small, &spec), p), RANK_TOL);
        let n_big = nullity(&build_a(&permissible_set(&big, &spec), p), RANK_TOL);
        prop_assert!(n_big <= n_small);
        prop_assert!(n_big >= 2);
    }

    #[test]
    fn rqi_ignores_translation(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let spec = TaskSpec::addition(8).unwrap();
        let mut g = rng::rng(seed);
        let values: Vec<f64> = (0..8).map(|k| k as f64 * 0.5 + 0.003 * rng::standard_normal(&mut g)).collect();
        let moved: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let a = rqi(&Representation::scalars(&values).unwrap(), &spec, DEFAULT_DELTA).unwrap();
        let b = rqi(&Representation::scalars(&moved).unwrap(), &spec, DEFAULT_DELTA).unwrap();
        // a mismatch sitting within rounding of delta may flip
        let r = Representation::scalars(&values).unwrap();
        let borderline = full_permissible_set(&spec)
            .iter()
            .any(|q| (r.mismatch(q, Default::default()) - DEFAULT_DELTA).abs() < 1e-9);
        prop_assert!(a == b || borderline);
    }

    #[test]
    fn rqi_of_any_linear_representation_is_one(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        prop_assume!(a.abs() > 1e-3);
        let r = Representation::linear(9, &[a], &[b]).unwrap();
        prop_assert_eq!(rqi(&r, &TaskSpec::addition(9).unwrap(), DEFAULT_DELTA).unwrap(), 1.0);
    }
}

/// Projection of each candidate row onto the span of the known rows, via
/// an eigendecomposition of the normal matrix.
fn least_squares_closure(d: &[Sample], spec: &TaskSpec) -> ParallelogramSet {
    let p = spec.p();
    let base = permissible_set(d, spec);
    let rows: Vec<Vec<f64>> = base.iter().map(|q| constraint_row(q, p).to_vec()).collect();
    let at = DMatrix::from_fn(p, rows.len(), |c, r| rows[r][c]);
    let eig = SymmetricEigen::new(&at * at.transpose());
    let lmax = eig.eigenvalues.amax();
    let basis: Vec<DVector<f64>> =
        (0..p).filter(|&k| eig.eigenvalues[k] > 1e-8 * lmax).map(|k| eig.eigenvectors.column(k).into_owned()).collect();
    let mut out = base.clone();
    for q in &full_permissible_set(spec) {
        let t = DVector::from_vec(constraint_row(q, p).to_vec());
        let fit = basis.iter().fold(DVector::zeros(p), |acc, v| acc + v * v.dot(&t));
        if (fit - &t).norm() <= 1e-8 * t.norm() {
            out.insert(*q);
        }
    }
    out
}

#[test]
fn ideal_closure_matches_least_squares_on_45_sample_splits() {
    let spec = TaskSpec::addition(10).unwrap();
    for seed in 0..20 {
        let sp = split(&spec, Fraction::exact(45, 55).unwrap(), seed).unwrap();
        assert_eq!(ideal_closure(&sp.train, &spec).unwrap(), least_squares_closure(&sp.train, &spec), "seed {seed}");
    }
}

#[test]
fn euler_linear_flow_converges_to_matrix_exponential() {
    let spec = TaskSpec::addition(8).unwrap();
    let sp = split(&spec, Fraction::float(0.5).unwrap(), 3).unwrap();
    let set = permissible_set(&sp.train, &spec);
    let r0 = init_uniform(8, 2, 1.0, 11);
    let h = hessian(&set, 8, 1.0).unwrap();
    let t = 0.5;
    let exact = analytic_flow(&r0, &h, t).unwrap();
    let err = |steps: usize| {
        let approx = linear_flow(&r0, &h, steps, t / steps as f64).unwrap();
        (approx.data() - exact.data()).iter().map(|x| x.abs()).fold(0.0, f64::max)
    };
    let (coarse, fine) = (err(500), err(1000));
    assert!(fine < 1e-3, "error {fine}");
    // first-order method: halving the step roughly halves the error
    assert!((coarse / fine - 2.0).abs() < 0.2, "ratio {}", coarse / fine);
}

#[test]
fn analytic_flow_keeps_null_space_component() {
    let spec = TaskSpec::addition(6).unwrap();
    let set = full_permissible_set(&spec);
    let h = hessian(&set, 6, 1.0).unwrap();
    let linear = Representation::linear(6, &[0.7], &[0.2]).unwrap();
    let moved = analytic_flow(&linear, &h, 3.0).unwrap();
    for (a, b) in moved.data().iter().zip(linear.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn untrained_accuracy_is_near_chance() {
    // nearest-target and argmax decoding of an untrained model: hits are
    // rare, so the mean over many seeds sits near one over the label count
    for (task, mode) in [
        (TaskSpec::addition(10).unwrap(), TaskMode::Regression),
        (TaskSpec::addition(10).unwrap(), TaskMode::Classification),
        (TaskSpec::s3(), TaskMode::Classification),
    ] {
        let cfg = ModelConfig { mode, ..ModelConfig::regression(task) };
        let samples = enumerate_samples(&task);
        let seeds = 200;
        let mean: f64 = (0..seeds)
            .map(|s| Model::init(&cfg, s).unwrap().evaluate(&samples).unwrap().1)
            .sum::<f64>()
            / seeds as f64;
        let chance = 1.0 / task.num_labels() as f64;
        assert!((mean - chance).abs() < 0.5 * chance + 0.02, "{task} {mode:?}: mean {mean}, chance {chance}");
    }
}
