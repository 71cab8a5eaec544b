mod common;

use common::{random_params, random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use repinv::autodiff::Tensor;
use repinv::inverter::{InversionConfig, InversionModel, InverterShape, Pairs};
use repinv::mi::{
    binning_marginal_entropies, binning_mi, kde_noise_bound, kraskov_entropy, nce_bound, Aux, EstimatorKind, MiError,
};

fn gaussian(n: usize, d: usize, sd: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(&[n, d], |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        sd * z
    })
}

fn pairs(n: usize, levels: usize, seed: u64) -> Pairs {
    let mut r = rng(seed);
    let x = Tensor::from_fn(&[n, 1, 2, 2], |_| r.gen_range(0..levels) as f64);
    Pairs { x, h: random_tensor(&[n, 3], &mut r) }
}

fn shape(levels: usize) -> InverterShape {
    let config = InversionConfig { layers: 2, filters: 4, first_kernel: 3, levels, ..Default::default() };
    InverterShape::new(&config, (1, 2, 2), &[3], None)
}

#[test]
fn nce_of_uniform_inverter() {
    let m = InversionModel::zeros(shape(2)).unwrap();
    let est = nce_bound(&m, &pairs(50, 2, 1)).unwrap();
    assert!((est.value + 4.0 * 2f64.ln()).abs() < 1e-12);
    assert!(est.stderr.unwrap() < 1e-12);
    assert_eq!(est.kind, EstimatorKind::NceLowerBound);
    assert_eq!(est.aux, Aux::Nce { dims: 4 });
    assert!((est.bits_per_dim().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn nce_is_negative_nll_with_sample_stderr() {
    let zero = InversionModel::zeros(shape(4)).unwrap();
    let m = InversionModel::new(shape(4), random_params(zero.graph(), 3)).unwrap();
    let p = pairs(40, 4, 2);
    let est = nce_bound(&m, &p).unwrap();
    assert_eq!(est.value, -m.nll(&p.x, &p.h).unwrap());

    let lp = m.log_prob(&p.x, &p.h).unwrap();
    let n = lp.len() as f64;
    let mean = lp.iter().sum::<f64>() / n;
    let sd = (lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((est.stderr.unwrap() - sd / n.sqrt()).abs() < 1e-12);
    assert_eq!(est.n, 40);
}

#[test]
fn nce_needs_examples() {
    let m = InversionModel::zeros(shape(2)).unwrap();
    let empty = pairs(4, 2, 0).select(&[]);
    assert!(matches!(nce_bound(&m, &empty), Err(MiError::Empty)));
}

#[test]
fn binning_identifies_distinct_codes() {
    let h = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let est = binning_mi(&[0, 1, 2, 3], &h, 4).unwrap();
    assert!((est.value - 4f64.ln()).abs() < 1e-12);
    let constant = Tensor::full(&[4, 2], 0.3);
    assert_eq!(binning_mi(&[0, 1, 2, 3], &constant, 4).unwrap().value, 0.0);
}

#[test]
fn binning_small_joint_by_hand() {
    let h = Tensor::new(vec![4, 1], vec![0.0, 0.1, 1.0, 0.9]).unwrap();
    let est = binning_mi(&[0, 0, 0, 1], &h, 2).unwrap();
    let expect = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
    assert!((est.value - expect).abs() < 1e-12, "{} vs {expect}", est.value);
}

#[test]
fn binning_rejects_bad_input() {
    let h = Tensor::zeros(&[3, 1]);
    assert!(matches!(binning_mi(&[], &Tensor::zeros(&[0, 1]), 2), Err(MiError::Empty)));
    assert!(matches!(binning_mi(&[0, 1, 2], &h, 0), Err(MiError::Invalid(_))));
    assert!(matches!(binning_mi(&[0, 1], &h, 2), Err(MiError::Invalid(_))));
}

proptest! {
    #[test]
    fn binning_is_bounded_by_marginals(
        ids in proptest::collection::vec(0usize..6, 30),
        values in proptest::collection::vec(-3.0f64..3.0, 60),
        bins in 1usize..12,
    ) {
        let h = Tensor::new(vec![30, 2], values).unwrap();
        let mi = binning_mi(&ids, &h, bins).unwrap().value;
        let (hx, hh) = binning_marginal_entropies(&ids, &h, bins);
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= hx.min(hh) + 1e-12);
    }

    #[test]
    fn coarser_bins_never_gain_information(
        ids in proptest::collection::vec(0usize..8, 40),
        values in proptest::collection::vec(0.0f64..1.0, 40),
    ) {
        let h = Tensor::new(vec![40, 1], values).unwrap();
        let fine = binning_mi(&ids, &h, 30).unwrap().value;
        let coarse = binning_mi(&ids, &h, 10).unwrap().value;
        prop_assert!(coarse <= fine + 1e-12, "coarse {} fine {}", coarse, fine);
    }
}

#[test]
fn kraskov_gaussian_entropy() {
    for d in [1, 2, 4] {
        let est = kraskov_entropy(&gaussian(2000, d, 1.0, d as u64), 3).unwrap();
        let truth = d as f64 / 2.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((est.value - truth).abs() <= 0.05 * truth, "d={d}: {} vs {truth}", est.value);
        assert_eq!(est.aux, Aux::Kraskov { k: 3, dims: d });
    }
}

#[test]
fn kraskov_uniform_cube() {
    let mut r = rng(9);
    let x = Tensor::from_fn(&[2000, 2], |_| r.gen::<f64>());
    let est = kraskov_entropy(&x, 3).unwrap();
    assert!(est.value.abs() <= 0.05, "{}", est.value);
}

#[test]
fn kraskov_identical_samples_stay_finite() {
    let est = kraskov_entropy(&Tensor::full(&[50, 3], 0.25), 2).unwrap();
    assert!(est.value.is_finite() && est.value < -30.0);
}

#[test]
fn kraskov_checks_k() {
    let x = gaussian(5, 1, 1.0, 0);
    assert!(matches!(kraskov_entropy(&x, 5), Err(MiError::BadK { k: 5, n: 5 })));
    assert!(matches!(kraskov_entropy(&x, 0), Err(MiError::BadK { .. })));
}

#[test]
fn kraskov_variance_shrinks_with_n() {
    let spread = |n: usize| {
        let v: Vec<f64> = (0..12).map(|s| kraskov_entropy(&gaussian(n, 2, 1.0, 100 + s), 3).unwrap().value).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(spread(1000) < spread(100));
}

#[test]
fn kde_of_constant_activations_is_near_zero() {
    let est = kde_noise_bound(&Tensor::full(&[400, 3], 1.5), 0.1, 0.5, 1).unwrap();
    assert!(est.value <= 0.1, "{}", est.value);
    assert_eq!(est.aux, Aux::Kde { sigma2: 0.1, dims: 3 });
}

#[test]
fn kde_gaussian_channel() {
    // h ~ N(0, σ²I) through noise of the same variance carries (D/2) ln 2.
    let sigma2: f64 = 0.5;
    for d in [1, 2] {
        let h = gaussian(4000, d, sigma2.sqrt(), 40 + d as u64);
        let est = kde_noise_bound(&h, sigma2, 0.5, 7).unwrap();
        let truth = d as f64 / 2.0 * 2f64.ln();
        assert!((est.value - truth).abs() <= 0.15 * truth, "d={d}: {} vs {truth}", est.value);
        assert!(est.value >= -3.0 * est.stderr.unwrap());
    }
}

#[test]
fn kde_rejects_degenerate_splits() {
    let h = gaussian(10, 1, 1.0, 0);
    assert!(matches!(kde_noise_bound(&h, 0.1, 0.0, 0), Err(MiError::Invalid(_))));
    assert!(matches!(kde_noise_bound(&h, 0.1, 1.0, 0), Err(MiError::Invalid(_))));
    assert!(matches!(kde_noise_bound(&h, 0.0, 0.5, 0), Err(MiError::Invalid(_))));
}

#[test]
fn estimator_names_parse() {
    for k in ["nce", "binning", "kraskov", "kde"] {
        let kind: EstimatorKind = k.parse().unwrap();
        assert_eq!(kind.as_str().parse::<EstimatorKind>().unwrap(), kind);
    }
    assert!("mine".parse::<EstimatorKind>().is_err());
}
