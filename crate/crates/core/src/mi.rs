//! Information estimates in nats: the inverter cross-entropy bound, exact
//! binned MI, the k-nearest-neighbour entropy estimator and a noisy-KDE
//! upper bound.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::inverter::{InversionModel, InverterError, Pairs};

/// Guard added to neighbour distances before taking logs.
pub const KRASKOV_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MiError {
    #[error(transparent)]
    Inverter(#[from] InverterError),
    #[error("estimator needs at least one sample")]
    Empty,
    #[error("k = {k} must satisfy 1 <= k < N = {n}")]
    BadK { k: usize, n: usize },
    #[error("invalid estimator input: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    NceLowerBound,
    Binning,
    KraskovEntropy,
    KdeUpperBound,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::NceLowerBound => "nce_lower_bound",
            EstimatorKind::Binning => "binning",
            EstimatorKind::KraskovEntropy => "kraskov_entropy",
            EstimatorKind::KdeUpperBound => "kde_upper_bound",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = MiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nce" | "nce_lower_bound" => Ok(EstimatorKind::NceLowerBound),
            "binning" => Ok(EstimatorKind::Binning),
            "kraskov" | "kraskov_entropy" => Ok(EstimatorKind::KraskovEntropy),
            "kde" | "kde_upper_bound" => Ok(EstimatorKind::KdeUpperBound),
            _ => Err(MiError::Invalid(format!("unknown estimator `{s}`"))),
        }
    }
}

/// Estimator-specific settings recorded with a value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aux {
    Nce { dims: usize },
    Binning { bins: usize },
    Kraskov { k: usize, dims: usize },
    Kde { sigma2: f64, dims: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MIEstimate {
    pub value: f64,
    pub kind: EstimatorKind,
    pub n: usize,
    pub stderr: Option<f64>,
    pub aux: Aux,
}

impl MIEstimate {
    /// For the NCE bound: the matching negative log-likelihood in bits per
    /// sub-pixel.
    pub fn bits_per_dim(&self) -> Option<f64> {
        match self.aux {
            Aux::Nce { dims } => Some(-self.value / (dims as f64 * std::f64::consts::LN_2)),
            _ => None,
        }
    }
}

fn mean_and_stderr(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Mean conditional log-likelihood of held-out pairs, i.e. the negative
/// conditional cross entropy. Standard error is the sample standard
/// deviation over `sqrt(|T|)`.
pub fn nce_bound(model: &InversionModel, held_out: &Pairs) -> Result<MIEstimate, MiError> {
    if held_out.is_empty() {
        return Err(MiError::Empty);
    }
    let lp = model.log_prob(&held_out.x, &held_out.h)?;
    let (value, stderr) = mean_and_stderr(&lp);
    Ok(MIEstimate { value, kind: EstimatorKind::NceLowerBound, n: lp.len(), stderr, aux: Aux::Nce { dims: model.dims() } })
}

/// Equal-width bin index per value of each dimension, over the empirical
/// `[min, max]` range. Constant dimensions collapse to a single bin.
fn bin_rows(activations: &Tensor, bins: usize) -> Vec<Vec<u32>> {
    let (n, d) = (activations.batch(), activations.per_example());
    let v = activations.data();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for j in 0..d {
            lo[j] = lo[j].min(v[i * d + j]);
            hi[j] = hi[j].max(v[i * d + j]);
        }
    }
    (0..n)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let width = hi[j] - lo[j];
                    if width <= 0.0 {
                        0
                    } else {
                        (((v[i * d + j] - lo[j]) / width * bins as f64) as u32).min(bins as u32 - 1)
                    }
                })
                .collect()
        })
        .collect()
}

fn plug_in_entropy<K: Ord>(keys: impl Iterator<Item = K>) -> f64 {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    let mut n = 0usize;
    for k in keys {
        *counts.entry(k).or_default() += 1;
        n += 1;
    }
    let n = n as f64;
    -counts.values().map(|&c| c as f64 / n * (c as f64 / n).ln()).sum::<f64>()
}

/// Exact mutual information of the empirical joint distribution of
/// `(x_id, binned activation vector)`.
pub fn binning_mi(x_ids: &[usize], activations: &Tensor, bins: usize) -> Result<MIEstimate, MiError> {
    if x_ids.is_empty() {
        return Err(MiError::Empty);
    }
    if bins == 0 {
        return Err(MiError::Invalid("bins must be positive".into()));
    }
    if activations.batch() != x_ids.len() {
        return Err(MiError::Invalid(format!("{} ids for {} activation rows", x_ids.len(), activations.batch())));
    }
    let binned = bin_rows(activations, bins);
    let n = x_ids.len() as f64;
    let mut joint: BTreeMap<(usize, &[u32]), usize> = BTreeMap::new();
    let mut px: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ph: BTreeMap<&[u32], usize> = BTreeMap::new();
    for (&x, h) in x_ids.iter().zip(&binned) {
        *joint.entry((x, h.as_slice())).or_default() += 1;
        *px.entry(x).or_default() += 1;
        *ph.entry(h.as_slice()).or_default() += 1;
    }
    let mut mi = 0.0;
    for (&(x, h), &c) in &joint {
        let c = c as f64;
        mi += c / n * (c * n / (px[&x] as f64 * ph[h] as f64)).ln();
    }
    Ok(MIEstimate { value: mi.max(0.0), kind: EstimatorKind::Binning, n: x_ids.len(), stderr: None, aux: Aux::Binning { bins } })
}

/// Plug-in entropies `(H(x_id), H(binned h))` matching [`binning_mi`].
pub fn binning_marginal_entropies(x_ids: &[usize], activations: &Tensor, bins: usize) -> (f64, f64) {
    let binned = bin_rows(activations, bins);
    (plug_in_entropy(x_ids.iter().copied()), plug_in_entropy(binned.iter().map(Vec::as_slice)))
}

/// Nearest-neighbour differential entropy estimate (nats) with exact
/// brute-force k-th neighbour search.
pub fn kraskov_entropy(samples: &Tensor, k: usize) -> Result<MIEstimate, MiError> {
    let (n, d) = (samples.batch(), samples.per_example());
    if k == 0 || k >= n {
        return Err(MiError::BadK { k, n });
    }
    let v = samples.data();
    let log_r: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &v[i * d..(i + 1) * d];
            let mut dist: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| xi.iter().zip(&v[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            let (_, kth, _) = dist.select_nth_unstable_by(k - 1, f64::total_cmp);
            (kth.sqrt() + KRASKOV_EPS).ln()
        })
        .collect();
    let (df, nf) = (d as f64, n as f64);
    let sum: f64 = log_r.iter().sum();
    let value = df / nf * sum + df / 2.0 * std::f64::consts::PI.ln() - ln_gamma(df / 2.0 + 1.0) + digamma(nf)
        - digamma(k as f64);
    Ok(MIEstimate { value, kind: EstimatorKind::KraskovEntropy, n, stderr: None, aux: Aux::Kraskov { k, dims: d } })
}

/// Upper bound on `I(x; h + ε)` with `ε ~ N(0, σ² I)`: the cross entropy of
/// noisy held-out activations under a Gaussian-kernel mixture centred on
/// the fit split, minus the noise entropy `(D/2) ln(2πeσ²)`.
pub fn kde_noise_bound(activations: &Tensor, sigma2: f64, held_out_fraction: f64, seed: u64) -> Result<MIEstimate, MiError> {
    if !(sigma2 > 0.0) {
        return Err(MiError::Invalid("noise variance must be positive".into()));
    }
    let (n, d) = (activations.batch(), activations.per_example());
    let n_eval = (n as f64 * held_out_fraction).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(MiError::Invalid(format!("held-out fraction {held_out_fraction} leaves an empty split of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (eval, fit) = order.split_at(n_eval);
    let v = activations.data();
    let noisy: Vec<f64> = eval
        .iter()
        .flat_map(|&i| v[i * d..(i + 1) * d].to_vec())
        .map(|x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x + sigma2.sqrt() * e
        })
        .collect();
    let centres: Vec<f64> = fit.iter().flat_map(|&j| v[j * d..(j + 1) * d].to_vec()).collect();
    let log_norm = -(d as f64) / 2.0 * (2.0 * std::f64::consts::PI * sigma2).ln() - (fit.len() as f64).ln();
    let neg_log: Vec<f64> = noisy
        .par_chunks(d)
        .map(|y| {
            let expo: Vec<f64> = centres
                .chunks(d)
                .map(|c| -y.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * sigma2))
                .collect();
            let max = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + expo.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            -(lse + log_norm)
        })
        .collect();
    let (cross_entropy, stderr) = mean_and_stderr(&neg_log);
    let noise_entropy = d as f64 / 2.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma2).ln();
    Ok(MIEstimate {
        value: cross_entropy - noise_entropy,
        kind: EstimatorKind::KdeUpperBound,
        n,
        stderr,
        aux: Aux::Kde { sigma2, dims: d },
    })
}
