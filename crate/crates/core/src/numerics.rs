//! Random streams, flat real vectors, and closed-form Gaussian divergences.
//!
//! Every random quantity in the crate is drawn from an [`RngStream`]: a
//! ChaCha8 keystream keyed by `(master_seed, stream_id)`. ChaCha is
//! counter-based, so a stream's output depends only on its key and position,
//! never on what other streams did. Replicas derive child streams with
//! [`RngStream::derive`], which keeps results independent of the thread
//! schedule.

use std::ops::Deref;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Stream labels for the different purposes randomness is used for.
///
/// Keeping these fixed is what makes minibatch draws independent of noise
/// draws and of the data.
pub mod streams {
    pub const DATA: u64 = 0x0d47;
    pub const SUBSET: u64 = 0x5b5e;
    pub const MINIBATCH: u64 = 0xba7c;
    pub const INIT: u64 = 0x1417;
    pub const NOISE: u64 = 0x0015;
    pub const SPLIT: u64 = 0x5917;
    pub const OUTER: u64 = 0x0a7e;
    pub const INNER: u64 = 0x1a7e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic, splittable stream of pseudo-random numbers.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    core: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(master_seed);
        core.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            core,
        }
    }

    /// Root stream for a master seed.
    pub fn root(master_seed: u64) -> Self {
        Self::new(master_seed, 0)
    }

    /// A child stream whose id is a hash of this stream's id and `label`.
    ///
    /// The child starts at counter 0 and does not depend on how far the
    /// parent has advanced.
    pub fn derive(&self, label: u64) -> Self {
        let id = splitmix64(self.stream_id ^ splitmix64(label).rotate_left(17));
        Self::new(self.master_seed, id)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.core.get_word_pos() as u64
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.core.random::<f64>()
    }

    /// Uniform integer in `[0, bound)`. `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        self.core.random_range(0..bound)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.core.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.core.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.core.fill_bytes(dst)
    }
}

/// A vector of finite reals.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVec(Vec<f64>);

impl RealVec {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        check_finite(&entries, "vector entry")?;
        Ok(Self(entries))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }
}

impl Deref for RealVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for RealVec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RealVec> for Vec<f64> {
    fn from(v: RealVec) -> Self {
        v.0
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what} at index {i} is {}", values[i]))),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// `y += alpha * x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Squared euclidean distance.
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Incremental mean of equal-length vectors.
///
/// Uses the update `m += (x - m) / k`, so averaging identical vectors returns
/// exactly that vector.
#[derive(Clone, Debug)]
pub struct RunningMean {
    mean: Vec<f64>,
    count: usize,
}

impl RunningMean {
    pub fn new(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.mean.iter_mut().for_each(|m| *m = 0.0);
        self.count = 0;
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        if self.count == 1 {
            self.mean.copy_from_slice(x);
            return;
        }
        let inv = 1.0 / self.count as f64;
        for (m, xi) in self.mean.iter_mut().zip(x) {
            *m += (xi - *m) * inv;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

/// Welford accumulator for the mean vector and the trace of the population
/// (1/N) covariance.
#[derive(Clone, Debug)]
pub struct RunningTrace {
    mean: RunningMean,
    m2: f64,
    delta: Vec<f64>,
}

impl RunningTrace {
    pub fn new(d: usize) -> Self {
        Self {
            mean: RunningMean::new(d),
            m2: 0.0,
            delta: vec![0.0; d],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        for (d, (xi, m)) in self.delta.iter_mut().zip(x.iter().zip(self.mean.mean())) {
            *d = xi - m;
        }
        self.mean.push(x);
        self.m2 += self
            .delta
            .iter()
            .zip(x.iter().zip(self.mean.mean()))
            .map(|(d, (xi, m))| d * (xi - m))
            .sum::<f64>();
    }

    pub fn count(&self) -> usize {
        self.mean.count()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.mean()
    }

    /// `(1/N) Σ ||x_i - x̄||²`; zero for fewer than one sample.
    pub fn population_trace(&self) -> f64 {
        match self.count() {
            0 => 0.0,
            n => (self.m2 / n as f64).max(0.0),
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Sample mean and standard error `sd / sqrt(len)` (sample sd with `len - 1`).
/// A single value has standard error 0.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `d` independent standard normal draws.
pub fn gauss_vec(rng: &mut RngStream, d: usize) -> Result<RealVec> {
    if d == 0 {
        return Err(Error::Dimension("gauss_vec needs d >= 1".into()));
    }
    Ok(RealVec((0..d).map(|_| rng.standard_normal()).collect()))
}

/// KL divergence in nats between `N(mu_q, var I)` and `N(mu_p, var I)`.
pub fn gaussian_kl_shared_cov(mu_q: &[f64], mu_p: &[f64], var: f64) -> Result<f64> {
    if mu_q.len() != mu_p.len() {
        return Err(Error::Dimension(format!(
            "mean lengths differ: {} vs {}",
            mu_q.len(),
            mu_p.len()
        )));
    }
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::invalid(format!("variance must be positive, got {var}")));
    }
    let kl = dist_sq(mu_q, mu_p) / (2.0 * var);
    if !kl.is_finite() {
        return Err(Error::NonFinite("gaussian KL".into()));
    }
    Ok(kl)
}

/// Evaluation-loss assumption feeding the bound formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossKind {
    ZeroOne,
    Bounded { lo: f64, hi: f64 },
    Subgaussian { sigma: f64 },
}

impl LossKind {
    /// The range `(a1, a2)` when the loss is bounded.
    pub fn range(&self) -> Option<(f64, f64)> {
        match *self {
            LossKind::ZeroOne => Some((0.0, 1.0)),
            LossKind::Bounded { lo, hi } => Some((lo, hi)),
            LossKind::Subgaussian { .. } => None,
        }
    }
}

/// Subgaussian constant σ of the evaluation loss.
pub fn subgaussian_sigma(kind: &LossKind) -> Result<f64> {
    match *kind {
        LossKind::ZeroOne => Ok(0.5),
        LossKind::Bounded { lo, hi } => {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("bounded loss needs lo < hi, got [{lo}, {hi}]")));
            }
            Ok((hi - lo) / 2.0)
        }
        LossKind::Subgaussian { sigma } => {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
            }
            Ok(sigma)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::erf::erf;

    #[test]
    fn same_key_same_sequence() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        assert_eq!(gauss_vec(&mut a, 3).unwrap(), gauss_vec(&mut b, 3).unwrap());
        assert_eq!(a.counter(), b.counter());
        assert!(a.counter() > 0);
    }

    #[test]
    fn derived_streams_ignore_parent_position() {
        let parent = RngStream::new(11, 0);
        let mut advanced = parent.clone();
        advanced.uniform();
        assert_eq!(parent.derive(5).next_u64(), advanced.derive(5).next_u64());
        assert_ne!(parent.derive(5).next_u64(), parent.derive(6).next_u64());
    }

    #[test]
    fn interleaving_does_not_change_streams() {
        let mut a = RngStream::new(1, 10);
        let mut b = RngStream::new(1, 20);
        let solo: Vec<u64> = {
            let mut a2 = RngStream::new(1, 10);
            (0..8).map(|_| a2.next_u64()).collect()
        };
        let mixed: Vec<u64> = (0..8)
            .map(|_| {
                b.next_u64();
                a.next_u64()
            })
            .collect();
        assert_eq!(solo, mixed);
    }

    #[test]
    fn gauss_vec_rejects_zero_dim() {
        assert!(matches!(gauss_vec(&mut RngStream::root(1), 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn normal_draw_moments() {
        let mut rng = RngStream::new(2024, 1);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!((var - 1.0).abs() < 0.005, "var {var}");
    }

    #[test]
    fn normal_draws_pass_chi_squared() {
        // 20 equiprobable bins; chi2(19) upper 1e-6 quantile = 63.677052...
        let mut rng = RngStream::new(99, 4);
        let n = 100_000;
        let mut counts = [0usize; 20];
        for _ in 0..n {
            let x = rng.standard_normal();
            let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
            counts[((cdf * 20.0) as usize).min(19)] += 1;
        }
        let expected = n as f64 / 20.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(stat < 63.677_052_285_677_995, "chi2 = {stat}");
    }

    fn normal_pdf(x: f64, mu: f64) -> f64 {
        (-(x - mu) * (x - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn kl_matches_numerical_integration() {
        // ∫ q log(q/p) per coordinate, trapezoid on [-30, 30].
        let coord_kl = |mq: f64, mp: f64| {
            let h = 1e-3;
            let steps = 60_000;
            (0..=steps)
                .map(|i| {
                    let x = -30.0 + i as f64 * h;
                    let q = normal_pdf(x, mq);
                    let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                    if q == 0.0 {
                        0.0
                    } else {
                        w * h * q * (q / normal_pdf(x, mp)).ln()
                    }
                })
                .sum::<f64>()
        };
        let oracle = coord_kl(2.0, 0.0) + coord_kl(0.0, 0.0);
        let kl = gaussian_kl_shared_cov(&[2.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((oracle - 2.0).abs() < 1e-6);
        assert!((kl - oracle).abs() < 1e-6, "{kl} vs {oracle}");
    }

    #[test]
    fn kl_edge_cases() {
        assert_eq!(gaussian_kl_shared_cov(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        let base = gaussian_kl_shared_cov(&[1.0, -2.0], &[0.5, 0.0], 0.7).unwrap();
        let scaled = gaussian_kl_shared_cov(&[3.0, -6.0], &[1.5, 0.0], 0.7).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12);
        assert!(gaussian_kl_shared_cov(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(gaussian_kl_shared_cov(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn sigma_values() {
        assert_eq!(subgaussian_sigma(&LossKind::ZeroOne).unwrap(), 0.5);
        assert_eq!(subgaussian_sigma(&LossKind::Bounded { lo: 0.0, hi: 1.0 }).unwrap(), 0.5);
        assert_eq!(subgaussian_sigma(&LossKind::Bounded { lo: -1.0, hi: 3.0 }).unwrap(), 2.0);
        assert!(subgaussian_sigma(&LossKind::Bounded { lo: 1.0, hi: 1.0 }).is_err());
    }

    #[test]
    fn realvec_rejects_nan() {
        assert!(RealVec::new(vec![1.0, f64::NAN]).is_err());
        assert!(serde_json::from_str::<RealVec>("[1.0, 2.0]").is_ok());
    }

    #[test]
    fn running_trace_of_identical_vectors_is_zero() {
        let mut acc = RunningTrace::new(2);
        for _ in 0..7 {
            acc.push(&[0.1, 0.3]);
        }
        assert_eq!(acc.population_trace(), 0.0);
        assert_eq!(acc.mean(), &[0.1, 0.3]);
    }

    #[test]
    fn running_trace_matches_two_pass() {
        let pts = [[1.0, 2.0], [-1.0, 0.5], [3.0, -2.0], [0.0, 0.0]];
        let mut acc = RunningTrace::new(2);
        pts.iter().for_each(|p| acc.push(p));
        let mean = [0.75, 0.125];
        let two_pass: f64 = pts.iter().map(|p| dist_sq(p, &mean)).sum::<f64>() / 4.0;
        assert!((acc.population_trace() - two_pass).abs() < 1e-12);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1.0);
        for _ in 0..10_000 {
            s.add(1e-16);
        }
        assert!((s.value() - (1.0 + 1e-12)).abs() < 1e-15);
    }
}
