//! Random index subsets and exact finite-population sampling formulas.
//!
//! Indices are 0-based throughout: a subset of `{0, .., n-1}`.
//! The [`oracle`] submodule enumerates every subset to check the closed
//! forms; it is public so the CLI `stats-check` command and the acceptance
//! suite can run it.

use serde::{Deserialize, Serialize};

use crate::numerics::{RealVec, RngStream};
use crate::{Error, Result};

/// The held-in index set `J`, `|J| = m`, with a non-empty complement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetIndex {
    indices: Vec<usize>,
    #[serde(skip)]
    membership: Vec<bool>,
    n: usize,
}

impl SubsetIndex {
    pub fn new(n: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        let m = indices.len();
        if m == 0 || m >= n {
            return Err(Error::invalid(format!("subset size must satisfy 1 <= m <= n-1, got m = {m}, n = {n}")));
        }
        let mut membership = vec![false; n];
        for &i in &indices {
            if i >= n || membership[i] {
                return Err(Error::invalid(format!("index {i} is out of range or repeated")));
            }
            membership[i] = true;
        }
        Ok(Self { indices, membership, n })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn population(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize) -> bool {
        self.membership.get(i).copied().unwrap_or(false)
    }

    /// Indices not in the subset, ascending.
    pub fn complement(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| !self.membership[i]).collect()
    }
}

/// A fixed minibatch index sequence `U = (K_1, ..., K_T)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinibatchPlan {
    n: usize,
    batches: Vec<Vec<usize>>,
}

impl MinibatchPlan {
    pub fn new(n: usize, batches: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; n];
        let mut batches = batches;
        for (t, batch) in batches.iter_mut().enumerate() {
            if batch.is_empty() {
                return Err(Error::invalid(format!("minibatch {t} is empty")));
            }
            batch.sort_unstable();
            for &i in batch.iter() {
                if i >= n || seen[i] {
                    return Err(Error::invalid(format!("minibatch {t} has an out-of-range or repeated index {i}")));
                }
                seen[i] = true;
            }
            for &i in batch.iter() {
                seen[i] = false;
            }
        }
        Ok(Self { n, batches })
    }

    /// `steps` independent uniform batches of size `b`.
    pub fn draw(n: usize, b: usize, steps: usize, rng: &mut RngStream) -> Result<Self> {
        let mut sampler = BatchSampler::new(n, b)?;
        let batches = (0..steps).map(|_| sampler.next(rng).to_vec()).collect();
        Ok(Self { n, batches })
    }

    pub fn population(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Batch for 1-based step `t`.
    pub fn batch(&self, t: usize) -> &[usize] {
        &self.batches[t - 1]
    }

    /// Same plan with every index mapped through `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.n,
            self.batches
                .iter()
                .map(|b| b.iter().map(|&i| perm[i]).collect())
                .collect(),
        )
    }
}

/// Repeated uniform size-`b` subsets via partial Fisher-Yates on a persistent
/// permutation; each draw costs O(b). Draws are returned sorted.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    perm: Vec<usize>,
    b: usize,
    current: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize, b: usize) -> Result<Self> {
        if b == 0 || b > n {
            return Err(Error::invalid(format!("batch size must satisfy 1 <= b <= n, got b = {b}, n = {n}")));
        }
        Ok(Self {
            perm: (0..n).collect(),
            b,
            current: Vec::with_capacity(b),
        })
    }

    pub fn next(&mut self, rng: &mut RngStream) -> &[usize] {
        let n = self.perm.len();
        self.current.clear();
        if self.b == n {
            self.current.extend(0..n);
            return &self.current;
        }
        for i in 0..self.b {
            let j = i + rng.below((n - i) as u64) as usize;
            self.perm.swap(i, j);
        }
        self.current.extend_from_slice(&self.perm[..self.b]);
        self.current.sort_unstable();
        &self.current
    }
}

/// Uniformly random `J ⊂ {0..n-1}` with `|J| = m`.
pub fn draw_subset(n: usize, m: usize, rng: &mut RngStream) -> Result<SubsetIndex> {
    if m == 0 || m >= n {
        return Err(Error::invalid(format!("subset size must satisfy 1 <= m <= n-1, got m = {m}, n = {n}")));
    }
    let mut sampler = BatchSampler::new(n, m)?;
    SubsetIndex::new(n, sampler.next(rng).to_vec())
}

/// Mean and variance of `HG(n, m, b)`: overlap of a uniform size-`b` draw with
/// a fixed size-`m` subset of `n` items.
pub fn hypergeom_moments(n: usize, m: usize, b: usize) -> Result<(f64, f64)> {
    if b == 0 || b > n || m > n {
        return Err(Error::invalid(format!("hypergeometric needs 1 <= b <= n and m <= n, got n={n}, m={m}, b={b}")));
    }
    let (nf, mf, bf) = (n as f64, m as f64, b as f64);
    let mean = bf * mf / nf;
    let var = if n == b || n == 1 {
        0.0
    } else {
        bf * (mf / nf) * ((nf - mf) / nf) * ((nf - bf) / (nf - 1.0))
    };
    Ok((mean, var))
}

/// `Pr[K ⊆ J] = C(m, b) / C(n, b)` for a uniform size-`b` batch `K`.
pub fn prob_batch_within_subset(n: usize, m: usize, b: usize) -> Result<f64> {
    if b == 0 || b > n || m > n {
        return Err(Error::invalid("need 1 <= b <= n and m <= n"));
    }
    if b > m {
        return Ok(0.0);
    }
    // Π_{i<b} (m - i) / (n - i)
    Ok((0..b).map(|i| (m - i) as f64 / (n - i) as f64).product())
}

/// Row-major `d x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    pub dim: usize,
    pub entries: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.entries[i * self.dim + i]).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|x| x * c).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Population (1/N) variance matrix.
pub fn population_variance(population: &[RealVec]) -> Result<SquareMatrix> {
    let n = population.len();
    if n == 0 {
        return Err(Error::invalid("empty population"));
    }
    let d = population[0].len();
    if population.iter().any(|y| y.len() != d) {
        return Err(Error::Dimension("population vectors differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for y in population {
        for (m, v) in mean.iter_mut().zip(y.iter()) {
            *m += v / n as f64;
        }
    }
    let mut sigma = SquareMatrix::zeros(d);
    for y in population {
        for i in 0..d {
            for j in 0..d {
                sigma.entries[i * d + j] += (y[i] - mean[i]) * (y[j] - mean[j]) / n as f64;
            }
        }
    }
    Ok(sigma)
}

/// Joint second moments of the means of two disjoint uniform samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DisjointCov {
    pub var1: SquareMatrix,
    pub var2: SquareMatrix,
    pub cov: SquareMatrix,
}

/// Closed-form `Var(Ȳ₁)`, `Var(Ȳ₂)`, `Cov(Ȳ₁, Ȳ₂)` for disjoint uniform
/// samples of sizes `n1`, `n2` from a finite population.
pub fn disjoint_sample_cov(population: &[RealVec], n1: usize, n2: usize) -> Result<DisjointCov> {
    let big_n = population.len();
    if n1 == 0 || n2 == 0 || n1 + n2 > big_n {
        return Err(Error::invalid(format!("need n1, n2 >= 1 and n1 + n2 <= N, got n1={n1}, n2={n2}, N={big_n}")));
    }
    let sigma = population_variance(population)?;
    let nf = big_n as f64;
    let denom = nf - 1.0;
    Ok(DisjointCov {
        var1: sigma.scaled((nf - n1 as f64) / (n1 as f64 * denom)),
        var2: sigma.scaled((nf - n2 as f64) / (n2 as f64 * denom)),
        cov: sigma.scaled(-1.0 / denom),
    })
}

/// Coefficient `c` in `E ||ξ_t||² = c · tr Σ̂_t` for uniform `J` (size m) and
/// `K_t` (size b) drawn independently of each other and of `W_t`.
pub fn xi_second_moment_coeff(n: usize, m: usize, b: usize) -> Result<f64> {
    if m == 0 || m >= n || b == 0 || b > n {
        return Err(Error::invalid(format!("need 1 <= m <= n-1 and 1 <= b <= n, got n={n}, m={m}, b={b}")));
    }
    let (nf, mf, bf) = (n as f64, m as f64, b as f64);
    Ok(nf * (nf - mf) / ((nf - 1.0).powi(2) * bf) * (1.0 + (bf / nf) * (nf - mf - 1.0) / mf))
}

pub mod oracle {
    //! Brute-force enumeration over every subset.

    use super::*;

    /// All size-`k` subsets of `{0..n-1}` in lexicographic order.
    pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        if k > n {
            return out;
        }
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(idx.clone());
            let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
                return out;
            };
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }

    /// Exact mean and variance of the overlap `|K ∩ {0..m-1}|` over all
    /// size-`b` subsets `K`.
    pub fn enumerate_hypergeom(n: usize, m: usize, b: usize) -> (f64, f64) {
        let overlaps: Vec<f64> = combinations(n, b)
            .iter()
            .map(|k| k.iter().filter(|&&i| i < m).count() as f64)
            .collect();
        let count = overlaps.len() as f64;
        let mean = overlaps.iter().sum::<f64>() / count;
        let var = overlaps.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / count;
        (mean, var)
    }

    fn sample_mean(population: &[RealVec], idx: &[usize]) -> Vec<f64> {
        let d = population[0].len();
        let mut m = vec![0.0; d];
        for &i in idx {
            for (a, v) in m.iter_mut().zip(population[i].iter()) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= idx.len() as f64);
        m
    }

    /// Exact moments over all ordered pairs of disjoint samples.
    pub fn enumerate_disjoint_cov(population: &[RealVec], n1: usize, n2: usize) -> DisjointCov {
        let big_n = population.len();
        let d = population[0].len();
        let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for a in combinations(big_n, n1) {
            let rest: Vec<usize> = (0..big_n).filter(|i| !a.contains(i)).collect();
            for bsel in combinations(rest.len(), n2) {
                let b: Vec<usize> = bsel.iter().map(|&j| rest[j]).collect();
                pairs.push((sample_mean(population, &a), sample_mean(population, &b)));
            }
        }
        let count = pairs.len() as f64;
        let mut mu1 = vec![0.0; d];
        let mut mu2 = vec![0.0; d];
        for (y1, y2) in &pairs {
            for i in 0..d {
                mu1[i] += y1[i] / count;
                mu2[i] += y2[i] / count;
            }
        }
        let mut out = DisjointCov {
            var1: SquareMatrix::zeros(d),
            var2: SquareMatrix::zeros(d),
            cov: SquareMatrix::zeros(d),
        };
        for (y1, y2) in &pairs {
            for i in 0..d {
                for j in 0..d {
                    let k = i * d + j;
                    out.var1.entries[k] += (y1[i] - mu1[i]) * (y1[j] - mu1[j]) / count;
                    out.var2.entries[k] += (y2[i] - mu2[i]) * (y2[j] - mu2[j]) / count;
                    out.cov.entries[k] += (y1[i] - mu1[i]) * (y2[j] - mu2[j]) / count;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;

    fn scalars(v: &[f64]) -> Vec<RealVec> {
        v.iter().map(|&x| RealVec::new(vec![x]).unwrap()).collect()
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(10, 5).len(), 252);
        assert_eq!(combinations(4, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(combinations(4, 2).len(), 6);
    }

    #[test]
    fn subset_draw_frequencies() {
        let mut rng = RngStream::new(8, 1);
        let draws = 10_000;
        let ones = (0..draws)
            .filter(|_| draw_subset(2, 1, &mut rng).unwrap().indices() == [0])
            .count();
        let f = ones as f64 / draws as f64;
        assert!((f - 0.5).abs() < 0.01 + 1e-12, "{f}");
        assert!(draw_subset(5, 5, &mut rng).is_err());
        assert!(draw_subset(5, 0, &mut rng).is_err());
    }

    #[test]
    fn subset_draw_deterministic() {
        let a = draw_subset(20, 7, &mut RngStream::new(3, 3)).unwrap();
        let b = draw_subset(20, 7, &mut RngStream::new(3, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.complement().len(), 13);
    }

    #[test]
    fn hypergeom_known_values() {
        let (mean, var) = hypergeom_moments(10, 4, 5).unwrap();
        let (em, ev) = enumerate_hypergeom(10, 4, 5);
        assert!((mean - 2.0).abs() < 1e-15 && (var - 2.0 / 3.0).abs() < 1e-15);
        assert!((mean - em).abs() < 1e-12 && (var - ev).abs() < 1e-12);
        assert_eq!(hypergeom_moments(10, 10, 3).unwrap().1, 0.0);
        assert_eq!(hypergeom_moments(10, 4, 10).unwrap(), (4.0, 0.0));
        assert!(hypergeom_moments(10, 4, 0).is_err());
        assert!(hypergeom_moments(10, 11, 2).is_err());
    }

    #[test]
    fn disjoint_cov_known_values() {
        let pop = scalars(&[0.0, 1.0, 2.0]);
        let closed = disjoint_sample_cov(&pop, 1, 1).unwrap();
        let enumerated = enumerate_disjoint_cov(&pop, 1, 1);
        assert!((closed.var1.trace() - 2.0 / 3.0).abs() < 1e-15);
        assert!((closed.cov.trace() + 1.0 / 3.0).abs() < 1e-15);
        assert!(closed.var1.max_abs_diff(&enumerated.var1) < 1e-12);
        assert!(closed.cov.max_abs_diff(&enumerated.cov) < 1e-12);

        let pop = scalars(&[0.3, -1.0, 2.5, 4.0, 0.0]);
        let closed = disjoint_sample_cov(&pop, 4, 1).unwrap();
        let enumerated = enumerate_disjoint_cov(&pop, 4, 1);
        assert!(closed.var2.max_abs_diff(&enumerated.var2) < 1e-12);
        assert!(closed.cov.max_abs_diff(&enumerated.cov) < 1e-12);

        let constant = disjoint_sample_cov(&scalars(&[2.0; 4]), 2, 2).unwrap();
        assert_eq!(constant.var1.trace(), 0.0);
        assert!(disjoint_sample_cov(&scalars(&[1.0, 2.0]), 2, 1).is_err());
    }

    #[test]
    fn xi_coeff_known_values() {
        let c = xi_second_moment_coeff(10, 9, 2).unwrap();
        assert!((c - 10.0 / 162.0).abs() < 1e-15);
        assert!((xi_second_moment_coeff(10, 9, 10).unwrap() - 1.0 / 81.0).abs() < 1e-15);
        assert!(xi_second_moment_coeff(10, 10, 2).is_err());
    }

    #[test]
    fn xi_coeff_matches_bound_factor() {
        for &(n, m, b) in &[(10, 3, 4), (50, 25, 7), (7, 6, 1), (100, 1, 100)] {
            let (nf, mf, bf) = (n as f64, m as f64, b as f64);
            let lhs = xi_second_moment_coeff(n, m, b).unwrap() / (nf - mf);
            let rhs = nf / (nf - 1.0).powi(2) * (1.0 / bf + (nf - mf - 1.0) / (nf * mf));
            assert!((lhs - rhs).abs() <= 1e-14 * rhs.abs(), "{n} {m} {b}");
        }
    }

    #[test]
    fn batch_within_subset_probability() {
        let p = prob_batch_within_subset(20, 19, 4).unwrap();
        assert!((p - 0.8).abs() < 1e-15);
        assert_eq!(prob_batch_within_subset(5, 2, 3).unwrap(), 0.0);
    }

    #[test]
    fn minibatch_plan_validation() {
        assert!(MinibatchPlan::new(4, vec![vec![0, 0]]).is_err());
        assert!(MinibatchPlan::new(4, vec![vec![4]]).is_err());
        let plan = MinibatchPlan::draw(10, 3, 5, &mut RngStream::root(1)).unwrap();
        assert_eq!(plan.len(), 5);
        assert!(plan.batch(1).windows(2).all(|w| w[0] < w[1]));
    }

    proptest::proptest! {
        #[test]
        fn hypergeom_matches_enumeration(n in 1usize..=12, m_frac in 0.0f64..=1.0, b_frac in 0.0f64..=1.0) {
            let m = (m_frac * n as f64).round() as usize;
            let b = 1 + ((b_frac * (n - 1) as f64).round() as usize);
            let (mean, var) = hypergeom_moments(n, m, b).unwrap();
            let (em, ev) = enumerate_hypergeom(n, m, b);
            proptest::prop_assert!((mean - em).abs() <= 1e-12);
            proptest::prop_assert!((var - ev).abs() <= 1e-12);
        }

        #[test]
        fn disjoint_cov_matches_enumeration(
            pop in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 2..=8),
            a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            let big_n = pop.len();
            let n1 = 1 + (a * (big_n - 2) as f64).round() as usize;
            let n2 = 1 + (b * (big_n - n1 - 1) as f64).round() as usize;
            let pop: Vec<RealVec> = pop.into_iter().map(|v| RealVec::new(v).unwrap()).collect();
            let closed = disjoint_sample_cov(&pop, n1, n2).unwrap();
            let exact = enumerate_disjoint_cov(&pop, n1, n2);
            proptest::prop_assert!(closed.var1.max_abs_diff(&exact.var1) <= 1e-12);
            proptest::prop_assert!(closed.var2.max_abs_diff(&exact.var2) <= 1e-12);
            proptest::prop_assert!(closed.cov.max_abs_diff(&exact.cov) <= 1e-12);
        }
    }
}
