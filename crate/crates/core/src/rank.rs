//! Exact null distribution of the two-sample Wilcoxon rank-sum statistic.
//!
//! Under H0 the `m` test samples and `n` reference samples are exchangeable,
//! so every placement of the test samples among the `N = m + n` ordered
//! positions is equally likely. The number of placements whose rank sum is
//! `k` obeys
//!
//! ```text
//! pi[m,n](k) = pi[m,n-1](k) + pi[m-1,n](k - m - n)
//! ```
//!
//! with `pi[i,0](i(i+1)/2) = 1` and `pi[0,j](0) = 1`. Counts are kept in
//! the Mann-Whitney coordinate `u = k - m(m+1)/2 in [0, m*n]` and as
//! arbitrary-precision integers, so tail probabilities down to 1e-12 and
//! below are formed from exact sums and a single final division.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

/// Default ceiling on `m * n`, the number of support points minus one.
pub const DEFAULT_SUPPORT_CAP: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("m + n must be at least 1")]
    EmptyDesign,
    #[error("support of (m={m}, n={n}) has {support} points, above the cap of {cap}")]
    SupportTooLarge { m: usize, n: usize, support: u64, cap: u64 },
    #[error("design false-alarm probability {0} is outside (0, 1]")]
    InvalidPfa(f64),
    #[error("test and reference sample lists must both be nonempty")]
    EmptySamples,
}

/// Exact null PMF of `S[m,n]` as counts of equally likely arrangements.
#[derive(Debug, Clone)]
pub struct ExactRankDistribution {
    m: usize,
    n: usize,
    counts: Vec<BigUint>,
    total: BigUint,
    /// `tails[u] = P{U >= u}` for `u in 0..=m*n+1`.
    tails: Vec<f64>,
}

/// Integer decision threshold for a design false-alarm probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankThreshold {
    /// Threshold on the rank sum `S`.
    pub t_w: u64,
    /// Threshold on the Mann-Whitney count, `t_w - m(m+1)/2`.
    pub t_mw: u64,
    /// Exact `P{S >= t_w}` under H0; 0 when the detector can never fire.
    pub achieved_pfa: f64,
}

impl RankThreshold {
    #[inline]
    pub fn fires(&self, r_mw: u64) -> bool {
        r_mw >= self.t_mw
    }
}

/// Builds the exact distribution with the default support cap.
pub fn build_distribution(m: usize, n: usize) -> Result<ExactRankDistribution, RankError> {
    build_distribution_capped(m, n, DEFAULT_SUPPORT_CAP)
}

pub fn build_distribution_capped(
    m: usize,
    n: usize,
    cap: u64,
) -> Result<ExactRankDistribution, RankError> {
    if m + n == 0 {
        return Err(RankError::EmptyDesign);
    }
    let support = (m as u64).saturating_mul(n as u64);
    if support > cap {
        return Err(RankError::SupportTooLarge { m, n, support, cap });
    }
    let counts = rank_sum_counts(m, n);
    let total = binomial(m + n, m.min(n));
    let tails = tail_table(&counts, &total);
    Ok(ExactRankDistribution { m, n, counts, total, tails })
}

/// Rolling recurrence over the reference count. The count table is
/// symmetric in `(m, n)`, so rows run over the smaller of the two.
fn rank_sum_counts(m: usize, n: usize) -> Vec<BigUint> {
    let (rows, cols) = if m <= n { (m, n) } else { (n, m) };
    // rows[i] holds c[i, j](u) for u in 0..=i*j at the current column j.
    // Column j = 0 is the boundary c[i, 0] = [1] for every i, and row 0
    // stays at c[0, j] = [1] for every j.
    let mut table: Vec<Vec<BigUint>> = (0..=rows).map(|_| vec![BigUint::from(1u8)]).collect();
    for j in 1..=cols {
        for i in 1..=rows {
            let (lower, upper) = table.split_at_mut(i);
            let prev = &lower[i - 1];
            let cur = &mut upper[0];
            cur.resize(i * j + 1, BigUint::zero());
            // c[i, j](u) = c[i, j-1](u) + c[i-1, j](u - j)
            for (dst, src) in cur[j..].iter_mut().zip(prev.iter()) {
                *dst += src;
            }
        }
    }
    table.pop().unwrap_or_default()
}

fn tail_table(counts: &[BigUint], total: &BigUint) -> Vec<f64> {
    let mut tails = vec![0.0; counts.len() + 1];
    let mut acc = BigUint::zero();
    for u in (0..counts.len()).rev() {
        acc += &counts[u];
        tails[u] = big_ratio(&acc, total);
    }
    tails
}

/// `num / den` rounded once, valid for operands far beyond `f64` range.
pub fn big_ratio(num: &BigUint, den: &BigUint) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    if num.bits() <= 64 && den.bits() <= 64 {
        // Exact operands below 2^53 give a correctly rounded quotient.
        return num.to_f64().unwrap_or(f64::NAN) / den.to_f64().unwrap_or(f64::NAN);
    }
    let ns = num.bits().saturating_sub(64);
    let ds = den.bits().saturating_sub(64);
    let nt = (num >> ns).to_f64().unwrap_or(f64::NAN);
    let dt = (den >> ds).to_f64().unwrap_or(f64::NAN);
    let exp = ns as i64 - ds as i64;
    let exp = exp.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
    (nt / dt) * 2f64.powi(exp)
}

/// Exact binomial coefficient.
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u8);
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

impl ExactRankDistribution {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Counts indexed by the Mann-Whitney value `u = k - m(m+1)/2`.
    pub fn counts(&self) -> &[BigUint] {
        &self.counts
    }

    /// `binomial(m + n, m)`.
    pub fn total(&self) -> &BigUint {
        &self.total
    }

    /// Smallest attainable rank sum, `m(m+1)/2`.
    pub fn support_min(&self) -> u64 {
        let m = self.m as u64;
        m * (m + 1) / 2
    }

    /// Largest attainable rank sum, `m(m+2n+1)/2`.
    pub fn support_max(&self) -> u64 {
        self.support_min() + self.mw_max()
    }

    /// Largest attainable Mann-Whitney count, `m * n`.
    pub fn mw_max(&self) -> u64 {
        (self.m as u64) * (self.n as u64)
    }

    /// `P{S = k}`.
    pub fn pmf(&self, k: i64) -> f64 {
        match self.mw_index(k) {
            Some(u) if u < self.counts.len() => big_ratio(&self.counts[u], &self.total),
            _ => 0.0,
        }
    }

    fn mw_index(&self, k: i64) -> Option<usize> {
        let u = k as i128 - self.support_min() as i128;
        usize::try_from(u).ok()
    }

    /// `P{S >= threshold}`; thresholds outside the support are allowed.
    pub fn tail_probability(&self, threshold: i64) -> f64 {
        let u = threshold as i128 - self.support_min() as i128;
        if u <= 0 {
            1.0
        } else if u as u128 > self.mw_max() as u128 {
            0.0
        } else {
            self.tails[u as usize]
        }
    }

    /// `P{R_MW >= r}` in Mann-Whitney units.
    pub fn mw_tail(&self, r: u64) -> f64 {
        self.tails.get(r as usize).copied().unwrap_or(0.0)
    }

    /// Exact tail sum `sum_{u >= r} counts[u]`.
    pub fn mw_tail_count(&self, r: u64) -> BigUint {
        self.counts.iter().skip(r as usize).sum()
    }

    /// Smallest threshold whose exact tail does not exceed `design_pfa`.
    ///
    /// When even the top support point is too likely, the threshold sits
    /// one above the support maximum and the detector never fires.
    pub fn threshold_for_pfa(&self, design_pfa: f64) -> Result<RankThreshold, RankError> {
        if !(design_pfa > 0.0 && design_pfa <= 1.0) {
            return Err(RankError::InvalidPfa(design_pfa));
        }
        // tails is nonincreasing, ending in 0 at u = m*n + 1.
        let u = self.tails.partition_point(|&t| t > design_pfa);
        Ok(RankThreshold {
            t_w: self.support_min() + u as u64,
            t_mw: u as u64,
            achieved_pfa: self.tails[u],
        })
    }

    /// Exact mean of `S`.
    pub fn mean_exact(&self) -> BigRational {
        let (s1, _) = self.moment_sums();
        BigRational::new(s1, BigInt::from(self.total.clone()))
    }

    /// Exact variance of `S`.
    pub fn variance_exact(&self) -> BigRational {
        let (s1, s2) = self.moment_sums();
        let total = BigInt::from(self.total.clone());
        let mean = BigRational::new(s1, total.clone());
        BigRational::new(s2, total) - &mean * &mean
    }

    /// `(sum k * count_k, sum k^2 * count_k)` over the rank-sum support.
    fn moment_sums(&self) -> (BigInt, BigInt) {
        let base = self.support_min();
        let mut s1 = BigInt::zero();
        let mut s2 = BigInt::zero();
        for (u, c) in self.counts.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let k = BigInt::from(base + u as u64);
            let c = BigInt::from(c.clone());
            let kc = &k * &c;
            s2 += &kc * &k;
            s1 += kc;
        }
        (s1, s2)
    }
}

type Cache = Mutex<HashMap<(usize, usize), Arc<ExactRankDistribution>>>;

fn cache() -> &'static Cache {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Process-wide memoized [`build_distribution`].
///
/// Concurrent first access may build the same table twice; the first
/// inserted copy wins and both are identical.
pub fn cached_distribution(m: usize, n: usize) -> Result<Arc<ExactRankDistribution>, RankError> {
    if let Some(d) = cache().lock().expect("rank cache poisoned").get(&(m, n)) {
        return Ok(Arc::clone(d));
    }
    let built = Arc::new(build_distribution(m, n)?);
    let mut guard = cache().lock().expect("rank cache poisoned");
    Ok(Arc::clone(guard.entry((m, n)).or_insert(built)))
}

/// Number of `(test, reference)` pairs with `test >= reference`.
///
/// A tie scores for the test sample, exactly as the unit step `u(0) = 1`.
pub fn mann_whitney_statistic(test: &[f64], reference: &[f64]) -> Result<u64, RankError> {
    if test.is_empty() || reference.is_empty() {
        return Err(RankError::EmptySamples);
    }
    Ok(count_pairs_ge(test, reference))
}

/// Rank-sum statistic `R_MW + m(m+1)/2`.
pub fn wilcoxon_statistic(test: &[f64], reference: &[f64]) -> Result<u64, RankError> {
    let m = test.len() as u64;
    Ok(mann_whitney_statistic(test, reference)? + m * (m + 1) / 2)
}

/// Unchecked pair count used in the per-window hot loop.
#[inline]
pub(crate) fn count_pairs_ge(test: &[f64], reference: &[f64]) -> u64 {
    let mut acc = 0u64;
    for &y in reference {
        for &x in test {
            acc += (x >= y) as u64;
        }
    }
    acc
}
