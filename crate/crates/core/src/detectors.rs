//! Decision rules: the Wilcoxon rank-sum detector and four parametric
//! CFAR baselines.
//!
//! Each rule splits into a measurement of the window ([`WindowStat`]) and a
//! comparison against a threshold set by the design false-alarm rate, so a
//! sweep over design rates can reuse one pass over the image.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::clutter::{self, gamma_ml, mean_std, weibull_ml_with, ClutterError, ClutterModel};
use crate::rank::{cached_distribution, count_pairs_ge, ExactRankDistribution, RankError, RankThreshold};
use crate::special::{gamma_p, ln_gamma, normal_upper_quantile, solve_increasing};

/// Fewest reference samples the trimming and truncation estimators accept.
pub const MIN_ROBUST_REFERENCE: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("expected {expected_m} test and {expected_n} reference samples, got {got_m} and {got_n}")]
    SizeMismatch { expected_m: usize, expected_n: usize, got_m: usize, got_n: usize },
    #[error("parametric detectors take a single test pixel (t = 1), got {0}")]
    TestLength(usize),
    #[error("need at least {need} reference samples, got {got}")]
    TooFewReference { need: usize, got: usize },
    #[error("reference window has zero spread")]
    Degenerate,
    #[error("{0} estimator did not converge")]
    NonConvergence(&'static str),
    #[error("reference sample {0} is not positive")]
    NonPositiveSample(f64),
    #[error("every reference sample was trimmed")]
    AllTrimmed,
    #[error("truncated mean {mean} is not below {bound}, so the truncated Gamma likelihood has no maximum")]
    NoTruncatedSolution { mean: f64, bound: f64 },
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Clutter(#[from] ClutterError),
}

impl DetectError {
    /// Errors caused by the data in one window rather than by configuration.
    /// Whole-image runs mark such windows clear and carry on.
    pub fn is_recoverable(&self) -> bool {
        matches!(
            self,
            Self::Degenerate
                | Self::NonConvergence(_)
                | Self::NonPositiveSample(_)
                | Self::AllTrimmed
                | Self::NoTruncatedSolution { .. }
        )
    }
}

fn from_fit(e: ClutterError) -> DetectError {
    match e {
        ClutterError::ZeroVariance => DetectError::Degenerate,
        ClutterError::NonConvergence(what) => DetectError::NonConvergence(what),
        ClutterError::NonPositiveSample { value, .. } => DetectError::NonPositiveSample(value),
        ClutterError::InsufficientSamples { need, got } => DetectError::TooFewReference { need, got },
        other => DetectError::Clutter(other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Wilcoxon,
    TwoParameter,
    Weibull,
    TruncatedGamma,
    TrimmedRayleigh,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 5] =
        [Self::Wilcoxon, Self::TwoParameter, Self::Weibull, Self::TruncatedGamma, Self::TrimmedRayleigh];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Wilcoxon => "wilcoxon",
            Self::TwoParameter => "two_parameter",
            Self::Weibull => "weibull",
            Self::TruncatedGamma => "truncated_gamma",
            Self::TrimmedRayleigh => "trimmed_rayleigh",
        }
    }

    pub fn is_parametric(&self) -> bool {
        *self != Self::Wilcoxon
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "wilcoxon" | "mann_whitney" => Self::Wilcoxon,
            "two_parameter" | "gaussian" => Self::TwoParameter,
            "weibull" => Self::Weibull,
            "truncated_gamma" | "ts_cfar" => Self::TruncatedGamma,
            "trimmed_rayleigh" | "ais_rcfar" => Self::TrimmedRayleigh,
            other => return Err(DetectError::InvalidConfig(format!("unknown detector {other:?}"))),
        })
    }
}

/// How the truncated-Gamma detector obtains its shape parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeMode {
    Fixed(f64),
    /// Equivalent number of looks of a global clutter sample.
    Enl,
    /// Gamma maximum-likelihood shape of a global clutter sample.
    Ml,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub design_pfa: f64,
    /// Fraction of the largest reference samples discarded by the
    /// truncated-Gamma detector.
    pub truncation_ratio: f64,
    /// Trimming factor of the trimmed-Rayleigh detector.
    pub trim_factor: f64,
    pub shape: ShapeMode,
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind, design_pfa: f64) -> Self {
        Self { kind, design_pfa, truncation_ratio: 0.10, trim_factor: 2.0, shape: ShapeMode::Enl }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.design_pfa > 0.0 && self.design_pfa < 1.0) {
            return Err(DetectError::InvalidConfig(format!("design P_FA {} is outside (0, 1)", self.design_pfa)));
        }
        if !(0.0..1.0).contains(&self.truncation_ratio) {
            return Err(DetectError::InvalidConfig(format!(
                "truncation ratio {} is outside [0, 1)",
                self.truncation_ratio
            )));
        }
        if !(self.trim_factor > 0.0 && self.trim_factor.is_finite()) {
            return Err(DetectError::InvalidConfig(format!("trim factor {} must be positive", self.trim_factor)));
        }
        if let ShapeMode::Fixed(k) = self.shape {
            if !(k > 0.0 && k.is_finite()) {
                return Err(DetectError::InvalidConfig(format!("Gamma shape {k} must be positive")));
            }
        }
        Ok(())
    }

    /// Replaces an estimated Gamma shape by its value on the intensities of
    /// the positive entries of `samples`.
    pub fn resolve_shape(&self, samples: &[f64]) -> Result<Self, DetectError> {
        let positive = || samples.iter().copied().filter(|&x| x > 0.0).collect::<Vec<f64>>();
        let shape = match self.shape {
            ShapeMode::Fixed(k) => k,
            ShapeMode::Enl => clutter::estimate_enl(&positive())?,
            ShapeMode::Ml => {
                let intensity: Vec<f64> = positive().iter().map(|x| x * x).collect();
                gamma_ml(&intensity).map_err(DetectError::Clutter)?.0
            }
        };
        Ok(Self { shape: ShapeMode::Fixed(shape), ..*self })
    }
}

/// What a rule measures on one window, independent of the design rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowStat {
    /// Mann-Whitney count of the window.
    Rank(u64),
    /// Test pixel with the reference mean and standard deviation.
    Location { x: f64, mean: f64, std: f64 },
    /// Test pixel with a fitted Weibull shape and scale.
    Weibull { x: f64, shape: f64, scale: f64 },
    /// Test value with a fitted scale; the threshold is the scale times a
    /// rule-specific factor. The truncated-Gamma rule works on intensity,
    /// so its `x` is the squared test pixel.
    Scale { x: f64, scale: f64 },
}

#[derive(Debug, Clone)]
enum Prepared {
    Wilcoxon { dist: Arc<ExactRankDistribution>, threshold: RankThreshold },
    TwoParameter { z: f64 },
    Weibull { neg_ln_pfa: f64 },
    TruncatedGamma { shape: f64, factor: f64 },
    TrimmedRayleigh { factor: f64 },
}

/// A configured rule with its threshold precomputed for `(m, n)`.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    m: usize,
    n: usize,
    prepared: Prepared,
}

impl Detector {
    /// Prepares a rule for `m` test and `n` reference samples. A
    /// truncated-Gamma configuration must carry a fixed shape, see
    /// [`DetectorConfig::resolve_shape`].
    pub fn new(config: DetectorConfig, m: usize, n: usize) -> Result<Self, DetectError> {
        config.validate()?;
        if config.kind.is_parametric() && m != 1 {
            return Err(DetectError::TestLength(m));
        }
        let need = match config.kind {
            DetectorKind::Wilcoxon => 1,
            DetectorKind::TwoParameter | DetectorKind::Weibull => 2,
            DetectorKind::TruncatedGamma | DetectorKind::TrimmedRayleigh => MIN_ROBUST_REFERENCE,
        };
        if n < need {
            return Err(DetectError::TooFewReference { need, got: n });
        }
        let p = config.design_pfa;
        let prepared = match config.kind {
            DetectorKind::Wilcoxon => {
                let dist = cached_distribution(m, n)?;
                let threshold = dist.threshold_for_pfa(p)?;
                Prepared::Wilcoxon { dist, threshold }
            }
            DetectorKind::TwoParameter => Prepared::TwoParameter { z: normal_upper_quantile(p) },
            DetectorKind::Weibull => Prepared::Weibull { neg_ln_pfa: -p.ln() },
            DetectorKind::TruncatedGamma => {
                let shape = match config.shape {
                    ShapeMode::Fixed(k) => k,
                    _ => return Err(DetectError::InvalidConfig("Gamma shape must be resolved before use".into())),
                };
                Prepared::TruncatedGamma { shape, factor: gamma_upper_quantile(shape, p) }
            }
            DetectorKind::TrimmedRayleigh => Prepared::TrimmedRayleigh { factor: rayleigh_factor(p) },
        };
        Ok(Self { config, m, n, prepared })
    }

    /// Same rule at another design rate.
    pub fn with_design_pfa(&self, design_pfa: f64) -> Result<Self, DetectError> {
        Self::new(DetectorConfig { design_pfa, ..self.config }, self.m, self.n)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn kind(&self) -> DetectorKind {
        self.config.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Exact false-alarm rate of the Wilcoxon threshold; the design rate for
    /// parametric rules, whose rate holds only when their model does.
    pub fn achieved_pfa(&self) -> f64 {
        match &self.prepared {
            Prepared::Wilcoxon { threshold, .. } => threshold.achieved_pfa,
            _ => self.config.design_pfa,
        }
    }

    pub fn rank_threshold(&self) -> Option<RankThreshold> {
        match &self.prepared {
            Prepared::Wilcoxon { threshold, .. } => Some(*threshold),
            _ => None,
        }
    }

    pub fn distribution(&self) -> Option<&ExactRankDistribution> {
        match &self.prepared {
            Prepared::Wilcoxon { dist, .. } => Some(dist),
            _ => None,
        }
    }

    /// Gamma shape used by the truncated-Gamma rule.
    pub fn gamma_shape(&self) -> Option<f64> {
        match self.prepared {
            Prepared::TruncatedGamma { shape, .. } => Some(shape),
            _ => None,
        }
    }

    pub fn measure(&self, test: &[f64], reference: &[f64]) -> Result<WindowStat, DetectError> {
        if test.len() != self.m || reference.len() != self.n {
            return Err(DetectError::SizeMismatch {
                expected_m: self.m,
                expected_n: self.n,
                got_m: test.len(),
                got_n: reference.len(),
            });
        }
        let x = test[0];
        Ok(match self.prepared {
            Prepared::Wilcoxon { .. } => WindowStat::Rank(count_pairs_ge(test, reference)),
            Prepared::TwoParameter { .. } => {
                let (mean, std) = location_scale(reference)?;
                WindowStat::Location { x, mean, std }
            }
            Prepared::Weibull { .. } => {
                let (shape, scale) = weibull_ml_with(reference, &mut Vec::with_capacity(reference.len()))
                    .map_err(from_fit)?;
                WindowStat::Weibull { x, shape, scale }
            }
            Prepared::TruncatedGamma { shape, .. } => {
                let mut intensity: Vec<f64> = reference.iter().map(|v| v * v).collect();
                let scale = truncated_gamma_scale_in_place(&mut intensity, self.config.truncation_ratio, shape)?;
                WindowStat::Scale { x: x * x, scale }
            }
            Prepared::TrimmedRayleigh { .. } => {
                WindowStat::Scale { x, scale: trimmed_rayleigh_scale(reference, self.config.trim_factor)?.0 }
            }
        })
    }

    /// Whether a measured window exceeds this detector's threshold.
    #[inline]
    pub fn fires(&self, stat: &WindowStat) -> bool {
        match (&self.prepared, *stat) {
            (Prepared::Wilcoxon { threshold, .. }, WindowStat::Rank(r)) => threshold.fires(r),
            (Prepared::TwoParameter { z }, WindowStat::Location { x, mean, std }) => x > mean + z * std,
            (Prepared::Weibull { neg_ln_pfa }, WindowStat::Weibull { x, shape, scale }) => {
                x > weibull_threshold(shape, scale, *neg_ln_pfa)
            }
            (Prepared::TruncatedGamma { factor, .. }, WindowStat::Scale { x, scale })
            | (Prepared::TrimmedRayleigh { factor }, WindowStat::Scale { x, scale }) => x > scale * factor,
            _ => false,
        }
    }

    pub fn decide(&self, test: &[f64], reference: &[f64]) -> Result<bool, DetectError> {
        Ok(self.fires(&self.measure(test, reference)?))
    }
}

#[inline]
fn weibull_threshold(shape: f64, scale: f64, neg_ln_pfa: f64) -> f64 {
    scale * neg_ln_pfa.powf(1.0 / shape)
}

fn rayleigh_factor(pfa: f64) -> f64 {
    (-2.0 * pfa.ln()).sqrt()
}

/// Upper quantile of Gamma(shape, 1).
pub fn gamma_upper_quantile(shape: f64, pfa: f64) -> f64 {
    ClutterModel::gamma(shape, 1.0).map_or(f64::NAN, |m| m.upper_quantile(pfa))
}

fn location_scale(reference: &[f64]) -> Result<(f64, f64), DetectError> {
    if reference.len() < 2 {
        return Err(DetectError::TooFewReference { need: 2, got: reference.len() });
    }
    let (mean, std) = mean_std(reference);
    if !(std > 0.0) {
        return Err(DetectError::Degenerate);
    }
    Ok((mean, std))
}

fn single(test: f64) -> [f64; 1] {
    [test]
}

/// Fires iff the Mann-Whitney count reaches `threshold.t_mw`.
pub fn decide_wilcoxon(
    test: &[f64],
    reference: &[f64],
    dist: &ExactRankDistribution,
    threshold: &RankThreshold,
) -> Result<bool, DetectError> {
    if test.len() != dist.m() || reference.len() != dist.n() {
        return Err(DetectError::SizeMismatch {
            expected_m: dist.m(),
            expected_n: dist.n(),
            got_m: test.len(),
            got_n: reference.len(),
        });
    }
    Ok(threshold.fires(count_pairs_ge(test, reference)))
}

/// Two-parameter CFAR: fires iff `x > mean + z std` with maximum-likelihood
/// moments of the reference.
pub fn decide_two_parameter(test: f64, reference: &[f64], design_pfa: f64) -> Result<bool, DetectError> {
    let d = Detector::new(DetectorConfig::new(DetectorKind::TwoParameter, design_pfa), 1, reference.len())?;
    d.decide(&single(test), reference)
}

/// Weibull CFAR: fires iff `x > b (-ln P_FA)^(1/c)` with `(c, b)` fitted by
/// maximum likelihood.
pub fn decide_weibull(test: f64, reference: &[f64], design_pfa: f64) -> Result<bool, DetectError> {
    let d = Detector::new(DetectorConfig::new(DetectorKind::Weibull, design_pfa), 1, reference.len())?;
    d.decide(&single(test), reference)
}

/// Truncated-statistics Gamma CFAR with a known shape. Pixels are
/// amplitudes; the Gamma model and its threshold apply to intensity `x^2`.
pub fn decide_truncated_gamma(
    test: f64,
    reference: &[f64],
    design_pfa: f64,
    truncation_ratio: f64,
    shape: f64,
) -> Result<bool, DetectError> {
    let config = DetectorConfig {
        truncation_ratio,
        shape: ShapeMode::Fixed(shape),
        ..DetectorConfig::new(DetectorKind::TruncatedGamma, design_pfa)
    };
    Detector::new(config, 1, reference.len())?.decide(&single(test), reference)
}

/// Rayleigh CFAR on an iteratively trimmed reference.
pub fn decide_trimmed_rayleigh(
    test: f64,
    reference: &[f64],
    design_pfa: f64,
    trim_factor: f64,
) -> Result<bool, DetectError> {
    let config = DetectorConfig { trim_factor, ..DetectorConfig::new(DetectorKind::TrimmedRayleigh, design_pfa) };
    Detector::new(config, 1, reference.len())?.decide(&single(test), reference)
}

/// Number of largest samples the truncated-Gamma rule discards.
pub fn truncation_count(n: usize, truncation_ratio: f64) -> usize {
    // Guard against products such as 0.1 * 780 landing a hair above 78.
    ((truncation_ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Gamma scale by maximum likelihood on the reference with its largest
/// `ceil(R_t n)` samples discarded, treating the smallest discarded sample
/// `c` as a right-truncation point.
///
/// The score equation is `mean = theta (k - y g(y) / P(k, y))`, `y = c /
/// theta`, `g` the Gamma(k, 1) density. Its right side increases from 0 to
/// `c k / (k + 1)` in `theta`, so a root exists exactly when the kept mean
/// is below that bound. With nothing discarded the estimate is `mean / k`.
pub fn truncated_gamma_scale(reference: &[f64], truncation_ratio: f64, shape: f64) -> Result<f64, DetectError> {
    truncated_gamma_scale_in_place(&mut reference.to_vec(), truncation_ratio, shape)
}

fn truncated_gamma_scale_in_place(sorted: &mut [f64], truncation_ratio: f64, shape: f64) -> Result<f64, DetectError> {
    let n = sorted.len();
    if n < MIN_ROBUST_REFERENCE {
        return Err(DetectError::TooFewReference { need: MIN_ROBUST_REFERENCE, got: n });
    }
    if let Some(&bad) = sorted.iter().find(|&&x| !(x > 0.0)) {
        return Err(DetectError::NonPositiveSample(bad));
    }
    let drop = truncation_count(n, truncation_ratio);
    sorted.sort_unstable_by(f64::total_cmp);
    let kept = &sorted[..n - drop];
    if kept.is_empty() {
        return Err(DetectError::AllTrimmed);
    }
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    if drop == 0 {
        return Ok(mean / shape);
    }
    let c = sorted[n - drop];
    let bound = c * shape / (shape + 1.0);
    if !(mean < bound) {
        return Err(DetectError::NoTruncatedSolution { mean, bound });
    }
    let ln_gk = ln_gamma(shape);
    let truncated_mean = |theta: f64| {
        let y = c / theta;
        let p = gamma_p(shape, y);
        let ratio = (shape * y.ln() - y - ln_gk - p.ln()).exp();
        theta * (shape - ratio)
    };
    let g = |ln_theta: f64| {
        let v = truncated_mean(ln_theta.exp()) - mean;
        if v.is_nan() {
            // y underflowed P(k, y); in that limit the right side tends to
            // c k / (k + 1), which lies above the mean.
            bound - mean
        } else {
            v
        }
    };
    solve_increasing(g, (mean / shape).ln(), 0.5)
        .map(f64::exp)
        .ok_or(DetectError::NonConvergence("truncated Gamma"))
}

/// Rayleigh scale with iterative trimming: samples above
/// `lambda sqrt(2) sigma` are set aside and `sigma` re-estimated until the
/// kept set stops changing or 20 passes have run. Returns the scale and the
/// number of passes.
///
/// The first pass is the plain estimate `sqrt(sum x^2 / 2n)`. Later passes
/// account for the cut: with `Y = x^2` exponential of mean `2 sigma^2`
/// truncated at `T`, the likelihood equation is
/// `mean(Y) = mu - T / (exp(T / mu) - 1)`.
pub fn trimmed_rayleigh_scale(reference: &[f64], trim_factor: f64) -> Result<(f64, usize), DetectError> {
    let n = reference.len();
    if n < MIN_ROBUST_REFERENCE {
        return Err(DetectError::TooFewReference { need: MIN_ROBUST_REFERENCE, got: n });
    }
    let squares: Vec<f64> = reference.iter().map(|x| x * x).collect();
    let (_, total) = kept_sum(&squares, f64::INFINITY);
    if !(total > 0.0) {
        return Err(DetectError::Degenerate);
    }
    let mut sigma = (total / (2.0 * n as f64)).sqrt();
    let mut kept_prev = n;
    for pass in 1..=20 {
        let cut = trim_factor * std::f64::consts::SQRT_2 * sigma;
        let (count, sum) = kept_sum(&squares, cut * cut);
        if count == 0 || sum == 0.0 {
            return Err(DetectError::AllTrimmed);
        }
        if count == kept_prev && pass > 1 {
            return Ok((sigma, pass - 1));
        }
        kept_prev = count;
        sigma = truncated_rayleigh_ml(sum / count as f64, cut * cut);
    }
    Ok((sigma, 20))
}

/// Count and sum of the squares not above `cut2`, accumulated in eight
/// lanes so the loop vectorizes.
fn kept_sum(squares: &[f64], cut2: f64) -> (usize, f64) {
    const LANES: usize = 8;
    let (mut count, mut sum) = ([0.0f64; LANES], [0.0f64; LANES]);
    let chunks = squares.chunks_exact(LANES);
    let tail = chunks.remainder();
    for chunk in chunks {
        for i in 0..LANES {
            let keep = if chunk[i] <= cut2 { 1.0 } else { 0.0 };
            count[i] += keep;
            sum[i] += keep * chunk[i];
        }
    }
    for (i, &y) in tail.iter().enumerate() {
        let keep = if y <= cut2 { 1.0 } else { 0.0 };
        count[i] += keep;
        sum[i] += keep * y;
    }
    (count.iter().sum::<f64>() as usize, sum.iter().sum())
}

/// Rayleigh scale from the mean `y_bar` of squared samples cut at `t`.
fn truncated_rayleigh_ml(y_bar: f64, t: f64) -> f64 {
    if !(y_bar < 0.5 * t) {
        return (0.5 * y_bar).sqrt();
    }
    let g = |ln_mu: f64| {
        let mu = ln_mu.exp();
        let v = mu - t / (t / mu).exp_m1() - y_bar;
        if v.is_nan() {
            mu - y_bar
        } else {
            v
        }
    };
    solve_increasing(g, y_bar.ln(), 0.5).map_or((0.5 * y_bar).sqrt(), |ln_mu| (0.5 * ln_mu.exp()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank::build_distribution;

    #[test]
    fn kind_names_round_trip() {
        for k in DetectorKind::ALL {
            assert_eq!(k.name().parse::<DetectorKind>().unwrap(), k);
        }
        assert_eq!("ts-cfar".parse::<DetectorKind>().unwrap(), DetectorKind::TruncatedGamma);
        assert!("ca".parse::<DetectorKind>().is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let d = build_distribution(2, 2).unwrap();
        let th = d.threshold_for_pfa(0.2).unwrap();
        assert_eq!(th.t_w, 7);
        assert!(decide_wilcoxon(&[10.0, 20.0], &[1.0, 2.0], &d, &th).unwrap());
        assert!(!decide_wilcoxon(&[10.0, 1.5], &[1.0, 2.0], &d, &th).unwrap());
        assert!(decide_wilcoxon(&[10.0], &[1.0, 2.0], &d, &th).is_err());

        let det = Detector::new(DetectorConfig::new(DetectorKind::Wilcoxon, 0.2), 2, 2).unwrap();
        assert_eq!(det.achieved_pfa(), 1.0 / 6.0);
        assert!(det.decide(&[5.0, 6.0], &[1.0, 2.0]).unwrap());
        assert!(!det.decide(&[0.5, 0.6], &[1.0, 2.0]).unwrap());
    }

    #[test]
    fn two_parameter_threshold() {
        // Reference with mean 10 and population std 2.
        let reference = [8.0, 12.0, 8.0, 12.0];
        assert!(decide_two_parameter(10.001, &reference, 0.5).unwrap());
        assert!(!decide_two_parameter(9.999, &reference, 0.5).unwrap());
        let p3 = 0.0013498980316300946;
        assert!(decide_two_parameter(16.0 + 1e-9, &reference, p3).unwrap());
        assert!(!decide_two_parameter(16.0 - 1e-9, &reference, p3).unwrap());
        assert_eq!(decide_two_parameter(1.0, &[3.0; 5], 0.01), Err(DetectError::Degenerate));
    }

    #[test]
    fn weibull_threshold_closed_forms() {
        assert!((weibull_threshold(1.0, 1.0, 3.0) - 3.0).abs() < 1e-15);
        assert!((weibull_threshold(2.0, 1.0, 1000f64.ln()) - 2.628260884878466).abs() < 1e-14);
        let xs = ClutterModel::weibull(1.7, 2.3).unwrap().sample(100_000, 3);
        let (c, b) = clutter::weibull_ml(&xs).unwrap();
        assert!((c / 1.7 - 1.0).abs() < 0.02 && (b / 2.3 - 1.0).abs() < 0.02);
        let mut with_zero = xs[..50].to_vec();
        with_zero[3] = 0.0;
        let e = decide_weibull(1.0, &with_zero, 1e-3).unwrap_err();
        assert_eq!(e, DetectError::NonPositiveSample(0.0));
        assert!(e.is_recoverable());
    }

    #[test]
    fn truncated_gamma_without_truncation_is_full_ml() {
        let reference: Vec<f64> = (1..=20).map(|i| i as f64 * 0.25).collect();
        let mean = reference.iter().sum::<f64>() / 20.0;
        let theta = truncated_gamma_scale(&reference, 0.0, 1.0).unwrap();
        assert_eq!(theta, mean);
        let p = (-5f64).exp();
        assert!((gamma_upper_quantile(1.0, p) - 5.0).abs() < 1e-12);
        // The rule thresholds intensity: fire iff x^2 > 5 mean(y^2).
        let mean_sq = reference.iter().map(|v| v * v).sum::<f64>() / 20.0;
        let edge = (5.0 * mean_sq).sqrt();
        assert!(decide_truncated_gamma(edge + 1e-9, &reference, p, 0.0, 1.0).unwrap());
        assert!(!decide_truncated_gamma(edge - 1e-9, &reference, p, 0.0, 1.0).unwrap());
        assert!((2.0 * gamma_upper_quantile(1.0, 1e-3) - 13.815510557964274).abs() < 1e-12);
    }

    #[test]
    fn truncated_gamma_score_equation_holds() {
        let xs = ClutterModel::gamma(2.5, 1.5).unwrap().sample(400, 4);
        let theta = truncated_gamma_scale(&xs, 0.1, 2.5).unwrap();
        let mut s = xs.clone();
        s.sort_by(f64::total_cmp);
        let kept = &s[..360];
        let c = s[360];
        let mean = kept.iter().sum::<f64>() / 360.0;
        let y = c / theta;
        let gy = ((2.5 - 1.0) * y.ln() - y - ln_gamma(2.5)).exp();
        let rhs = theta * (2.5 - y * gy / gamma_p(2.5, y));
        assert!((rhs - mean).abs() < 1e-12 * mean);
    }

    #[test]
    fn truncated_gamma_resists_outliers() {
        let mut xs = ClutterModel::gamma(3.33, 1.0).unwrap().sample(100_000, 5);
        for x in xs.iter_mut().step_by(20) {
            *x *= 50.0;
        }
        let robust = truncated_gamma_scale(&xs, 0.10, 3.33).unwrap();
        let naive = truncated_gamma_scale(&xs, 0.0, 3.33).unwrap();
        assert!((robust - 1.0).abs() < 0.05, "{robust}");
        assert!(naive > 1.5, "{naive}");
    }

    #[test]
    fn truncated_gamma_reports_missing_root() {
        // Kept samples pile up at the truncation point.
        let mut xs = vec![1.0; 18];
        xs.extend([1.0, 1.0]);
        let e = truncated_gamma_scale(&xs, 0.1, 2.0).unwrap_err();
        assert!(matches!(e, DetectError::NoTruncatedSolution { .. }));
        assert!(e.is_recoverable());
        assert_eq!(truncation_count(780, 0.1), 78);
        assert_eq!(truncation_count(248, 0.1), 25);
        assert_eq!(truncation_count(10, 0.0), 0);
    }

    #[test]
    fn rayleigh_thresholds() {
        assert!((rayleigh_factor((-2f64).exp()) - 2.0).abs() < 1e-15);
        assert!((rayleigh_factor(1e-4) - 4.291932052578694).abs() < 1e-14);
    }

    #[test]
    fn trimming_removes_outliers() {
        let mut xs = ClutterModel::rayleigh(1.0).unwrap().sample(500, 6);
        xs.extend([100.0; 10]);
        // The first cut, from the untrimmed estimate, already excludes every outlier.
        let plain = (xs.iter().map(|x| x * x).sum::<f64>() / (2.0 * xs.len() as f64)).sqrt();
        assert!(2.0 * std::f64::consts::SQRT_2 * plain < 100.0);
        let (sigma, passes) = trimmed_rayleigh_scale(&xs, 2.0).unwrap();
        assert!((sigma - 1.0).abs() < 0.05, "{sigma}");
        assert!(passes <= 20);
    }

    #[test]
    fn trimmed_scale_is_unbiased_on_clean_data() {
        let mut sum = 0.0;
        for seed in 0..200 {
            let xs = ClutterModel::rayleigh(2.0).unwrap().sample(248, 1000 + seed);
            sum += trimmed_rayleigh_scale(&xs, 2.0).unwrap().0;
        }
        assert!((sum / 200.0 / 2.0 - 1.0).abs() < 0.01, "{}", sum / 200.0);
    }

    #[test]
    fn parametric_rules_need_single_test_pixel() {
        let c = DetectorConfig::new(DetectorKind::Weibull, 1e-3);
        assert_eq!(Detector::new(c, 4, 780).unwrap_err(), DetectError::TestLength(4));
        let tg = DetectorConfig::new(DetectorKind::TruncatedGamma, 1e-3);
        assert!(matches!(Detector::new(tg, 1, 248), Err(DetectError::InvalidConfig(_))));
        assert!(Detector::new(DetectorConfig::new(DetectorKind::Wilcoxon, 1.0), 1, 10).is_err());
        let bad = DetectorConfig { truncation_ratio: 1.0, ..tg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shape_resolution() {
        let xs = ClutterModel::rayleigh(1.0).unwrap().sample(50_000, 7);
        let enl = DetectorConfig::new(DetectorKind::TruncatedGamma, 1e-3).resolve_shape(&xs).unwrap();
        match enl.shape {
            ShapeMode::Fixed(k) => assert!((k - 1.0).abs() < 0.05),
            _ => unreachable!(),
        }
        let ml = DetectorConfig { shape: ShapeMode::Ml, ..enl }.resolve_shape(&xs).unwrap();
        // Rayleigh amplitude has exponential intensity, shape 1.
        assert!(matches!(ml.shape, ShapeMode::Fixed(k) if (k - 1.0).abs() < 0.05));
        let d = Detector::new(ml, 1, 248).unwrap();
        assert!(d.gamma_shape().is_some());
    }

    #[test]
    fn scaling_leaves_decisions_unchanged() {
        let model = ClutterModel::weibull(1.5, 1.0).unwrap();
        for kind in DetectorKind::ALL.into_iter().filter(|k| k.is_parametric()) {
            let config = DetectorConfig { shape: ShapeMode::Fixed(2.0), ..DetectorConfig::new(kind, 0.05) };
            let d = Detector::new(config, 1, 120).unwrap();
            for seed in 0..40 {
                let mut xs = model.sample(121, seed);
                let x = xs.pop().unwrap();
                let base = d.decide(&[x], &xs).unwrap();
                for alpha in [0.37, 3.1, 1234.5] {
                    let scaled: Vec<f64> = xs.iter().map(|v| v * alpha).collect();
                    assert_eq!(d.decide(&[x * alpha], &scaled).unwrap(), base, "{kind} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn measure_then_rethreshold_matches_decide() {
        let model = ClutterModel::gamma(2.0, 1.0).unwrap();
        for kind in DetectorKind::ALL {
            let m = if kind.is_parametric() { 1 } else { 4 };
            let config = DetectorConfig { shape: ShapeMode::Fixed(2.0), ..DetectorConfig::new(kind, 0.1) };
            let base = Detector::new(config, m, 200).unwrap();
            for seed in 0..30 {
                let xs = model.sample(200 + m, seed);
                let (test, reference) = xs.split_at(m);
                let stat = base.measure(test, reference).unwrap();
                for p in [0.3, 0.05, 1e-3] {
                    let d = base.with_design_pfa(p).unwrap();
                    assert_eq!(d.fires(&stat), d.decide(test, reference).unwrap());
                }
            }
        }
    }
}
