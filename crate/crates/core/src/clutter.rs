//! Clutter amplitude models: densities, tails, quantiles, samplers and fits.
//!
//! The K family uses the sea-clutter amplitude form
//!
//! ```text
//! f(x) = (2b / G(nu)) (b x / 2)^nu K_{nu-1}(b x),   x >= 0
//! E[x^r] = (2/b)^r G(nu + r/2) G(1 + r/2) / G(nu)
//! ```
//!
//! which is a Rayleigh amplitude modulated by a unit-mean Gamma(nu) texture.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma as GammaDist, Normal, Weibull as WeibullDist};
use thiserror::Error;

use crate::special::{
    digamma, gamma_p, gamma_q, ln_bessel_k, ln_gamma, ln_trapezoid_unimodal, normal_cdf,
    normal_sf, normal_upper_quantile, solve_increasing, trigamma,
};

/// Fewest samples any fitter accepts.
pub const MIN_FIT_SAMPLES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClutterError {
    #[error("{family} parameter {name} = {value} must be positive and finite")]
    InvalidParameter { family: &'static str, name: &'static str, value: f64 },
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("sample {index} = {value} is not positive")]
    NonPositiveSample { index: usize, value: f64 },
    #[error("sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("samples have zero variance")]
    ZeroVariance,
    #[error("{0} fit did not converge")]
    NonConvergence(&'static str),
    #[error("normalized fourth moment {0} is not above 2, so no K model matches")]
    NotHeavyTailed(f64),
    #[error("cannot parse {0:?}")]
    Parse(String),
}

/// A clutter amplitude distribution with validated parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClutterModel {
    Gaussian { mean: f64, std: f64 },
    Weibull { shape: f64, scale: f64 },
    Gamma { shape: f64, scale: f64 },
    Rayleigh { scale: f64 },
    K { nu: f64, b: f64 },
}

fn positive(family: &'static str, name: &'static str, value: f64) -> Result<f64, ClutterError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ClutterError::InvalidParameter { family, name, value })
    }
}

/// Maps an infinite root-function value to a large finite one so Brent's
/// interpolation stays well defined.
fn finite(v: f64) -> f64 {
    if v.is_infinite() {
        1e4f64.copysign(v)
    } else {
        v
    }
}

impl ClutterModel {
    pub fn gaussian(mean: f64, std: f64) -> Result<Self, ClutterError> {
        if !mean.is_finite() {
            return Err(ClutterError::InvalidParameter { family: "gaussian", name: "mean", value: mean });
        }
        Ok(Self::Gaussian { mean, std: positive("gaussian", "std", std)? })
    }

    pub fn weibull(shape: f64, scale: f64) -> Result<Self, ClutterError> {
        Ok(Self::Weibull {
            shape: positive("weibull", "shape", shape)?,
            scale: positive("weibull", "scale", scale)?,
        })
    }

    pub fn gamma(shape: f64, scale: f64) -> Result<Self, ClutterError> {
        Ok(Self::Gamma {
            shape: positive("gamma", "shape", shape)?,
            scale: positive("gamma", "scale", scale)?,
        })
    }

    pub fn rayleigh(scale: f64) -> Result<Self, ClutterError> {
        Ok(Self::Rayleigh { scale: positive("rayleigh", "scale", scale)? })
    }

    pub fn k(nu: f64, b: f64) -> Result<Self, ClutterError> {
        Ok(Self::K { nu: positive("k", "nu", nu)?, b: positive("k", "b", b)? })
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Weibull { .. } => "weibull",
            Self::Gamma { .. } => "gamma",
            Self::Rayleigh { .. } => "rayleigh",
            Self::K { .. } => "k",
        }
    }

    /// Lower end of the support.
    pub fn support_min(&self) -> f64 {
        match self {
            Self::Gaussian { .. } => f64::NEG_INFINITY,
            _ => 0.0,
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            Self::Gaussian { mean, std } => {
                let z = (x - mean) / std;
                (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
            }
            _ if x < 0.0 => 0.0,
            _ => self.ln_pdf(x).exp(),
        }
    }

    /// Log density; `-inf` outside the support.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < self.support_min() {
            return f64::NEG_INFINITY;
        }
        match *self {
            Self::Gaussian { mean, std } => {
                let z = (x - mean) / std;
                -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
            }
            Self::Weibull { shape, scale } => {
                let lr = (x / scale).ln();
                shape.ln() - scale.ln() + (shape - 1.0) * lr - (shape * lr).exp()
            }
            Self::Gamma { shape, scale } => {
                (shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln()
            }
            Self::Rayleigh { scale } => {
                let s2 = scale * scale;
                x.ln() - s2.ln() - 0.5 * x * x / s2
            }
            Self::K { nu, b } => {
                let z = b * x;
                (2.0 * b).ln() - ln_gamma(nu) + nu * (0.5 * z).ln() + ln_bessel_k(nu - 1.0, z)
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.support_min() {
            return 0.0;
        }
        match *self {
            Self::Gaussian { mean, std } => normal_cdf((x - mean) / std),
            Self::Weibull { shape, scale } => -(-(x / scale).powf(shape)).exp_m1(),
            Self::Gamma { shape, scale } => gamma_p(shape, x / scale),
            Self::Rayleigh { scale } => -(-0.5 * (x / scale).powi(2)).exp_m1(),
            Self::K { nu, b } => {
                let s = self.sf(x);
                if s > 0.9 {
                    k_lower_cdf(nu, b * x)
                } else {
                    1.0 - s
                }
            }
        }
    }

    /// Survival function `P{X > x}`, accurate in the far upper tail.
    pub fn sf(&self, x: f64) -> f64 {
        match *self {
            Self::Gaussian { mean, std } => normal_sf((x - mean) / std),
            _ if x <= 0.0 => 1.0,
            Self::Gamma { shape, scale } => gamma_q(shape, x / scale),
            _ => self.ln_sf(x).exp(),
        }
    }

    /// Natural log of the survival function.
    pub fn ln_sf(&self, x: f64) -> f64 {
        match *self {
            Self::Gaussian { .. } | Self::Gamma { .. } => self.sf(x).ln(),
            _ if x <= 0.0 => 0.0,
            Self::Weibull { shape, scale } => -(x / scale).powf(shape),
            Self::Rayleigh { scale } => -0.5 * (x / scale).powi(2),
            Self::K { nu, b } => {
                let z = b * x;
                LN_2 - ln_gamma(nu) + nu * (0.5 * z).ln() + ln_bessel_k(nu, z)
            }
        }
    }

    /// `x` with `cdf(x) = p`; NaN outside `(0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        if !(p > 0.0 && p < 1.0) {
            return f64::NAN;
        }
        match *self {
            Self::Gaussian { mean, std } => mean - std * normal_upper_quantile(p),
            Self::Weibull { shape, scale } => scale * (-(-p).ln_1p()).powf(1.0 / shape),
            Self::Rayleigh { scale } => scale * (-2.0 * (-p).ln_1p()).sqrt(),
            _ if p > 0.5 => self.upper_quantile(1.0 - p),
            _ => {
                let target = p.ln();
                self.solve_log_x(|x| finite(self.cdf(x).ln() - target))
            }
        }
    }

    /// `x` with `sf(x) = q`; NaN outside `(0, 1)`.
    pub fn upper_quantile(&self, q: f64) -> f64 {
        if !(q > 0.0 && q < 1.0) {
            return f64::NAN;
        }
        match *self {
            Self::Gaussian { mean, std } => mean + std * normal_upper_quantile(q),
            Self::Weibull { shape, scale } => scale * (-q.ln()).powf(1.0 / shape),
            Self::Rayleigh { scale } => scale * (-2.0 * q.ln()).sqrt(),
            _ if q > 0.5 => self.quantile(1.0 - q),
            _ => {
                let target = q.ln();
                self.solve_log_x(|x| finite(target - self.ln_sf(x)))
            }
        }
    }

    /// Root of an increasing function of `x > 0`, searched in `ln x`.
    fn solve_log_x<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        let guess = 0.5 * self.mean_power().ln();
        solve_increasing(|y| g(y.exp()), guess, 1.0).map_or(f64::NAN, f64::exp)
    }

    /// Raw moment `E[x^r]`. Gaussian supports integer `r` in 1..=4 only.
    pub fn moment(&self, r: f64) -> f64 {
        match *self {
            Self::Gaussian { mean, std } => {
                let (m, s2) = (mean, std * std);
                match r as i32 {
                    _ if r.fract() != 0.0 => f64::NAN,
                    1 => m,
                    2 => m * m + s2,
                    3 => m * m * m + 3.0 * m * s2,
                    4 => m.powi(4) + 6.0 * m * m * s2 + 3.0 * s2 * s2,
                    _ => f64::NAN,
                }
            }
            Self::Weibull { shape, scale } => scale.powf(r) * ln_gamma(1.0 + r / shape).exp(),
            Self::Gamma { shape, scale } => {
                scale.powf(r) * (ln_gamma(shape + r) - ln_gamma(shape)).exp()
            }
            Self::Rayleigh { scale } => {
                (2f64.sqrt() * scale).powf(r) * ln_gamma(1.0 + 0.5 * r).exp()
            }
            Self::K { nu, b } => {
                (2.0 / b).powf(r)
                    * (ln_gamma(nu + 0.5 * r) + ln_gamma(1.0 + 0.5 * r) - ln_gamma(nu)).exp()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.moment(1.0)
    }

    /// `E[x^2]`, the reference power for signal-to-clutter ratios.
    pub fn mean_power(&self) -> f64 {
        match *self {
            Self::Gaussian { mean, std } => mean * mean + std * std,
            Self::Weibull { shape, scale } => scale * scale * ln_gamma(1.0 + 2.0 / shape).exp(),
            Self::Gamma { shape, scale } => shape * scale * scale * (shape + 1.0),
            Self::Rayleigh { scale } => 2.0 * scale * scale,
            Self::K { nu, b } => 4.0 * nu / (b * b),
        }
    }

    pub fn sampler(&self) -> ClutterSampler {
        let kind = match *self {
            Self::Gaussian { mean, std } => {
                SamplerKind::Gaussian(Normal::new(mean, std).expect("validated parameters"))
            }
            Self::Weibull { shape, scale } => {
                SamplerKind::Weibull(WeibullDist::new(scale, shape).expect("validated parameters"))
            }
            Self::Gamma { shape, scale } => {
                SamplerKind::Gamma(GammaDist::new(shape, scale).expect("validated parameters"))
            }
            Self::Rayleigh { scale } => SamplerKind::Rayleigh(scale),
            Self::K { nu, b } => SamplerKind::K {
                texture: GammaDist::new(nu, 1.0 / nu).expect("validated parameters"),
                sigma: (2.0 * nu).sqrt() / b,
            },
        };
        ClutterSampler(kind)
    }

    /// `count` samples from a generator seeded with `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sampler().sample_iter(&mut rng).take(count).collect()
    }
}

/// Lower tail of the K amplitude CDF from the compound representation
/// `F(x) = E_tau[1 - exp(-z^2 / (4 nu tau))]`, `z = b x`, which keeps full
/// relative precision as `x -> 0` where `1 - sf` would cancel.
fn k_lower_cdf(nu: f64, z: f64) -> f64 {
    let a = z * z / (4.0 * nu);
    if a == 0.0 {
        return 0.0;
    }
    let norm = nu * nu.ln() - ln_gamma(nu);
    let h = 0.1f64.min(0.1 / nu.sqrt());
    let ln_f = |u: f64| {
        let hit = -(-a * (-u).exp()).exp_m1();
        norm + nu * u - nu * u.exp() + hit.ln()
    };
    let center = a.ln().min(0.0);
    ln_trapezoid_unimodal(ln_f, center, h).exp().min(1.0)
}

impl fmt::Display for ClutterModel {
    /// Canonical `family:p1[:p2]` form accepted by [`FromStr`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Gaussian { mean, std } => write!(f, "gaussian:{mean}:{std}"),
            Self::Weibull { shape, scale } => write!(f, "weibull:{shape}:{scale}"),
            Self::Gamma { shape, scale } => write!(f, "gamma:{shape}:{scale}"),
            Self::Rayleigh { scale } => write!(f, "rayleigh:{scale}"),
            Self::K { nu, b } => write!(f, "k:{nu}:{b}"),
        }
    }
}

impl FromStr for ClutterModel {
    type Err = ClutterError;

    /// Parses `family[:p1[:p2]]`. Missing parameters take preset values:
    /// gaussian 10:1, weibull 1.2:1, gamma 3.33:1, rayleigh 1, k 3:2.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ClutterError::Parse(s.to_string());
        let mut parts = s.trim().split(':');
        let name = parts.next().ok_or_else(bad)?.to_ascii_lowercase();
        let params: Vec<f64> =
            parts.map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?;
        let get = |i: usize, default: f64| params.get(i).copied().unwrap_or(default);
        let (arity, model) = match name.as_str() {
            "gaussian" | "normal" => (2, Self::gaussian(get(0, 10.0), get(1, 1.0))),
            "weibull" => (2, Self::weibull(get(0, 1.2), get(1, 1.0))),
            "gamma" => (2, Self::gamma(get(0, 3.33), get(1, 1.0))),
            "rayleigh" => (1, Self::rayleigh(get(0, 1.0))),
            "k" => (2, Self::k(get(0, 3.0), get(1, 2.0))),
            _ => return Err(bad()),
        };
        if params.len() > arity {
            return Err(bad());
        }
        model
    }
}

/// Reusable sampler for one model.
#[derive(Debug, Clone)]
pub struct ClutterSampler(SamplerKind);

#[derive(Debug, Clone)]
enum SamplerKind {
    Gaussian(Normal<f64>),
    Weibull(WeibullDist<f64>),
    Gamma(GammaDist<f64>),
    Rayleigh(f64),
    K { texture: GammaDist<f64>, sigma: f64 },
}

#[inline]
fn rayleigh_draw<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    sigma * (2.0 * e).sqrt()
}

impl Distribution<f64> for ClutterSampler {
    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.0 {
            SamplerKind::Gaussian(d) => d.sample(rng),
            SamplerKind::Weibull(d) => d.sample(rng),
            SamplerKind::Gamma(d) => d.sample(rng),
            SamplerKind::Rayleigh(s) => rayleigh_draw(rng, *s),
            SamplerKind::K { texture, sigma } => {
                let tau = texture.sample(rng);
                rayleigh_draw(rng, *sigma) * tau.sqrt()
            }
        }
    }
}

/// Estimator used by [`fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitMethod {
    Gaussian,
    Weibull,
    /// Gamma with shape and scale by maximum likelihood.
    Gamma,
    /// Gamma with shape fixed to the ENL estimated from the same samples.
    GammaEnl,
    /// Gamma with a supplied shape; scale by maximum likelihood.
    GammaFixedShape(f64),
    Rayleigh,
    /// K by moment matching on the second and fourth moments.
    K,
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian => f.write_str("gaussian"),
            Self::Weibull => f.write_str("weibull"),
            Self::Gamma => f.write_str("gamma"),
            Self::GammaEnl => f.write_str("gamma_enl"),
            Self::GammaFixedShape(k) => write!(f, "gamma_enl:{k}"),
            Self::Rayleigh => f.write_str("rayleigh"),
            Self::K => f.write_str("k"),
        }
    }
}

impl FromStr for FitMethod {
    type Err = ClutterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        Ok(match t.as_str() {
            "gaussian" | "normal" => Self::Gaussian,
            "weibull" => Self::Weibull,
            "gamma" | "gamma_ml" => Self::Gamma,
            "gamma_enl" => Self::GammaEnl,
            "rayleigh" => Self::Rayleigh,
            "k" => Self::K,
            _ => match t.strip_prefix("gamma_enl:").map(str::parse::<f64>) {
                Some(Ok(k)) if k > 0.0 && k.is_finite() => Self::GammaFixedShape(k),
                _ => return Err(ClutterError::Parse(s.to_string())),
            },
        })
    }
}

fn check_samples(samples: &[f64], need_positive: bool) -> Result<(), ClutterError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(ClutterError::InsufficientSamples { need: MIN_FIT_SAMPLES, got: samples.len() });
    }
    for (index, &value) in samples.iter().enumerate() {
        if !value.is_finite() {
            return Err(ClutterError::NonFiniteSample { index });
        }
        if need_positive && value <= 0.0 {
            return Err(ClutterError::NonPositiveSample { index, value });
        }
    }
    Ok(())
}

/// Fits a model to amplitude samples.
pub fn fit(method: FitMethod, samples: &[f64]) -> Result<ClutterModel, ClutterError> {
    check_samples(samples, method != FitMethod::Gaussian)?;
    match method {
        FitMethod::Gaussian => {
            let (mean, std) = mean_std(samples);
            if std == 0.0 {
                return Err(ClutterError::ZeroVariance);
            }
            ClutterModel::gaussian(mean, std)
        }
        FitMethod::Weibull => {
            let (shape, scale) = weibull_ml(samples)?;
            ClutterModel::weibull(shape, scale)
        }
        FitMethod::Gamma => {
            let (shape, scale) = gamma_ml(samples)?;
            ClutterModel::gamma(shape, scale)
        }
        FitMethod::GammaEnl => {
            let shape = estimate_enl(samples)?;
            ClutterModel::gamma(shape, mean(samples) / shape)
        }
        FitMethod::GammaFixedShape(shape) => {
            let shape = positive("gamma", "shape", shape)?;
            ClutterModel::gamma(shape, mean(samples) / shape)
        }
        FitMethod::Rayleigh => ClutterModel::rayleigh(rayleigh_scale_ml(samples)),
        FitMethod::K => {
            let n = samples.len() as f64;
            let m2 = samples.iter().map(|x| x * x).sum::<f64>() / n;
            let m4 = samples.iter().map(|x| (x * x) * (x * x)).sum::<f64>() / n;
            let ratio = m4 / (m2 * m2);
            if !(ratio > 2.0) {
                return Err(ClutterError::NotHeavyTailed(ratio));
            }
            let nu = 2.0 / (ratio - 2.0);
            ClutterModel::k(nu, (4.0 * nu / m2).sqrt())
        }
    }
}

pub(crate) fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Mean and population (maximum-likelihood) standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let mu = mean(samples);
    let var = samples.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / samples.len() as f64;
    (mu, var.sqrt())
}

/// Rayleigh scale by maximum likelihood, `sqrt(sum x^2 / 2n)`.
pub fn rayleigh_scale_ml(samples: &[f64]) -> f64 {
    let s2 = samples.iter().map(|x| x * x).sum::<f64>();
    (s2 / (2.0 * samples.len() as f64)).sqrt()
}

/// Weibull `(shape, scale)` by maximum likelihood. Samples must be positive.
pub fn weibull_ml(samples: &[f64]) -> Result<(f64, f64), ClutterError> {
    weibull_ml_with(samples, &mut Vec::with_capacity(samples.len()))
}

/// [`weibull_ml`] with a caller-owned scratch buffer for the hot path.
///
/// Solves the profile equation `sum w y / sum w = 1/c` with centered log
/// samples `y` and weights `w = exp(c y)` by Newton's method, falling back
/// to bisection whenever a step leaves the current bracket.
pub fn weibull_ml_with(samples: &[f64], logs: &mut Vec<f64>) -> Result<(f64, f64), ClutterError> {
    let n = samples.len();
    if n < 2 {
        return Err(ClutterError::InsufficientSamples { need: 2, got: n });
    }
    logs.clear();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for (index, &x) in samples.iter().enumerate() {
        if !(x > 0.0) || !x.is_finite() {
            return Err(ClutterError::NonPositiveSample { index, value: x });
        }
        sum += x;
        sum2 += x * x;
        logs.push(x.ln());
    }
    let nf = n as f64;
    let mu = sum / nf;
    let var = (sum2 / nf - mu * mu).max(0.0);
    let mean_ln = logs.iter().sum::<f64>() / nf;
    let mut ymax = f64::NEG_INFINITY;
    for y in logs.iter_mut() {
        *y -= mean_ln;
        ymax = ymax.max(*y);
    }
    if !(ymax > 0.0) || var == 0.0 {
        return Err(ClutterError::ZeroVariance);
    }

    let eval = |c: f64| -> (f64, f64, f64) {
        let (mut sw, mut swy, mut swy2) = (0.0, 0.0, 0.0);
        for &y in logs.iter() {
            let w = (c * (y - ymax)).exp();
            sw += w;
            swy += w * y;
            swy2 += w * y * y;
        }
        let a = swy / sw;
        let h = a - 1.0 / c;
        let dh = (swy2 / sw - a * a).max(0.0) + 1.0 / (c * c);
        (h, dh, sw)
    };

    let mut c = (var.sqrt() / mu).powf(-1.086);
    if !(c.is_finite() && c > 0.0) {
        c = 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let (h, dh, sw) = eval(c);
        if h < 0.0 {
            lo = c;
        } else {
            hi = c;
        }
        let mut next = c - h / dh;
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * c };
        }
        if (next - c).abs() <= 1e-12 * c || h == 0.0 {
            let c = if h == 0.0 { c } else { next };
            let sw = if h == 0.0 { sw } else { eval(c).2 };
            let scale = (mean_ln + ymax + (sw / nf).ln() / c).exp();
            return Ok((c, scale));
        }
        c = next;
    }
    Err(ClutterError::NonConvergence("weibull"))
}

/// Gamma `(shape, scale)` by maximum likelihood: Newton on
/// `ln k - digamma(k) = ln(mean) - mean(ln x)` from Minka's initial value.
pub fn gamma_ml(samples: &[f64]) -> Result<(f64, f64), ClutterError> {
    check_samples(samples, true)?;
    let mu = mean(samples);
    let mean_ln = samples.iter().map(|x| x.ln()).sum::<f64>() / samples.len() as f64;
    let s = mu.ln() - mean_ln;
    if !(s > 0.0) {
        return Err(ClutterError::ZeroVariance);
    }
    let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..100 {
        let f = k.ln() - digamma(k) - s;
        let df = 1.0 / k - trigamma(k);
        let mut next = k - f / df;
        if !(next > 0.0) {
            next = 0.5 * k;
        }
        if (next - k).abs() <= 1e-12 * k {
            return Ok((next, mu / next));
        }
        k = next;
    }
    Err(ClutterError::NonConvergence("gamma"))
}

/// Equivalent number of looks, `(mean(I) / std(I))^2` on intensity
/// `I = x^2` of amplitude samples.
pub fn estimate_enl(samples: &[f64]) -> Result<f64, ClutterError> {
    check_samples(samples, true)?;
    let intensity: Vec<f64> = samples.iter().map(|x| x * x).collect();
    let (mu, sd) = mean_std(&intensity);
    if sd == 0.0 {
        return Err(ClutterError::ZeroVariance);
    }
    Ok((mu / sd).powi(2))
}

/// One fitted family inside a [`HistogramReport`].
#[derive(Debug, Clone)]
pub struct FamilyFit {
    pub method: FitMethod,
    pub model: Result<ClutterModel, ClutterError>,
    /// Model density at each bin center; empty when the fit failed.
    pub density: Vec<f64>,
    /// Model exceedance at each upper bin edge; empty when the fit failed.
    pub exceedance: Vec<f64>,
}

/// Histogram of amplitude samples with fitted family overlays.
#[derive(Debug, Clone)]
pub struct HistogramReport {
    /// `bins + 1` equally spaced edges from 0 to the sample maximum.
    pub edges: Vec<f64>,
    /// Normalized density per bin; integrates to 1.
    pub density: Vec<f64>,
    /// Fraction of samples strictly above each upper bin edge.
    pub exceedance: Vec<f64>,
    pub fits: Vec<FamilyFit>,
}

pub const DEFAULT_BINS: usize = 512;

/// Builds the histogram and fits every requested family. A failed fit is
/// recorded in its [`FamilyFit`] and does not abort the report.
pub fn histogram_report(
    samples: &[f64],
    bins: usize,
    families: &[FitMethod],
) -> Result<HistogramReport, ClutterError> {
    let need = bins.max(1) * 10;
    if samples.len() < need {
        return Err(ClutterError::InsufficientSamples { need, got: samples.len() });
    }
    let mut sorted = samples.to_vec();
    for (index, &value) in sorted.iter().enumerate() {
        if !value.is_finite() {
            return Err(ClutterError::NonFiniteSample { index });
        }
        if value < 0.0 {
            return Err(ClutterError::NonPositiveSample { index, value });
        }
    }
    sorted.sort_by(f64::total_cmp);
    let max = *sorted.last().expect("nonempty");
    if max == 0.0 {
        return Err(ClutterError::ZeroVariance);
    }
    let width = max / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { max } else { i as f64 * width }).collect();
    let mut counts = vec![0usize; bins];
    for &x in &sorted {
        counts[((x / width) as usize).min(bins - 1)] += 1;
    }
    let total = sorted.len() as f64;
    let density = counts.iter().map(|&c| c as f64 / (total * width)).collect();
    let exceedance = edges[1..]
        .iter()
        .map(|&e| (sorted.len() - sorted.partition_point(|&x| x <= e)) as f64 / total)
        .collect();
    let centers: Vec<f64> = (0..bins).map(|i| (i as f64 + 0.5) * width).collect();

    let fits = families
        .iter()
        .map(|&method| {
            let model = fit(method, samples);
            let (density, exceedance) = match &model {
                Ok(m) => (
                    centers.iter().map(|&x| m.pdf(x)).collect(),
                    edges[1..].iter().map(|&e| m.sf(e)).collect(),
                ),
                Err(_) => (Vec::new(), Vec::new()),
            };
            FamilyFit { method, model, density, exceedance }
        })
        .collect();
    Ok(HistogramReport { edges, density, exceedance, fits })
}

impl HistogramReport {
    pub fn bins(&self) -> usize {
        self.density.len()
    }

    fn ok_fits(&self) -> impl Iterator<Item = &FamilyFit> {
        self.fits.iter().filter(|f| f.model.is_ok())
    }

    fn write_table<W: Write>(
        &self,
        mut w: W,
        head: &str,
        rows: impl Iterator<Item = (f64, f64)>,
        column: impl Fn(&FamilyFit, usize) -> f64,
    ) -> io::Result<()> {
        write!(w, "{head}")?;
        for f in self.ok_fits() {
            write!(w, ",{}", f.method)?;
        }
        writeln!(w)?;
        for (i, (x, emp)) in rows.enumerate() {
            write!(w, "{x},{emp}")?;
            for f in self.ok_fits() {
                write!(w, ",{}", column(f, i))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// `bin_center,empirical_density,<family>...`
    pub fn write_body_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let width = self.edges[1] - self.edges[0];
        let rows = self.density.iter().enumerate().map(|(i, &d)| ((i as f64 + 0.5) * width, d));
        self.write_table(w, "bin_center,empirical_density", rows, |f, i| f.density[i])
    }

    /// `value,empirical_exceedance,<family>...`
    pub fn write_tail_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let rows = self.edges[1..].iter().copied().zip(self.exceedance.iter().copied());
        self.write_table(w, "value,empirical_exceedance", rows, |f, i| f.exceedance[i])
    }

    /// `family,status,model,message`, one row per requested family.
    pub fn write_fits_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "family,status,model,message")?;
        for f in &self.fits {
            match &f.model {
                Ok(m) => writeln!(w, "{},ok,{m},", f.method)?,
                Err(e) => writeln!(w, "{},error,,\"{}\"", f.method, e.to_string().replace('"', "'"))?,
            }
        }
        Ok(())
    }
}
