//! Special functions and scalar root finding shared by the clutter models
//! and the parametric detectors.

pub use statrs::function::gamma::{digamma, ln_gamma};

use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, gamma_ur};

/// Brent's method on a sign-changing bracket `[a, b]`.
///
/// Returns `None` if `f(a)` and `f(b)` share a sign or the iteration budget
/// runs out.
pub fn brent<F: FnMut(f64) -> f64>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    xtol: f64,
    max_iter: usize,
) -> Option<f64> {
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.is_nan() || fb.is_nan() || fa.signum() == fb.signum() {
        return None;
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let half = 0.5 * (c - b);
        if half.abs() <= tol || fb == 0.0 {
            return Some(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * half * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * half * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * half * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = half;
                e = d;
            }
        } else {
            d = half;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(half) };
        fb = f(b);
        if fb.is_nan() {
            return None;
        }
    }
    None
}

/// Solves `g(t) = 0` for an increasing `g`, expanding a bracket around
/// `guess` until the sign changes.
pub fn solve_increasing<F: FnMut(f64) -> f64>(mut g: F, guess: f64, step: f64) -> Option<f64> {
    let mut lo = guess - step;
    let mut hi = guess + step;
    let mut width = step;
    let mut glo = g(lo);
    let mut ghi = g(hi);
    for _ in 0..200 {
        if glo <= 0.0 && ghi >= 0.0 {
            return brent(&mut g, lo, hi, 1e-15 * guess.abs().max(1.0), 300);
        }
        width *= 2.0;
        if glo > 0.0 {
            hi = lo;
            ghi = glo;
            lo -= width;
            glo = g(lo);
        } else {
            lo = hi;
            glo = ghi;
            hi += width;
            ghi = g(hi);
        }
        if glo.is_nan() && ghi.is_nan() {
            return None;
        }
    }
    None
}

/// Complementary error function via `erfc(x) = Q(1/2, x^2)`, which keeps
/// full relative precision in both tails.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x >= 0.0 {
        gamma_q(0.5, x * x)
    } else {
        1.0 + gamma_p(0.5, x * x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    normal_sf(-z)
}

/// Standard normal survival function, accurate deep into the upper tail.
pub fn normal_sf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let h = 0.5 * z * z;
    if z >= 0.0 {
        0.5 * gamma_q(0.5, h)
    } else {
        0.5 + 0.5 * gamma_p(0.5, h)
    }
}

/// Upper standard-normal quantile: `z` with `P{Z > z} = p`.
pub fn normal_upper_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return if p <= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    if p == 0.5 {
        return 0.0;
    }
    if p > 0.5 {
        return -normal_upper_quantile(1.0 - p);
    }
    let guess = std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    let target = p.ln();
    // ln sf is decreasing; negate to get an increasing function of z.
    solve_increasing(|z| target - normal_sf(z).ln(), guess, 0.25).unwrap_or(guess)
}

/// Regularized lower incomplete gamma `P(a, x)`, defined as 0 for `x <= 0`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_lr(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`, defined as 1 for `x <= 0`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma_ur(a, x)
    }
}

/// Trigamma function for `x > 0`.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Asymptotic expansion with Bernoulli-number coefficients.
    let series = inv2
        * (1.0 / 6.0
            - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + inv + 0.5 * inv2 + inv * series
}

/// Natural log of the modified Bessel function of the second kind
/// `K_nu(x)` for real order and `x > 0`.
///
/// Uses `K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt`, summed with the
/// trapezoid rule in log space. The integrand is even and analytic in a
/// strip, so the rule converges geometrically in the step size.
pub fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::INFINITY;
    }
    let nu = nu.abs();
    let h = 0.05f64.min(0.3 / x.sqrt());
    // Scaled integrand exp(-x (cosh t - 1)) cosh(nu t); shift by -x at the end.
    let log_term = |t: f64| -> f64 {
        let a = nu * t;
        let ln_cosh = a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2;
        // cosh t - 1 = 2 sinh^2(t/2), exact near t = 0.
        let s = (0.5 * t).sinh();
        -x * 2.0 * s * s + ln_cosh
    };
    let mut logs = Vec::with_capacity(256);
    logs.push(log_term(0.0) - std::f64::consts::LN_2);
    let mut best = logs[0];
    let mut prev = logs[0];
    let mut k = 1usize;
    loop {
        let v = log_term(k as f64 * h);
        logs.push(v);
        if v > best {
            best = v;
        }
        if v < prev && v < best - 60.0 {
            break;
        }
        prev = v;
        k += 1;
        if k > 200_000 {
            break;
        }
    }
    let sum: f64 = logs.iter().map(|&v| (v - best).exp()).sum();
    best + sum.ln() + h.ln() - x
}

/// `ln(h * sum_k exp(f(center + k h)))` over all integers `k`, for a
/// log-concave integrand `exp(f)`. Each direction stops once terms are
/// falling and more than `e^-50` below the running maximum.
pub fn ln_trapezoid_unimodal<F: Fn(f64) -> f64>(f: F, center: f64, h: f64) -> f64 {
    let mut logs = vec![f(center)];
    let mut best = logs[0];
    for dir in [-1.0, 1.0] {
        let mut prev = logs[0];
        for k in 1..1_000_000 {
            let v = f(center + dir * k as f64 * h);
            logs.push(v);
            best = best.max(v);
            if (v < prev && v < best - 50.0) || v == f64::NEG_INFINITY {
                break;
            }
            prev = v;
        }
    }
    if best == f64::NEG_INFINITY {
        return best;
    }
    let sum: f64 = logs.iter().map(|&v| (v - best).exp()).sum();
    best + sum.ln() + h.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn brent_finds_cubic_root() {
        let r = brent(|x| x * x * x - 2.0, 0.0, 2.0, 1e-15, 100).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-14);
        assert!(brent(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 100).is_none());
    }

    #[test]
    fn normal_quantiles() {
        // Reference values from an independent 50-digit evaluation.
        assert!(rel(normal_upper_quantile(1e-7), 5.1993375821928165) < 1e-12);
        assert!(rel(normal_upper_quantile(1e-3), 3.0902323061678136) < 1e-12);
        assert!(rel(normal_upper_quantile(1e-11), 6.706023155495136) < 1e-11);
        assert_eq!(normal_upper_quantile(0.5), 0.0);
        assert!(rel(normal_upper_quantile(0.975), -1.9599639845400538) < 1e-12);
        let p = 0.0013498980316300946;
        assert!(rel(normal_upper_quantile(p), 3.0) < 1e-12);
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn normal_tail_values() {
        // 30-digit reference values.
        assert!(rel(normal_sf(1.0), 0.15865525393145705) < 1e-14);
        assert!(rel(normal_sf(5.0), 2.8665157187919391e-7) < 1e-14);
        assert!(rel(normal_cdf(-0.5), 0.30853753872598688) < 1e-14);
        assert!(rel(erfc(1.0), 0.15729920705028513) < 1e-14);
        assert!(rel(erfc(-1.0), 1.8427007929497149) < 1e-15);
        assert_eq!(normal_sf(0.0), 0.5);
    }

    #[test]
    fn trigamma_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!(rel(trigamma(1.0), pi2_6) < 1e-13);
        assert!(rel(trigamma(0.5), std::f64::consts::PI.powi(2) / 2.0) < 1e-13);
        assert!(rel(trigamma(3.33), 0.3498272441270327) < 1e-10);
    }

    #[test]
    fn bessel_k_against_reference() {
        // Reference values from a 40-digit mpmath evaluation.
        let cases = [
            (0.0, 1.0, 0.42102443824070834),
            (1.0, 1.0, 0.6019072301972346),
            (0.0, 0.01, 4.721244730161095),
            (0.0, 10.0, 1.778006231616765e-05),
            (1.0, 10.0, 1.8648773453825585e-05),
            (2.5, 0.3, 75.15214016437488),
            (3.0, 2.0, 0.6473853909486341),
            (0.3, 300.0, 3.724252523245895e-132),
        ];
        for (nu, x, want) in cases {
            let got = ln_bessel_k(nu, x).exp();
            assert!(rel(got, want) < 1e-12, "K_{nu}({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn trapezoid_integrates_gaussian_kernel() {
        let got = ln_trapezoid_unimodal(|u| -0.5 * (u - 0.3) * (u - 0.3), 2.0, 0.2);
        assert!((got - (2.0 * std::f64::consts::PI).sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn bessel_k_half_order_closed_form() {
        for x in [1e-6, 0.01, 0.5, 3.0, 40.0, 700.0] {
            let want = 0.5 * (std::f64::consts::PI / (2.0 * x)).ln() - x;
            assert!((ln_bessel_k(0.5, x) - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }
}
