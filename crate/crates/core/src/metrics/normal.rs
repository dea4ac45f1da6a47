//! Univariate and bivariate standard-normal CDFs.
//!
//! The univariate CDF combines the Maclaurin series of `erf` with a
//! continued-fraction `erfc` tail. The bivariate orthant probability uses
//! the identity `dP/drho = phi2(x, y; rho)` and integrates the bivariate
//! density over the correlation with Gauss-Legendre panels, which keeps the
//! whole evaluation dependency-free and accurate to ~1e-12 for |rho| <= 0.99.

use std::sync::OnceLock;

/// erf for `0 <= x < 3` via the alternating Maclaurin series.
fn erf_series(x: f64) -> f64 {
    let two_over_sqrt_pi = 2.0 / std::f64::consts::PI.sqrt();
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1usize;
    loop {
        term *= -x2 / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs().max(1e-300) || n > 200 {
            break;
        }
        n += 1;
    }
    two_over_sqrt_pi * sum
}

/// erfc for `x >= 3` via the Laplace continued fraction
/// `erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`,
/// evaluated with the modified Lentz algorithm.
fn erfc_cf(x: f64) -> f64 {
    let front = (-x * x).exp() / std::f64::consts::PI.sqrt();
    if front == 0.0 {
        return 0.0;
    }
    let tiny = 1e-300;
    let mut f: f64 = tiny; // leading term b0 = 0
    let mut c: f64 = f;
    let mut d: f64 = 0.0;
    for k in 1..=300 {
        let a = if k == 1 { 1.0 } else { (k - 1) as f64 / 2.0 };
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    front * f
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let x = z.abs() / std::f64::consts::SQRT_2;
    let tail_half = if x < 3.0 {
        0.5 - 0.5 * erf_series(x)
    } else {
        0.5 * erfc_cf(x)
    };
    if z >= 0.0 {
        1.0 - tail_half
    } else {
        tail_half
    }
}

/// Gauss-Legendre nodes/weights on `[-1, 1]`, computed by Newton iteration
/// on the Legendre recurrence.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_n(x) and P_{n-1}(x) by recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn gl32() -> &'static (Vec<f64>, Vec<f64>) {
    static GL: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GL.get_or_init(|| gauss_legendre(32))
}

/// Bivariate standard-normal CDF `P(X <= x, Y <= y)` with correlation `rho`.
pub fn bvn_cdf(x: f64, y: f64, rho: f64) -> f64 {
    debug_assert!(rho.abs() < 1.0, "correlation must satisfy |rho| < 1");
    let base = norm_cdf(x) * norm_cdf(y);
    if rho == 0.0 {
        return base;
    }
    // Integrate phi2(x, y; r) dr over [0, rho] in two panels.
    let (nodes, weights) = gl32();
    let density = |r: f64| {
        let omr2 = 1.0 - r * r;
        let expo = -(x * x - 2.0 * r * x * y + y * y) / (2.0 * omr2);
        expo.exp() / (2.0 * std::f64::consts::PI * omr2.sqrt())
    };
    let mut integral = 0.0;
    let half = rho / 2.0;
    for (lo, hi) in [(0.0, half), (half, rho)] {
        let mid = (lo + hi) / 2.0;
        let scale = (hi - lo) / 2.0;
        for (t, w) in nodes.iter().zip(weights) {
            integral += w * scale * density(mid + scale * t);
        }
    }
    (base + integral).clamp(0.0, 1.0)
}

/// Survival orthant `P(X >= x, Y >= y)` for the same correlation.
pub fn bvn_survival(x: f64, y: f64, rho: f64) -> f64 {
    bvn_cdf(-x, -y, rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Simpson quadrature of the standard normal pdf over [0, x].
    fn phi_integral_oracle(x: f64) -> f64 {
        let steps = 20_000;
        let h = x / steps as f64;
        let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(x);
        for i in 1..steps {
            let t = h * i as f64;
            acc += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn cdf_matches_quadrature() {
        for &x in &[0.0, 0.1, 0.5, 1.0, 1.96, 2.5, 3.3, 4.0, 5.5] {
            let want = 0.5 + phi_integral_oracle(x);
            let got = norm_cdf(x);
            assert!(
                (got - want).abs() < 1e-11,
                "Phi({x}): got {got}, oracle {want}"
            );
            assert!((norm_cdf(-x) - (1.0 - want)).abs() < 1e-11);
        }
    }

    #[test]
    fn cdf_series_and_cf_agree_at_boundary() {
        // x = 3 in erf-argument units corresponds to z = 3 * sqrt(2).
        let z = 3.0 * std::f64::consts::SQRT_2;
        let below = norm_cdf(z - 1e-9);
        let above = norm_cdf(z + 1e-9);
        assert!((below - above).abs() < 1e-12);
    }

    #[test]
    fn cdf_saturates() {
        assert_eq!(norm_cdf(40.0), 1.0);
        assert_eq!(norm_cdf(-40.0), 0.0);
        assert!(norm_cdf(8.0) < 1.0);
        assert!(norm_cdf(-8.0) > 0.0);
    }

    /// 2D Simpson integration of the bivariate density over (-10, x] x (-10, y].
    fn bvn_oracle(x: f64, y: f64, rho: f64) -> f64 {
        let (lo, steps) = (-10.0f64, 400usize);
        let hx = (x - lo) / steps as f64;
        let hy = (y - lo) / steps as f64;
        let omr2 = 1.0 - rho * rho;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * omr2.sqrt());
        let pdf = |u: f64, v: f64| (-(u * u - 2.0 * rho * u * v + v * v) / (2.0 * omr2)).exp();
        let wt = |i: usize| {
            if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        let mut acc = 0.0;
        for i in 0..=steps {
            for j in 0..=steps {
                acc += wt(i) * wt(j) * pdf(lo + hx * i as f64, lo + hy * j as f64);
            }
        }
        norm * acc * hx * hy / 9.0
    }

    #[test]
    fn bvn_matches_quadrature() {
        for &(x, y, rho) in &[
            (0.0, 0.0, 0.5),
            (1.0, -0.5, -0.3),
            (0.7, 0.2, 0.9),
            (-1.2, 2.0, 0.6),
            (2.5, 2.5, -0.8),
        ] {
            let got = bvn_cdf(x, y, rho);
            let want = bvn_oracle(x, y, rho);
            assert!(
                (got - want).abs() < 1e-7,
                "bvn({x},{y},{rho}): got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn bvn_zero_correlation_factorizes() {
        for &(x, y) in &[(0.3, -1.0), (2.0, 2.0), (-0.4, 0.9)] {
            let got = bvn_cdf(x, y, 0.0);
            assert!((got - norm_cdf(x) * norm_cdf(y)).abs() < 1e-14);
        }
    }

    #[test]
    fn bvn_symmetry_and_bounds() {
        for &(x, y, rho) in &[(0.5, 1.5, 0.4), (-0.5, 0.5, -0.6), (1.0, 1.0, 0.99)] {
            let a = bvn_cdf(x, y, rho);
            let b = bvn_cdf(y, x, rho);
            assert!((a - b).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&a));
            // CDF is bounded by each marginal.
            assert!(a <= norm_cdf(x) + 1e-12);
            assert!(a <= norm_cdf(y) + 1e-12);
        }
    }

    #[test]
    fn bvn_survival_identity() {
        let (x, y, rho) = (0.4, -0.2, 0.35);
        // P(X>=x, Y>=y) = 1 - Phi(x) - Phi(y) + P(X<=x, Y<=y)
        let lhs = bvn_survival(x, y, rho);
        let rhs = 1.0 - norm_cdf(x) - norm_cdf(y) + bvn_cdf(x, y, rho);
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
