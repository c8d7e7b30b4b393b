//! Riemann-zeta partial sums and tails by direct summation with an
//! Euler-Maclaurin remainder, accurate to ~1e-13 absolute.

use statrs::function::gamma;

/// `sum_{k > k_min} k^{-s}` for `s > 1`, `k_min >= 0`.
///
/// Sums directly until the Euler-Maclaurin remainder from the stopping
/// point is below 1e-14, then closes with the remainder expansion
/// `N^{1-s}/(s-1) + N^{-s}/2 - s N^{-s-1}/12` whose error is
/// `O(s^3 N^{-s-3})`.
pub fn zeta_tail(s: f64, k_min: u64) -> f64 {
    assert!(s > 1.0, "zeta tail requires s > 1");
    let start = k_min + 1;
    // Summing up to N ~ 1e4 past the start keeps the remainder error
    // below 1e-14 for s in (1, 3].
    let n_direct = 20_000u64.max(start);
    let mut acc = 0.0;
    for k in start..n_direct {
        acc += (k as f64).powf(-s);
    }
    let n = n_direct as f64;
    // tail from N (inclusive): integral + boundary corrections
    acc + n.powf(1.0 - s) / (s - 1.0) + 0.5 * n.powf(-s) - s * n.powf(-s - 1.0) / 12.0
        + s * (s + 1.0) * (s + 2.0) * n.powf(-s - 3.0) / 720.0
}

/// Riemann zeta `sum_{k >= 1} k^{-s}` for `s > 1`.
pub fn zeta(s: f64) -> f64 {
    zeta_tail(s, 0)
}

/// `sum_{k > k_min} k^{-s} e^{-lambda k}` for `s` in `(1,3)`, `s != 2`,
/// `lambda >= 0`; accurate to ~1e-13 relative.
///
/// Used for the analytic tail of power-law generating functions. Direct
/// summation when the damping truncates the series cheaply; otherwise
/// Euler-Maclaurin with the integral `lambda^{s-1} Gamma(1-s, lambda*N)`
/// evaluated by downward recurrence from a positive-parameter incomplete
/// gamma.
pub fn zeta_tail_damped(s: f64, k_min: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return zeta_tail(s, k_min);
    }
    let start = (k_min + 1) as f64;
    if lambda * start > 45.0 {
        return 0.0; // every term below e^-45
    }
    // Direct summation is cheap when the damping kills the sum quickly.
    let cutoff = (45.0 / lambda).ceil() as u64;
    if cutoff <= k_min + 2_000_000 {
        let mut acc = 0.0;
        for k in (k_min + 1)..=cutoff {
            let kf = k as f64;
            acc += kf.powf(-s) * (-lambda * kf).exp();
        }
        return acc;
    }
    // push the Euler-Maclaurin start point far enough out for the
    // correction terms to be negligible
    let n_start = 20_000u64.max(k_min + 1);
    let mut acc = 0.0;
    for k in (k_min + 1)..n_start {
        let kf = k as f64;
        acc += kf.powf(-s) * (-lambda * kf).exp();
    }
    let n = n_start as f64;
    // integral: int_N^inf x^-s e^{-lambda x} dx = lambda^{s-1} Gamma(1-s, a)
    // with a = lambda N. Downward recurrence from nu = 3-s > 0 (where the
    // regularized upper gamma is directly computable) is cancellation-free:
    // the power terms dominate as the parameter goes negative.
    let a = lambda * n;
    let ea = (-a).exp();
    let g3 = gamma::gamma(3.0 - s) * gamma::gamma_ur(3.0 - s, a);
    let g2 = (g3 - a.powf(2.0 - s) * ea) / (2.0 - s);
    let g1 = (g2 - a.powf(1.0 - s) * ea) / (1.0 - s);
    let integral = lambda.powf(s - 1.0) * g1;
    // h(x) = x^-s e^{-lambda x}: h' = -(s/x + lambda) h, and
    // h''' = -((s(s+1)(s+2)/x^3 + 3s(s+1) lambda/x^2 + 3s lambda^2/x
    //          + lambda^3)) h
    let h = n.powf(-s) * (-lambda * n).exp();
    let hp = -(s / n + lambda) * h;
    let hppp = -(s * (s + 1.0) * (s + 2.0) / n.powi(3)
        + 3.0 * s * (s + 1.0) * lambda / n.powi(2)
        + 3.0 * s * lambda * lambda / n
        + lambda.powi(3))
        * h;
    acc + integral + h / 2.0 - hp / 12.0 + hppp / 720.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeta_known_values() {
        // zeta(2) = pi^2/6
        assert!((zeta(2.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
        // zeta(2.5) reference value (computed by 1e9-term direct summation
        // plus integral remainder, independent of this implementation)
        assert!((zeta(2.5) - 1.341_487_257_250_917).abs() < 1e-12);
    }

    #[test]
    fn tail_consistency() {
        let s = 1.7;
        let head: f64 = (1..=1000).map(|k| (k as f64).powf(-s)).sum();
        assert!((zeta(s) - head - zeta_tail(s, 1000)).abs() < 1e-12);
    }

    #[test]
    fn damped_tail_matches_direct_sum() {
        let s = 2.5;
        for &(k_min, lambda) in &[(100u64, 1e-2), (1000, 1e-3), (10, 0.5)] {
            let direct: f64 = ((k_min + 1)..(k_min + 5_000_000))
                .map(|k| (k as f64).powf(-s) * (-lambda * k as f64).exp())
                .sum();
            let got = zeta_tail_damped(s, k_min, lambda);
            assert!(
                (got - direct).abs() < 1e-12,
                "k_min={k_min} lambda={lambda}: {got} vs {direct}"
            );
        }
    }

    #[test]
    fn damped_tail_euler_maclaurin_branch() {
        // lambda small enough to force the incomplete-gamma path, but with
        // the sum still directly computable for comparison
        for &(s, k_min, lambda) in &[(2.5f64, 4_000_000u64, 2e-6f64), (2.5, 100, 1e-5), (1.7, 50, 8e-6)] {
            let stop = (45.0 / lambda) as u64 + 10;
            let direct: f64 = ((k_min + 1)..stop)
                .map(|k| (k as f64).powf(-s) * (-lambda * k as f64).exp())
                .sum();
            let got = zeta_tail_damped(s, k_min, lambda);
            assert!(
                (got / direct - 1.0).abs() < 1e-9,
                "s={s} k_min={k_min} lambda={lambda}: {got} vs {direct}"
            );
        }
    }

    #[test]
    fn damped_tail_tiny_lambda() {
        // for lambda * k_min << 1 the difference from the undamped tail is
        // lambda * zeta_tail(s-1, k_min) to first order
        let (s, k_min, lambda) = (2.8f64, 1_000_000u64, 1e-10f64);
        let diff = zeta_tail(s, k_min) - zeta_tail_damped(s, k_min, lambda);
        let first_order = lambda * zeta_tail(s - 1.0, k_min);
        assert!(
            (diff / first_order - 1.0).abs() < 5e-3,
            "{diff} vs {first_order}"
        );
    }
}
