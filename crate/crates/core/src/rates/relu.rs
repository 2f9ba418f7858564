//! Closed forms for scalar ReLU networks.

use crate::value::RateValue;

/// `f(z) = z^3 / (z + 1)`.
pub fn f(z: f64) -> f64 {
    z * z * z / (z + 1.0)
}

/// The unique `z > 0` with `f(z) = u`, i.e. the positive root of
/// `z^3 - u z - u = 0`.
///
/// Below `u = 27/4` the cubic has one real root, taken from Cardano's formula
/// in the cancellation-free form `A + u / (3A)`. Above it, the largest of the
/// three real roots comes from the trigonometric form. One Newton step
/// polishes the result.
pub fn f_inverse(u: f64) -> f64 {
    assert!(u > 0.0 && u.is_finite(), "f_inverse needs u > 0, got {u}");
    let disc = u * u / 4.0 - u * u * u / 27.0;
    let mut z = if disc > 0.0 {
        let a = (0.5 * u + disc.sqrt()).cbrt();
        a + u / (3.0 * a)
    } else {
        let c = (1.5 * (3.0 / u).sqrt()).min(1.0);
        2.0 * (u / 3.0).sqrt() * (c.acos() / 3.0).cos()
    };
    for _ in 0..2 {
        let p = z * z * z - u * z - u;
        let dp = 3.0 * z * z - u;
        if dp > 0.0 {
            z -= p / dp;
        }
    }
    z
}

/// Closed-form `kappa*(y; q)` for scalar ReLU with `q > 0`.
pub fn kappa_star_relu_scalar(y: f64, q: f64) -> RateValue {
    assert!(q > 0.0, "kappa_star_relu_scalar needs q > 0");
    if y < 0.0 {
        return RateValue::INFINITY;
    }
    if y == 0.0 {
        return RateValue::new(std::f64::consts::LN_2);
    }
    let z = f_inverse(y / q);
    let eta = (1.0 - 1.0 / (z * z)) / (2.0 * q);
    // (1 - 2 eta q)^(-1/2) = z, so kappa(eta; q) = log((z + 1) / 2).
    let k = ((z + 1.0) / 2.0).ln();
    RateValue::new((eta * y - k).max(0.0))
}

/// Maximizing `eta` of the scalar ReLU transform for `y > 0`.
pub fn relu_eta(y: f64, q: f64) -> f64 {
    let z = f_inverse(y / q);
    (1.0 - 1.0 / (z * z)) / (2.0 * q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect(u: f64) -> f64 {
        let (mut lo, mut hi) = (1e-9f64, 1e6f64);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn inverse_examples() {
        assert!((f_inverse(0.5) - 1.0).abs() < 1e-14);
        assert!((f_inverse(8.0 / 3.0) - 2.0).abs() < 1e-14);
        assert!((f_inverse(0.5) - bisect(0.5)).abs() < 1e-12);
        assert!((f_inverse(27.0 / 4.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_roundtrip_log_grid() {
        for k in 0..=240 {
            let u = 10f64.powf(-6.0 + 12.0 * k as f64 / 240.0);
            let z = f_inverse(u);
            assert!((f(z) - u).abs() <= 1e-12 * u, "u={u}");
        }
    }

    #[test]
    fn kappa_star_special_values() {
        assert!(kappa_star_relu_scalar(-1e-3, 1.0).is_infinite());
        assert_eq!(
            kappa_star_relu_scalar(0.0, 2.0).value(),
            std::f64::consts::LN_2
        );
        for q in [0.3, 1.0, 7.0] {
            assert!(kappa_star_relu_scalar(q / 2.0, q).value() < 1e-15);
        }
    }
}
