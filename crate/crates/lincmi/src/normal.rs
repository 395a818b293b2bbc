//! Standard-normal and truncated-normal numerics.
//!
//! Quantiles of one-sided and two-sided truncations are computed by the
//! inverse-CDF formula, switching to survival-function space in the upper
//! tail and to an asymptotic log-tail expansion when the truncation window
//! sits so far out that the survival values underflow.

use statrs::function::erf::{erfc, erfc_inv};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_67;

/// Standard normal CDF.
pub fn cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal survival function `1 - Phi(x)`, accurate in the upper tail.
pub fn survival(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 1.0;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    0.5 * erfc(x / SQRT_2)
}

/// Standard normal quantile.
pub fn quantile(p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "quantile needs p in [0,1], got {p}");
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        // Work in the survival tail for accuracy.
        SQRT_2 * erfc_inv(2.0 * (1.0 - p))
    } else {
        -SQRT_2 * erfc_inv(2.0 * p)
    }
}

/// Log of the survival function for large positive `x`, by the continued
/// asymptotic series `Q(x) = phi(x)/x (1 - 1/x^2 + 3/x^4 - 15/x^6 + ...)`.
fn log_survival_tail(x: f64) -> f64 {
    debug_assert!(x > 5.0);
    let inv2 = 1.0 / (x * x);
    let series = 1.0 - inv2 * (1.0 - inv2 * (3.0 - inv2 * (15.0 - inv2 * 105.0)));
    -0.5 * x * x - LN_SQRT_2PI - x.ln() + series.ln()
}

fn log_survival(x: f64) -> f64 {
    if x > 8.0 {
        log_survival_tail(x)
    } else {
        survival(x).ln()
    }
}

/// Solves `log Q(z) = target` for z > 0 by Newton iteration on the log scale.
fn quantile_from_log_survival(target: f64) -> f64 {
    debug_assert!(target < 0.0);
    // Initial guess from Q(z) ~ phi(z)/z.
    let mut z = (-2.0 * target).sqrt().max(1.0);
    for _ in 0..40 {
        let f = log_survival(z) - target;
        // d/dz log Q = -phi/Q = -(hazard); exp of the log difference is stable.
        let log_phi = -0.5 * z * z - LN_SQRT_2PI;
        let hazard = (log_phi - log_survival(z)).exp();
        let step = f / hazard;
        z += step;
        if step.abs() < 1e-12 * (1.0 + z.abs()) {
            break;
        }
    }
    z
}

/// `1 - level` tail threshold below which the tail-safe path engages.
const TAIL_EPS: f64 = 1e-10;

/// Quantile at probability `level` of a standard normal truncated to `[a, b]`
/// (extended reals allowed). Uses the inverse-CDF formula
/// `Phi^{-1}((level) zeta_b + (1-level) zeta_a)` rewritten in survival space,
/// with a log-tail fallback when both truncation points sit in the far upper
/// tail.
pub fn truncated_quantile(a: f64, b: f64, level: f64) -> f64 {
    assert!(a <= b, "truncation needs a <= b");
    assert!((0.0..=1.0).contains(&level));
    let zeta_a = cdf(a);
    let q_a = survival(a);
    let zeta_b = cdf(b);
    let q_b = survival(b);

    // Interpolated probability and its complement, each computed directly.
    let p = level * zeta_b + (1.0 - level) * zeta_a;
    let q = level * q_b + (1.0 - level) * q_a;

    let z = if q <= 0.0 || (q < TAIL_EPS && q_a <= 0.0) {
        // Entire window beyond double-precision survival: log-tail space.
        // q/Q(a) = level * Q(b)/Q(a) + (1 - level); both bounds are far in the
        // upper tail, so ratios of survivals stay representable in logs.
        let la = log_survival(a);
        let ratio = if b == f64::INFINITY {
            0.0
        } else {
            (log_survival(b) - la).exp()
        };
        let log_q = la + (level * ratio + (1.0 - level)).ln();
        quantile_from_log_survival(log_q)
    } else if q < 0.5 {
        SQRT_2 * erfc_inv(2.0 * q)
    } else {
        quantile(p)
    };
    z.clamp(a, b)
}
