//! Log-gamma, digamma, trigamma and friends over the positive reals.
//!
//! lgamma and digamma shift the argument upward with their recurrences until
//! the asymptotic (Stirling / Bernoulli) series converges to full double
//! precision, then undo the shift.

use core::f64::consts::PI;

use crate::error::{Error, Result};

/// −ψ(1).
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const SHIFT_LGAMMA: f64 = 15.0;
const SHIFT_PSI: f64 = 10.0;

fn check_positive(x: f64, name: &str) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(alloc::format!("{name}({x}) requires a finite x > 0")));
    }
    Ok(())
}

/// ln Γ(x) for x > 0.
pub fn lgamma(x: f64) -> Result<f64> {
    check_positive(x, "lgamma")?;
    Ok(lgamma_unchecked(x))
}

pub(crate) fn lgamma_unchecked(x: f64) -> f64 {
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    let mut z = x;
    let mut prod = 1.0;
    while z < SHIFT_LGAMMA {
        prod *= z;
        z += 1.0;
    }
    stirling(z) - libm::log(prod)
}

fn stirling(z: f64) -> f64 {
    // B_{2k} / (2k (2k-1)) for k = 1..7
    const C: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
    ];
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv;
    for c in C {
        series += c * pow;
        pow *= inv2;
    }
    (z - 0.5) * libm::log(z) - z + LN_SQRT_2PI + series
}

/// ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive(x, "digamma")?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    // B_{2k} / (2k) for k = 1..7
    const C: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 120.0,
        1.0 / 252.0,
        -1.0 / 240.0,
        1.0 / 132.0,
        -691.0 / 32_760.0,
        1.0 / 12.0,
    ];
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT_PSI {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in C {
        series += c * pow;
        pow *= inv2;
    }
    acc + libm::log(z) - 0.5 / z - series
}

/// ψ'(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive(x, "trigamma")?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    // B_{2k} for k = 1..7
    const B: [f64; 7] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
    ];
    let mut z = x;
    let mut acc = 0.0;
    while z < SHIFT_PSI {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2 * inv;
    for b in B {
        series += b * pow;
        pow *= inv2;
    }
    acc + inv + 0.5 * inv2 + series
}

/// ln B(α) = Σ ln Γ(α_k) − ln Γ(Σ α_k).
pub fn log_multinomial_beta(alpha: &[f64]) -> Result<f64> {
    if alpha.is_empty() {
        return Err(Error::Domain("log_multinomial_beta of an empty vector".into()));
    }
    let mut sum = 0.0;
    let mut acc = 0.0;
    for &a in alpha {
        acc += lgamma(a)?;
        sum += a;
    }
    Ok(acc - lgamma_unchecked(sum))
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    check_positive(a, "gamma_q")?;
    if x < 0.0 || !x.is_finite() {
        return Err(Error::Domain(alloc::format!("gamma_q requires x >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let log_prefix = a * libm::log(x) - x - lgamma_unchecked(a);
    if x < a + 1.0 {
        // series for P
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..1000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        Ok(1.0 - sum * libm::exp(log_prefix))
    } else {
        // modified Lentz continued fraction for Q
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        Ok(libm::exp(log_prefix) * h)
    }
}

/// Survival function of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_sf(stat: f64, dof: usize) -> Result<f64> {
    gamma_q(dof as f64 / 2.0, stat / 2.0)
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / core::f64::consts::SQRT_2)
}

/// ln(π / sin(πx)), the right-hand side of the reflection identity.
pub fn reflection_rhs(x: f64) -> f64 {
    libm::log(PI / libm::sin(PI * x))
}
