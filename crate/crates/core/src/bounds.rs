//! Security-preservation bounds and the partial-clone success model.
//!
//! The interesting probabilities sit near 2^-59 or far below, where
//! `1 - (1 - x)^q` evaluated naively in `f64` rounds to zero. Everything here
//! goes through `log1p`/`expm1` and carries a base-2 logarithm alongside the
//! value, so results stay meaningful after the plain value underflows.

use core::f64::consts::{LN_2, LOG2_E};

use crate::error::{Error, Result};

/// A probability with its base-2 logarithm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probability {
    /// May underflow to zero for very small probabilities.
    pub value: f64,
    pub log2: f64,
}

impl Probability {
    pub const ZERO: Probability = Probability {
        value: 0.0,
        log2: f64::NEG_INFINITY,
    };

    fn from_ln(ln: f64) -> Self {
        Probability {
            value: libm::exp(ln),
            log2: ln * LOG2_E,
        }
    }
}

/// `1 - (1 - x)^e` where `ln_x = ln x`, `0 < x ≤ 1`, `e > 0`.
fn at_least_one_success(ln_x: f64, e: f64) -> Probability {
    if ln_x >= 0.0 {
        return Probability { value: 1.0, log2: 0.0 };
    }
    // Below this, e·x is far under f64 resolution of 1 and P = e·x to
    // relative error e·x.
    if ln_x < -600.0 {
        return Probability::from_ln(libm::log(e) + ln_x);
    }
    let x = libm::exp(ln_x);
    let p = -libm::expm1(e * libm::log1p(-x));
    Probability {
        value: p,
        log2: libm::log2(p),
    }
}

/// Inputs of the general bound: an adversary that knows `known_bits` of each
/// `x_size`-valued location, `c` of `i_size` locations measured per query,
/// `q` queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreservationParams {
    pub x_size: u128,
    pub known_bits: u32,
    pub c: u64,
    pub i_size: u64,
    pub q: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneralBound {
    pub p: Probability,
    /// `q / (2^C - q)`; `None` when `2^C ≤ q` and the bound says nothing.
    pub simplified: Option<Probability>,
}

/// `binom(n, k)` as a float; exact while it stays below 2^53.
fn binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// `ln binom(n, k)`, summed term by term.
fn ln_binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k)
        .map(|j| libm::log((n - j) as f64) - libm::log((j + 1) as f64))
        .sum()
}

/// `P = 1 - (1 - ((X - 2^k)^C - q·binom(I, C)^-1)^-1)^q`.
///
/// The bracketed guess space `D` must be at least 1 for `P` to be a
/// probability; smaller values are a domain error.
pub fn preservation_bound_general(p: &PreservationParams) -> Result<GeneralBound> {
    if p.q == 0 || p.c == 0 || p.i_size == 0 || p.x_size == 0 {
        return Err(Error::DomainError("all parameters must be positive"));
    }
    if p.c > p.i_size {
        return Err(Error::DomainError("C must not exceed |I|"));
    }
    if p.known_bits >= 128 || (1u128 << p.known_bits) >= p.x_size {
        return Err(Error::DomainError("2^k must be below |X|"));
    }
    let unknown = p.x_size - (1u128 << p.known_bits);
    let ln_a = p.c as f64 * libm::log(unknown as f64);
    let ln_d = if ln_a < 600.0 {
        // Small enough to subtract directly, which keeps D = 1 exact.
        let d = libm::pow(unknown as f64, p.c as f64) - p.q as f64 / binomial(p.i_size, p.c);
        if d < 1.0 {
            return Err(Error::DomainError("(|X| - 2^k)^C - q / binom(|I|, C) must be at least 1"));
        }
        libm::log(d)
    } else {
        let ln_b = libm::log(p.q as f64) - ln_binomial(p.i_size, p.c);
        ln_a + libm::log1p(-libm::exp(ln_b - ln_a))
    };
    Ok(GeneralBound {
        p: at_least_one_success(-ln_d, p.q as f64),
        simplified: simplified_bound(p.c, p.q),
    })
}

/// `q / (2^C - q)`.
pub fn simplified_bound(c: u64, q: u64) -> Option<Probability> {
    let ln_q = libm::log(q as f64);
    let ln_2c = c as f64 * LN_2;
    let ratio = libm::exp(ln_q - ln_2c);
    if ratio >= 1.0 {
        return None;
    }
    let ln = ln_q - ln_2c - libm::log1p(-ratio);
    Some(Probability::from_ln(ln))
}

/// `1 - (1 - (|X| - q/|I|)^-1)^(4q/|I|)`: chance of hitting one word of a
/// four-word key while one location is measured per query.
pub fn preservation_bound_key(i_size: u64, x_size: u128, q: u64) -> Result<Probability> {
    if i_size == 0 || x_size == 0 {
        return Err(Error::DomainError("|I| and |X| must be positive"));
    }
    if q == 0 {
        return Ok(Probability::ZERO);
    }
    let per_location = q as f64 / i_size as f64;
    let d = x_size as f64 - per_location;
    if d < 1.0 {
        return Err(Error::DomainError("q / |I| must leave at least one candidate value"));
    }
    Ok(at_least_one_success(-libm::log(d), 4.0 * per_location))
}

/// Success rate of a clone holding each word with probability `f` when `m`
/// locations are measured.
pub fn clone_success_model(f: f64, m: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::DomainError("fraction must lie in [0, 1]"));
    }
    if m == 0 {
        return Err(Error::DomainError("at least one location must be measured"));
    }
    Ok(libm::pow(f, m as f64))
}

/// Two-sided normal quantile for 95% coverage.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `n` trials.
pub fn binomial_ci(successes: u64, n: u64, z: f64) -> (f64, f64) {
    assert!(n > 0 && successes <= n, "need 0 ≤ successes ≤ n, n > 0");
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * libm::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn general(x_size: u128, known_bits: u32, c: u64, i_size: u64, q: u64) -> Result<GeneralBound> {
        preservation_bound_general(&PreservationParams {
            x_size,
            known_bits,
            c,
            i_size,
            q,
        })
    }

    #[test]
    fn key_bound_near_two_to_minus_59() {
        let p = preservation_bound_key(1 << 17, 1u128 << 64, 1_000_000).unwrap();
        assert!((-59.5..=-58.5).contains(&p.log2), "{}", p.log2);
        // First-order value 4q/(|I|·|X|).
        let first_order = libm::log2(4.0 * 1e6 / 131072.0) - 64.0;
        assert!((p.log2 - first_order).abs() < 1e-9);
    }

    #[test]
    fn key_bound_edges() {
        assert_eq!(preservation_bound_key(1 << 17, 1u128 << 64, 0).unwrap(), Probability::ZERO);
        assert!(preservation_bound_key(1, 4, 4).is_err());
        assert!(preservation_bound_key(0, 4, 1).is_err());
        let a = preservation_bound_key(1 << 17, 1u128 << 64, 1_000_000).unwrap();
        let b = preservation_bound_key(1 << 18, 1u128 << 64, 1_000_000).unwrap();
        assert!((a.log2 - b.log2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn general_bound_monotone_in_c() {
        let mut last = f64::INFINITY;
        for c in 1..=64 {
            let b = general(1 << 64, 60, c, 1 << 17, 1 << 20).unwrap();
            assert!(b.p.log2 < last);
            last = b.p.log2;
        }
    }

    #[test]
    fn simplified_bound_for_c64() {
        let b = simplified_bound(64, 1 << 20).unwrap();
        assert!((b.log2 + 44.0).abs() < 1e-6);
        assert_eq!(simplified_bound(3, 8), None);
    }

    #[test]
    fn general_domain_errors() {
        assert!(general(4, 0, 1, 1, 0).is_err());
        assert!(general(4, 2, 1, 1, 1).is_err());
        assert!(general(4, 0, 2, 1, 1).is_err());
        // (4 - 1)^1 - 3/1 = 0.
        assert!(general(4, 0, 1, 1, 3).is_err());
    }

    #[test]
    fn clone_model_and_interval() {
        assert_eq!(clone_success_model(1.0, 5).unwrap(), 1.0);
        assert_eq!(clone_success_model(0.0, 5).unwrap(), 0.0);
        assert_eq!(clone_success_model(0.5, 5).unwrap(), 0.03125);
        assert!(clone_success_model(1.5, 5).is_err());
        let (lo, hi) = binomial_ci(50, 100, Z_95);
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
        let (lo, _) = binomial_ci(0, 100, Z_95);
        assert!(lo.abs() < 1e-12);
    }
}
