//! The log-domain bounds against exact rational arithmetic.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use odt_core::bounds::{preservation_bound_general, preservation_bound_key, simplified_bound, PreservationParams};

fn int(v: u128) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn binomial(n: u64, k: u64) -> BigInt {
    (0..k).fold(BigInt::one(), |acc, j| acc * BigInt::from(n - j) / BigInt::from(j + 1))
}

/// `1 - (1 - 1/d)^e` exactly, for integer `e`.
fn exact_at_least_one(d: &BigRational, e: u64) -> BigRational {
    let miss = BigRational::one() - d.recip();
    let mut acc = BigRational::one();
    for _ in 0..e {
        acc *= &miss;
    }
    BigRational::one() - acc
}

fn log2_of(r: &BigRational) -> f64 {
    // Scale into f64 range before converting.
    let shift = r.numer().bits() as i64 - r.denom().bits() as i64;
    let scaled = if shift > 0 {
        r / int(1).mul_shift(shift)
    } else {
        r * int(1).mul_shift(-shift)
    };
    scaled.to_f64().unwrap().log2() + shift as f64
}

trait Shift {
    fn mul_shift(self, s: i64) -> BigRational;
}

impl Shift for BigRational {
    fn mul_shift(self, s: i64) -> BigRational {
        self * BigRational::from_integer(BigInt::one() << s as usize)
    }
}

#[test]
fn general_bound_matches_exact_rationals() {
    let mut checked = 0;
    for x_size in [3u128, 4, 8, 16, 256] {
        for known_bits in 0..3 {
            for c in 1..=4u64 {
                for i_size in [c, c + 1, 10, 64] {
                    for q in [1u64, 2, 5, 20] {
                        let params = PreservationParams { x_size, known_bits, c, i_size, q };
                        let unknown = x_size as i128 - (1i128 << known_bits);
                        if unknown <= 0 {
                            assert!(preservation_bound_general(&params).is_err());
                            continue;
                        }
                        let mut a = BigRational::one();
                        for _ in 0..c {
                            a *= int(unknown as u128);
                        }
                        let d = a - int(q as u128) / BigRational::from_integer(binomial(i_size, c));
                        let got = preservation_bound_general(&params);
                        if d < BigRational::one() {
                            assert!(got.is_err(), "{params:?}");
                            continue;
                        }
                        let exact = exact_at_least_one(&d, q);
                        let got = got.unwrap();
                        let want = exact.to_f64().unwrap();
                        assert!((got.p.value - want).abs() <= 1e-12 * want, "{params:?}: {} vs {want}", got.p.value);
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 300, "{checked}");
}

#[test]
fn worked_example_follows_printed_formula() {
    // (4 - 1)^1 - 1·binom(1, 1)^-1 = 2, so P = 1 - (1 - 1/2)^1.
    let p = preservation_bound_general(&PreservationParams { x_size: 4, known_bits: 0, c: 1, i_size: 1, q: 1 }).unwrap();
    assert!((p.p.value - 0.5).abs() < 1e-15);
}

#[test]
fn deep_tail_matches_exact_log() {
    // Results far below f64's smallest normal are still right in log2.
    for (c, q) in [(64u64, 1u64 << 20), (200, 1000), (2000, 1 << 30)] {
        let params = PreservationParams { x_size: 1 << 64, known_bits: 63, c, i_size: 1 << 17, q };
        let got = preservation_bound_general(&params).unwrap();
        // Here X - 2^k = 2^63; binom(2^17, C) ≥ 2^17 makes the correction negligible.
        let mut a = BigRational::one();
        for _ in 0..c {
            a *= int(1u128 << 63);
        }
        let exact_first_order = int(q as u128) / a;
        let want = log2_of(&exact_first_order);
        assert!((got.p.log2 - want).abs() < 1e-9, "C={c}: {} vs {want}", got.p.log2);
        assert!(!got.p.log2.is_nan());
    }
}

#[test]
fn key_bound_matches_exact_rationals() {
    // 4q/|I| integral so the exponent is exact.
    for (i_size, x_size, q) in [(4u64, 16u128, 8u64), (1, 100, 3), (2, 1000, 10), (8, 1 << 20, 64)] {
        let r = q / i_size;
        let d = int(x_size) - int(r as u128);
        let exact = exact_at_least_one(&d, 4 * r).to_f64().unwrap();
        let got = preservation_bound_key(i_size, x_size, q).unwrap();
        assert!((got.value - exact).abs() <= 1e-12 * exact, "{} vs {exact}", got.value);
    }
}

#[test]
fn simplified_bound_matches_exact() {
    for (c, q) in [(10u64, 3u64), (20, 1000), (64, 1 << 20), (100, 7)] {
        let exact = int(q as u128) / (int(1u128 << c) - int(q as u128));
        let got = simplified_bound(c, q).unwrap();
        assert!((got.log2 - log2_of(&exact)).abs() < 1e-9);
    }
}
