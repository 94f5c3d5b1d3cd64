//! The subgroup of squares modulo 23: order 11, generated by 2.
//!
//! Every operation is brute force (repeated multiplication, enumeration of
//! powers) so it shares no code path with the curve implementation.

use odt_core::group::PrimeGroup;
use rand_core::{CryptoRng, RngCore};

pub const MODULUS: u64 = 23;
pub const ORDER: u64 = 11;
pub const GENERATOR: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyGroup;

/// Brute-force exponentiation: `base` multiplied by itself `k` times.
pub fn brute_pow(base: u64, k: u64) -> u64 {
    let mut acc = 1;
    for _ in 0..k {
        acc = acc * base % MODULUS;
    }
    acc
}

pub fn elements() -> Vec<u64> {
    (0..ORDER).map(|k| brute_pow(GENERATOR, k)).collect()
}

impl PrimeGroup for ToyGroup {
    type Element = u64;
    type Scalar = u64;

    fn identity() -> u64 {
        1
    }

    fn generator() -> u64 {
        GENERATOR
    }

    fn mul(a: &u64, b: &u64) -> u64 {
        a * b % MODULUS
    }

    fn exp(base: &u64, k: &u64) -> u64 {
        brute_pow(*base, *k)
    }

    fn scalar_mul(a: &u64, b: &u64) -> u64 {
        a * b % ORDER
    }

    fn scalar_neg(a: &u64) -> u64 {
        (ORDER - a % ORDER) % ORDER
    }

    fn scalar_is_zero(a: &u64) -> bool {
        a.is_multiple_of(ORDER)
    }

    fn random_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> u64 {
        rng.next_u64() % ORDER
    }

    fn decode(bytes: &[u8]) -> Option<u64> {
        let bytes: [u8; 32] = bytes.try_into().ok()?;
        if bytes[8..].iter().any(|b| *b != 0) {
            return None;
        }
        let value = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        elements().contains(&value).then_some(value)
    }

    fn encode(element: &u64) -> [u8; 32] {
        let mut out = [0u8; 32];
        out[..8].copy_from_slice(&element.to_le_bytes());
        out
    }
}
