//! Elligator 2 on Curve25519: group elements as uniform-looking 32-byte strings.
//!
//! A string carries a 254-bit representative in its low bits and two random
//! padding bits in the top of byte 31. Decoding maps the representative onto
//! the full curve and projects the result onto the prime-order subgroup, so
//! every string decodes to some group element.
//!
//! Encoding first adds a random point of order dividing 8. Without it, decoded
//! encodings would always land in the prime-order subgroup while random
//! strings land there only one time in eight.

use curve25519_dalek::constants::EIGHT_TORSION;
use curve25519_dalek::edwards::{CompressedEdwardsY, EdwardsPoint};
use curve25519_dalek::traits::IsIdentity;
use curve25519_dalek::Scalar;
use rand_core::{CryptoRng, RngCore};

use crate::error::Error;
use crate::field::FieldElement;
use crate::group::GroupElement;

/// Edwards curve constant d = -121665 / 121666.
const EDWARDS_D: FieldElement = fe([
    0x75eb_4dca_1359_78a3,
    0x0070_0a4d_4141_d8ab,
    0x8cc7_4079_7779_e898,
    0x5203_6cee_2b6f_fe73,
]);

/// Non-negative sqrt(-486664), scaling factor of the Edwards/Montgomery map.
const SQRT_M486664: FieldElement = fe([
    0xcc6e_04aa_ff45_7e06,
    0xc5a1_d3d1_4b7d_1a82,
    0xd27b_08dc_03fc_4f7e,
    0x0f26_edf4_60a0_06bb,
]);

/// 8^-1 mod ℓ; `[8 * INV8]` fixes the prime-order part and kills torsion.
const INV8: [u8; 32] = [
    121, 47, 220, 226, 41, 229, 6, 97, 208, 218, 28, 125, 179, 157, 211, 7, 0, 0, 0, 0, 0, 0, 0, 0,
    0, 0, 0, 0, 0, 0, 0, 6,
];

/// Bits of byte 31 reserved for random padding.
const PAD_MASK: u8 = 0b1100_0000;

const fn fe(limbs: [u64; 4]) -> FieldElement {
    FieldElement::from_limbs(limbs)
}

/// A 32-byte string indistinguishable from random that decodes to a group element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UniformBytes32(pub [u8; 32]);

impl UniformBytes32 {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// The representative with the padding bits cleared.
    pub fn representative(&self) -> [u8; 32] {
        let mut r = self.0;
        r[31] &= !PAD_MASK;
        r
    }
}

impl From<[u8; 32]> for UniformBytes32 {
    fn from(bytes: [u8; 32]) -> Self {
        UniformBytes32(bytes)
    }
}

/// Affine point (u, v) on the Montgomery curve v^2 = u^3 + A u^2 + u.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct MontgomeryAffine {
    pub(crate) u: FieldElement,
    pub(crate) v: FieldElement,
}

fn curve_rhs(u: FieldElement) -> FieldElement {
    let a = FieldElement::A;
    (u.square() + a * u + FieldElement::ONE) * u
}

/// The Elligator 2 map with non-square 2. Total on the field.
pub(crate) fn elligator_map(r: FieldElement) -> MontgomeryAffine {
    let a = FieldElement::A;
    let two = FieldElement::from_u64(2);
    // 1 + 2r^2 != 0 since -1/2 is a non-square.
    let w = -(a * (FieldElement::ONE + two * r.square()).invert());
    let e = curve_rhs(w).legendre();
    let u = if e == 1 { w } else { -w - a };
    let root = curve_rhs(u).sqrt().expect("Elligator output lies on the curve");
    let v = if e == 1 { -root } else { root };
    MontgomeryAffine { u, v }
}

/// The non-negative representative of `pt`, if it is in the image of the map.
pub(crate) fn elligator_representative(pt: &MontgomeryAffine) -> Option<FieldElement> {
    let a = FieldElement::A;
    let two = FieldElement::from_u64(2);
    let (u, v) = (pt.u, pt.v);
    if u + a == FieldElement::ZERO {
        return None;
    }
    if v.is_zero() && !u.is_zero() {
        return None;
    }
    if u.is_zero() {
        // Only the 2-torsion point (0, 0); its representative would need r = 0.
        let back = elligator_map(FieldElement::ZERO);
        return (back == *pt).then_some(FieldElement::ZERO);
    }
    if (-(two * u * (u + a))).legendre() != 1 {
        return None;
    }
    let r2 = if !v.is_negative() {
        -(u * (two * (u + a)).invert())
    } else {
        -((u + a) * (two * u).invert())
    };
    r2.sqrt()
}

pub(crate) fn edwards_to_montgomery(point: &EdwardsPoint) -> Option<MontgomeryAffine> {
    if point.is_identity() {
        return None;
    }
    let mut bytes = point.compress().to_bytes();
    let x_odd = bytes[31] >> 7 == 1;
    bytes[31] &= 0x7f;
    let y = FieldElement::from_bytes(&bytes);
    let y2 = y.square();
    let x2 = (y2 - FieldElement::ONE) * (EDWARDS_D * y2 + FieldElement::ONE).invert();
    let mut x = x2.sqrt().expect("valid Edwards point");
    if x.is_odd() != x_odd {
        x = -x;
    }
    if x.is_zero() {
        // (0, -1), the Edwards point of order 2.
        return Some(MontgomeryAffine {
            u: FieldElement::ZERO,
            v: FieldElement::ZERO,
        });
    }
    let u = (FieldElement::ONE + y) * (FieldElement::ONE - y).invert();
    let v = SQRT_M486664 * u * x.invert();
    Some(MontgomeryAffine { u, v })
}

pub(crate) fn montgomery_to_edwards(pt: &MontgomeryAffine) -> EdwardsPoint {
    let (y, x) = if pt.v.is_zero() {
        (-FieldElement::ONE, FieldElement::ZERO)
    } else {
        let y = (pt.u - FieldElement::ONE) * (pt.u + FieldElement::ONE).invert();
        let x = SQRT_M486664 * pt.u * pt.v.invert();
        (y, x)
    };
    let mut bytes = y.to_bytes();
    if x.is_odd() {
        bytes[31] |= 0x80;
    }
    CompressedEdwardsY(bytes)
        .decompress()
        .expect("birational image of a curve point")
}

/// Encodes `p` as a uniform-looking string.
///
/// Fails with [`Error::NotEncodable`] when the randomized point has no
/// representative, which happens for about half of all inputs; callers
/// resample their secret and retry.
pub fn encode_uniform<R: RngCore + CryptoRng>(
    p: &GroupElement,
    rng: &mut R,
) -> Result<UniformBytes32, Error> {
    let torsion = EIGHT_TORSION[(rng.next_u32() & 7) as usize];
    let dirty = p.0 + torsion;
    let mont = edwards_to_montgomery(&dirty).ok_or(Error::NotEncodable)?;
    let r = elligator_representative(&mont).ok_or(Error::NotEncodable)?;
    let mut out = r.to_bytes();
    debug_assert_eq!(out[31] & PAD_MASK, 0);
    out[31] |= (rng.next_u32() as u8) & PAD_MASK;
    Ok(UniformBytes32(out))
}

/// Decodes any 32-byte string to a group element. Padding bits are ignored.
pub fn decode_uniform(n: &UniformBytes32) -> GroupElement {
    let r = FieldElement::from_bytes(&n.representative());
    let full = montgomery_to_edwards(&elligator_map(r));
    let projected = full.mul_by_cofactor() * Scalar::from_bytes_mod_order(INV8);
    GroupElement::from_point_unchecked(projected)
}
