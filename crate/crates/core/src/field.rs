//! Arithmetic in GF(2^255 - 19), just enough for the Elligator 2 map and the
//! Edwards/Montgomery coordinate conversions.
//!
//! Elements are four little-endian 64-bit limbs holding any value below
//! 2^256; they are only brought to canonical form (< p) on output and
//! comparison. This is not constant time.

use core::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug)]
pub(crate) struct FieldElement([u64; 4]);

const P: [u64; 4] = [
    0xffff_ffff_ffff_ffed,
    0xffff_ffff_ffff_ffff,
    0xffff_ffff_ffff_ffff,
    0x7fff_ffff_ffff_ffff,
];

/// (p - 5) / 8, exponent used by the square-root candidate.
const P58: [u64; 4] = [
    0xffff_ffff_ffff_fffd,
    0xffff_ffff_ffff_ffff,
    0xffff_ffff_ffff_ffff,
    0x0fff_ffff_ffff_ffff,
];

/// (p - 1) / 2, exponent of the Legendre symbol.
const P12: [u64; 4] = [
    0xffff_ffff_ffff_fff6,
    0xffff_ffff_ffff_ffff,
    0xffff_ffff_ffff_ffff,
    0x3fff_ffff_ffff_ffff,
];

/// p - 2, exponent of the Fermat inverse.
const PM2: [u64; 4] = [
    0xffff_ffff_ffff_ffeb,
    0xffff_ffff_ffff_ffff,
    0xffff_ffff_ffff_ffff,
    0x7fff_ffff_ffff_ffff,
];

impl FieldElement {
    pub(crate) const ZERO: FieldElement = FieldElement([0, 0, 0, 0]);
    pub(crate) const ONE: FieldElement = FieldElement([1, 0, 0, 0]);

    /// Montgomery coefficient of Curve25519.
    pub(crate) const A: FieldElement = FieldElement([486_662, 0, 0, 0]);

    /// sqrt(-1) = 2^((p-1)/4), the canonical (even) root.
    pub(crate) const SQRT_M1: FieldElement = FieldElement([
        0xc4ee_1b27_4a0e_a0b0,
        0x2f43_1806_ad2f_e478,
        0x2b4d_0099_3dfb_d7a7,
        0x2b83_2480_4fc1_df0b,
    ]);

    pub(crate) const fn from_limbs(limbs: [u64; 4]) -> FieldElement {
        FieldElement(limbs)
    }

    pub(crate) const fn from_u64(x: u64) -> FieldElement {
        FieldElement([x, 0, 0, 0])
    }

    /// Interprets 32 little-endian bytes, all 256 bits significant.
    pub(crate) fn from_bytes(bytes: &[u8; 32]) -> FieldElement {
        let mut limbs = [0u64; 4];
        for (i, limb) in limbs.iter_mut().enumerate() {
            let mut word = [0u8; 8];
            word.copy_from_slice(&bytes[8 * i..8 * i + 8]);
            *limb = u64::from_le_bytes(word);
        }
        FieldElement(limbs)
    }

    /// Canonical little-endian encoding (value < p, top bit clear).
    pub(crate) fn to_bytes(self) -> [u8; 32] {
        let limbs = self.canonical();
        let mut out = [0u8; 32];
        for (i, limb) in limbs.iter().enumerate() {
            out[8 * i..8 * i + 8].copy_from_slice(&limb.to_le_bytes());
        }
        out
    }

    fn canonical(self) -> [u64; 4] {
        let mut x = self.0;
        // Inputs are below 2^256 < 3p, two conditional subtractions suffice.
        for _ in 0..2 {
            let (diff, borrow) = sub_limbs(&x, &P);
            if !borrow {
                x = diff;
            }
        }
        x
    }

    pub(crate) fn is_zero(self) -> bool {
        self.canonical() == [0; 4]
    }

    /// "Negative" in the Elligator sense: canonical value above (p - 1) / 2.
    pub(crate) fn is_negative(self) -> bool {
        let x = self.canonical();
        let (_, borrow) = sub_limbs(&P12, &x);
        borrow
    }

    /// Parity of the canonical representative (the Ed25519 sign convention).
    pub(crate) fn is_odd(self) -> bool {
        self.canonical()[0] & 1 == 1
    }

    pub(crate) fn square(self) -> FieldElement {
        self * self
    }

    fn pow(self, exp: &[u64; 4]) -> FieldElement {
        let mut acc = FieldElement::ONE;
        for limb in exp.iter().rev() {
            for bit in (0..64).rev() {
                acc = acc.square();
                if (limb >> bit) & 1 == 1 {
                    acc = acc * self;
                }
            }
        }
        acc
    }

    pub(crate) fn invert(self) -> FieldElement {
        self.pow(&PM2)
    }

    /// Legendre symbol: 1 for non-zero squares, -1 for non-squares, 0 for zero.
    pub(crate) fn legendre(self) -> i8 {
        let t = self.pow(&P12);
        if t.is_zero() {
            0
        } else if t == FieldElement::ONE {
            1
        } else {
            -1
        }
    }

    /// The non-negative square root, if one exists.
    pub(crate) fn sqrt(self) -> Option<FieldElement> {
        // p = 5 mod 8: candidate a^((p+3)/8) = a * a^((p-5)/8).
        let cand = self * self.pow(&P58);
        let root = if cand.square() == self {
            cand
        } else if cand.square() == -self {
            cand * FieldElement::SQRT_M1
        } else {
            return None;
        };
        Some(if root.is_negative() { -root } else { root })
    }
}

impl PartialEq for FieldElement {
    fn eq(&self, other: &Self) -> bool {
        self.canonical() == other.canonical()
    }
}

impl Eq for FieldElement {}

fn sub_limbs(a: &[u64; 4], b: &[u64; 4]) -> ([u64; 4], bool) {
    let mut out = [0u64; 4];
    let mut borrow = false;
    for i in 0..4 {
        let (d1, b1) = a[i].overflowing_sub(b[i]);
        let (d2, b2) = d1.overflowing_sub(borrow as u64);
        out[i] = d2;
        borrow = b1 || b2;
    }
    (out, borrow)
}

fn add_limbs(a: &[u64; 4], b: &[u64; 4]) -> ([u64; 4], bool) {
    let mut out = [0u64; 4];
    let mut carry = false;
    for i in 0..4 {
        let (s1, c1) = a[i].overflowing_add(b[i]);
        let (s2, c2) = s1.overflowing_add(carry as u64);
        out[i] = s2;
        carry = c1 || c2;
    }
    (out, carry)
}

impl Add for FieldElement {
    type Output = FieldElement;

    fn add(self, rhs: FieldElement) -> FieldElement {
        let (mut sum, mut carry) = add_limbs(&self.0, &rhs.0);
        // 2^256 = 38 (mod p)
        while carry {
            let (s, c) = add_limbs(&sum, &[38, 0, 0, 0]);
            sum = s;
            carry = c;
        }
        FieldElement(sum)
    }
}

impl Sub for FieldElement {
    type Output = FieldElement;

    fn sub(self, rhs: FieldElement) -> FieldElement {
        let (mut diff, mut borrow) = sub_limbs(&self.0, &rhs.0);
        while borrow {
            let (d, b) = sub_limbs(&diff, &[38, 0, 0, 0]);
            diff = d;
            borrow = b;
        }
        FieldElement(diff)
    }
}

impl Neg for FieldElement {
    type Output = FieldElement;

    fn neg(self) -> FieldElement {
        FieldElement::ZERO - self
    }
}

impl Mul for FieldElement {
    type Output = FieldElement;

    fn mul(self, rhs: FieldElement) -> FieldElement {
        let a = self.0;
        let b = rhs.0;
        let mut wide = [0u64; 8];
        for i in 0..4 {
            let mut carry: u128 = 0;
            for j in 0..4 {
                let t = (a[i] as u128) * (b[j] as u128) + (wide[i + j] as u128) + carry;
                wide[i + j] = t as u64;
                carry = t >> 64;
            }
            wide[i + 4] = carry as u64;
        }

        // Fold the high half: lo + 38 * hi.
        let mut out = [0u64; 4];
        let mut carry: u128 = 0;
        for i in 0..4 {
            let t = (wide[i] as u128) + 38 * (wide[i + 4] as u128) + carry;
            out[i] = t as u64;
            carry = t >> 64;
        }
        let mut acc = FieldElement(out);
        // carry < 39, fold once more through the addition path.
        if carry != 0 {
            acc = acc + FieldElement::from_u64((carry as u64) * 38);
        }
        acc
    }
}
