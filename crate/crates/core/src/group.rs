//! The prime-order group used by the equality test.
//!
//! Elements live in the order-ℓ subgroup of Curve25519 (handled in Edwards
//! form). The [`PrimeGroup`] trait abstracts the handful of operations the
//! protocol needs so a tiny group can stand in for it under test.

use core::fmt::Debug;

use curve25519_dalek::constants::ED25519_BASEPOINT_TABLE;
use curve25519_dalek::edwards::{CompressedEdwardsY, EdwardsPoint};
use curve25519_dalek::traits::{Identity, IsIdentity};
use rand_core::{CryptoRng, RngCore};

pub use curve25519_dalek::Scalar;

/// Operations the equality test needs from a cyclic group of prime order.
pub trait PrimeGroup {
    type Element: Copy + Eq + Debug;
    type Scalar: Copy + Eq + Debug;

    fn identity() -> Self::Element;
    fn generator() -> Self::Element;
    fn mul(a: &Self::Element, b: &Self::Element) -> Self::Element;
    fn exp(base: &Self::Element, k: &Self::Scalar) -> Self::Element;

    fn scalar_mul(a: &Self::Scalar, b: &Self::Scalar) -> Self::Scalar;
    fn scalar_neg(a: &Self::Scalar) -> Self::Scalar;
    fn scalar_is_zero(a: &Self::Scalar) -> bool;
    fn random_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Self::Scalar;

    /// Parses the canonical wire encoding; `None` for anything outside the group.
    fn decode(bytes: &[u8]) -> Option<Self::Element>;
    fn encode(element: &Self::Element) -> [u8; 32];

    fn gen_exp(k: &Self::Scalar) -> Self::Element {
        Self::exp(&Self::generator(), k)
    }

    fn random_element<R: RngCore + CryptoRng>(rng: &mut R) -> Self::Element {
        Self::gen_exp(&Self::random_scalar(rng))
    }

    fn random_nonzero_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Self::Scalar {
        loop {
            let k = Self::random_scalar(rng);
            if !Self::scalar_is_zero(&k) {
                return k;
            }
        }
    }
}

/// An element of the prime-order subgroup of Curve25519.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupElement(pub(crate) EdwardsPoint);

impl Debug for GroupElement {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "GroupElement(")?;
        for b in self.to_bytes() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

impl GroupElement {
    pub fn identity() -> Self {
        GroupElement(EdwardsPoint::identity())
    }

    pub fn generator() -> Self {
        GroupElement(curve25519_dalek::constants::ED25519_BASEPOINT_POINT)
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        GroupElement(ED25519_BASEPOINT_TABLE * &Scalar::random(rng))
    }

    pub fn mul(&self, other: &GroupElement) -> GroupElement {
        GroupElement(self.0 + other.0)
    }

    pub fn exp(&self, k: &Scalar) -> GroupElement {
        GroupElement(self.0 * k)
    }

    pub fn gen_exp(k: &Scalar) -> GroupElement {
        GroupElement(ED25519_BASEPOINT_TABLE * k)
    }

    pub fn invert(&self) -> GroupElement {
        GroupElement(-self.0)
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_identity()
    }

    /// 32-byte little-endian Edwards y with the sign of x in the top bit.
    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.compress().to_bytes()
    }

    /// Accepts only canonical encodings of prime-order-subgroup points.
    pub fn from_bytes(bytes: &[u8; 32]) -> Option<GroupElement> {
        let point = CompressedEdwardsY(*bytes).decompress()?;
        if !point.is_torsion_free() || point.compress().to_bytes() != *bytes {
            return None;
        }
        Some(GroupElement(point))
    }

    pub(crate) fn from_point_unchecked(point: EdwardsPoint) -> GroupElement {
        debug_assert!(point.is_torsion_free());
        GroupElement(point)
    }
}

/// Reduces a little-endian 32-byte string modulo the group order.
pub fn scalar_from_digest(digest: &[u8; 32]) -> Scalar {
    Scalar::from_bytes_mod_order(*digest)
}

/// Curve25519's prime-order subgroup as a [`PrimeGroup`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Curve25519;

impl PrimeGroup for Curve25519 {
    type Element = GroupElement;
    type Scalar = Scalar;

    fn identity() -> GroupElement {
        GroupElement::identity()
    }

    fn generator() -> GroupElement {
        GroupElement::generator()
    }

    fn mul(a: &GroupElement, b: &GroupElement) -> GroupElement {
        a.mul(b)
    }

    fn exp(base: &GroupElement, k: &Scalar) -> GroupElement {
        base.exp(k)
    }

    fn gen_exp(k: &Scalar) -> GroupElement {
        GroupElement::gen_exp(k)
    }

    fn scalar_mul(a: &Scalar, b: &Scalar) -> Scalar {
        a * b
    }

    fn scalar_neg(a: &Scalar) -> Scalar {
        -a
    }

    fn scalar_is_zero(a: &Scalar) -> bool {
        *a == Scalar::ZERO
    }

    fn random_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Scalar {
        Scalar::random(rng)
    }

    fn decode(bytes: &[u8]) -> Option<GroupElement> {
        let bytes: &[u8; 32] = bytes.try_into().ok()?;
        GroupElement::from_bytes(bytes)
    }

    fn encode(element: &GroupElement) -> [u8; 32] {
        element.to_bytes()
    }
}
