//! Privacy-preserving equality test.
//!
//! Three flows between a prover holding witness `w` and a verifier holding a
//! guess `w'`:
//!
//! 1. prover sends a random `u`;
//! 2. verifier sends the commitment `v = g^s * u^w'`;
//! 3. prover answers `y = g^t`, `z = v^t * u^(-w t)`;
//!
//! and the verifier accepts iff `z = y^s`, which holds exactly when `w = w'`.
//! A verifier that guessed wrong learns only that its guess was wrong.

use rand_core::{CryptoRng, RngCore};

use crate::elligator::{encode_uniform, UniformBytes32};
use crate::error::{Error, Result};
use crate::group::{Curve25519, GroupElement, PrimeGroup, Scalar};

/// Resampling budget for an encodable commitment. Each attempt succeeds with
/// probability about 1/2, so exhausting it means the RNG is broken.
pub const MAX_ENCODING_ATTEMPTS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProverState<G: PrimeGroup> {
    pub u: G::Element,
    pub w: G::Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifierState<G: PrimeGroup> {
    pub u: G::Element,
    pub s: G::Scalar,
    pub w_expected: G::Scalar,
    pub v: G::Element,
    /// Uniform encoding of `v`, present when the commitment was forced encodable.
    pub nonce: Option<UniformBytes32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PpetResponse<G: PrimeGroup> {
    pub y: G::Element,
    pub z: G::Element,
}

impl<G: PrimeGroup> PpetResponse<G> {
    /// `y ‖ z` as canonical encodings.
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&G::encode(&self.y));
        out[32..].copy_from_slice(&G::encode(&self.z));
        out
    }

    pub fn from_bytes(bytes: &[u8; 64]) -> Option<Self> {
        Some(PpetResponse {
            y: G::decode(&bytes[..32])?,
            z: G::decode(&bytes[32..])?,
        })
    }
}

/// First flow: a uniformly random group element.
pub fn prover_init<G: PrimeGroup, R: RngCore + CryptoRng>(rng: &mut R) -> G::Element {
    G::random_element(rng)
}

/// Commitment for a given secret exponent `s`.
pub fn commit<G: PrimeGroup>(u: &G::Element, w_expected: &G::Scalar, s: &G::Scalar) -> VerifierState<G> {
    let v = G::mul(&G::gen_exp(s), &G::exp(u, w_expected));
    VerifierState {
        u: *u,
        s: *s,
        w_expected: *w_expected,
        v,
        nonce: None,
    }
}

/// Second flow with a fresh uniform `s`, no encodability requirement.
pub fn commit_random<G: PrimeGroup, R: RngCore + CryptoRng>(
    u: &G::Element,
    w_expected: &G::Scalar,
    rng: &mut R,
) -> VerifierState<G> {
    commit::<G>(u, w_expected, &G::random_scalar(rng))
}

/// Second flow over Curve25519.
///
/// With `require_encodable`, `s` is resampled until `v` has a uniform
/// encoding, and that encoding is kept in the returned state.
pub fn verifier_commit<R: RngCore + CryptoRng>(
    u: &GroupElement,
    w_expected: &Scalar,
    rng: &mut R,
    require_encodable: bool,
) -> Result<VerifierState<Curve25519>> {
    if !require_encodable {
        return Ok(commit_random::<Curve25519, R>(u, w_expected, rng));
    }
    // u^w' is fixed across attempts.
    let masked = u.exp(w_expected);
    for _ in 0..MAX_ENCODING_ATTEMPTS {
        let s = Scalar::random(rng);
        let v = GroupElement::gen_exp(&s).mul(&masked);
        if let Ok(nonce) = encode_uniform(&v, rng) {
            return Ok(VerifierState {
                u: *u,
                s,
                w_expected: *w_expected,
                v,
                nonce: Some(nonce),
            });
        }
    }
    Err(Error::EncodingExhausted(MAX_ENCODING_ATTEMPTS))
}

/// Third flow for a given non-zero `t`.
pub fn respond<G: PrimeGroup>(u: &G::Element, v: &G::Element, w: &G::Scalar, t: &G::Scalar) -> PpetResponse<G> {
    let y = G::gen_exp(t);
    let neg_wt = G::scalar_neg(&G::scalar_mul(w, t));
    let z = G::mul(&G::exp(v, t), &G::exp(u, &neg_wt));
    PpetResponse { y, z }
}

/// Third flow. `v = None` means the received value did not parse into the
/// group, in which case two independent random elements are returned.
pub fn prover_respond<G: PrimeGroup, R: RngCore + CryptoRng>(
    u: &G::Element,
    v: Option<&G::Element>,
    w: &G::Scalar,
    rng: &mut R,
) -> PpetResponse<G> {
    match v {
        Some(v) => {
            let t = G::random_nonzero_scalar(rng);
            respond::<G>(u, v, w, &t)
        }
        None => PpetResponse {
            y: G::random_element(rng),
            z: G::random_element(rng),
        },
    }
}

/// Third flow on the raw transport, where `v` arrives as bytes.
pub fn prover_respond_raw<G: PrimeGroup, R: RngCore + CryptoRng>(
    u: &G::Element,
    v_raw: &[u8],
    w: &G::Scalar,
    rng: &mut R,
) -> PpetResponse<G> {
    let v = G::decode(v_raw);
    prover_respond::<G, R>(u, v.as_ref(), w, rng)
}

/// Final check: `z == y^s`.
pub fn verifier_check<G: PrimeGroup>(resp: &PpetResponse<G>, st: &VerifierState<G>) -> bool {
    resp.z == G::exp(&resp.y, &st.s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elligator::decode_uniform;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    type C = Curve25519;

    #[test]
    fn complete_and_sound_over_curve25519() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..200 {
            let w = Scalar::random(&mut rng);
            let u = prover_init::<C, _>(&mut rng);
            let st = verifier_commit(&u, &w, &mut rng, false).unwrap();
            let resp = prover_respond::<C, _>(&u, Some(&st.v), &w, &mut rng);
            assert!(verifier_check(&resp, &st));

            let wrong = commit_random::<C, _>(&u, &(w + Scalar::ONE), &mut rng);
            let resp = prover_respond::<C, _>(&u, Some(&wrong.v), &w, &mut rng);
            assert!(!verifier_check(&resp, &wrong));
        }
    }

    #[test]
    fn zero_guess_commits_to_g_s() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let u = GroupElement::random(&mut rng);
        let s = Scalar::random(&mut rng);
        let st = commit::<C>(&u, &Scalar::ZERO, &s);
        assert_eq!(st.v, GroupElement::gen_exp(&s));
    }

    #[test]
    fn encodable_commitments_round_trip_through_the_nonce() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let u = GroupElement::random(&mut rng);
        let w = Scalar::random(&mut rng);
        for _ in 0..100 {
            let st = verifier_commit(&u, &w, &mut rng, true).unwrap();
            let nonce = st.nonce.expect("encodable commitment carries its nonce");
            assert_eq!(decode_uniform(&nonce), st.v);
            assert_eq!(st.v, GroupElement::gen_exp(&st.s).mul(&u.exp(&w)));
        }
    }

    /// An RNG whose output never changes, so resampling cannot help.
    struct Stuck;

    impl RngCore for Stuck {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0);
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> core::result::Result<(), rand_core::Error> {
            dest.fill(0);
            Ok(())
        }
    }

    impl CryptoRng for Stuck {}

    #[test]
    fn broken_rng_exhausts_encoding_budget() {
        // s = 0 every time, so v = identity + torsion(0) = identity: never encodable.
        let u = GroupElement::generator();
        let err = verifier_commit(&u, &Scalar::ZERO, &mut Stuck, true).unwrap_err();
        assert_eq!(err, Error::EncodingExhausted(MAX_ENCODING_ATTEMPTS));
    }

    #[test]
    fn malformed_raw_commitment_yields_random_pair() {
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        let u = GroupElement::random(&mut rng);
        let w = Scalar::random(&mut rng);
        let a = prover_respond_raw::<C, _>(&u, &[0xff; 32], &w, &mut rng);
        let b = prover_respond_raw::<C, _>(&u, &[0xff; 32], &w, &mut rng);
        assert_ne!(a, b);
        assert_ne!(a.y, a.z);
        // Wrong length never parses either.
        let c = prover_respond_raw::<C, _>(&u, &[1, 2, 3], &w, &mut rng);
        assert_ne!(c.y, GroupElement::identity());
    }

    #[test]
    fn response_wire_encoding() {
        let mut rng = ChaCha20Rng::seed_from_u64(25);
        let resp = PpetResponse::<C> {
            y: GroupElement::random(&mut rng),
            z: GroupElement::random(&mut rng),
        };
        assert_eq!(PpetResponse::<C>::from_bytes(&resp.to_bytes()), Some(resp));
        assert_eq!(PpetResponse::<C>::from_bytes(&[0xff; 64]), None);
    }
}
