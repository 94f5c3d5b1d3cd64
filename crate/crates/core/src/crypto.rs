//! Hashing, key derivation and signatures.

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand_core::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

/// Info label of the witness key.
pub const WITNESS_KEY_LABEL: &[u8] = b"odt witness key";

pub fn hash256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Hashes the concatenation of `parts` without an intermediate buffer.
pub fn hash256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// HKDF-SHA256 with an all-zero salt: expands `secret` under `label`.
pub fn hkdf_expand_label(secret: &[u8; 32], label: &[u8]) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(Some(&[0u8; 32]), secret);
    let mut okm = [0u8; 32];
    hk.expand(label, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    okm
}

/// k = HKDF(HS), the key that seeds address selection and binds the token.
pub fn hkdf_derive(handshake_secret: &[u8; 32]) -> [u8; 32] {
    hkdf_expand_label(handshake_secret, WITNESS_KEY_LABEL)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

/// Ed25519 key pair held by an O-TEE.
#[derive(Clone)]
pub struct SigKeyPair {
    signing: SigningKey,
}

impl core::fmt::Debug for SigKeyPair {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SigKeyPair")
            .field("pk", &self.public_key())
            .finish_non_exhaustive()
    }
}

impl SigKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut sk = [0u8; 32];
        rng.fill_bytes(&mut sk);
        Self::from_secret(sk)
    }

    pub fn from_secret(sk: [u8; 32]) -> Self {
        SigKeyPair {
            signing: SigningKey::from_bytes(&sk),
        }
    }

    pub fn secret_key(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }
}

/// Never panics: malformed keys or signatures simply fail to verify.
pub fn verify(pk: &[u8; 32], msg: &[u8], sig: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(pk) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify_strict(msg, &sig).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn hex(bytes: &[u8]) -> alloc::string::String {
        use core::fmt::Write;
        let mut s = alloc::string::String::new();
        for b in bytes {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }

    #[test]
    fn sha256_published_vectors() {
        assert_eq!(
            hex(&hash256(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hex(&hash256(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(hash256_parts(&[b"a", b"bc"]), hash256(b"abc"));
    }

    #[test]
    fn hkdf_known_answer() {
        // Computed with Python's hmac module (RFC 5869 extract/expand by hand).
        let mut hs = [0u8; 32];
        for (i, b) in hs.iter_mut().enumerate() {
            *b = i as u8;
        }
        assert_eq!(
            hex(&hkdf_derive(&hs)),
            "7542f98c6a1f8c9ab5d4050c53be2f1d8ed1f0fb5c7f4a402570ed140033cf56"
        );
        assert_eq!(
            hex(&hkdf_expand_label(&hs, b"odt finished")),
            "6c137205eff020b9e842bac1807b1de7f2bfe4e9343e63199da457ea1714fdb2"
        );
    }

    #[test]
    fn hkdf_avalanche() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let trials = 500;
        let mut flipped = 0u32;
        for i in 0..trials {
            let mut hs = [0u8; 32];
            rng.fill_bytes(&mut hs);
            let a = hkdf_derive(&hs);
            hs[i % 32] ^= 1 << (i % 8);
            let b = hkdf_derive(&hs);
            flipped += a.iter().zip(&b).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>();
        }
        let mean = f64::from(flipped) / f64::from(trials as u32);
        // 256 bits, expect 128 with sd 8 per trial; the mean has sd ~0.36.
        assert!((mean - 128.0).abs() < 2.0, "{mean}");
    }

    #[test]
    fn signatures() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let keys = SigKeyPair::generate(&mut rng);
        let other = SigKeyPair::generate(&mut rng);
        let msg = [7u8; 96];
        let sig = keys.sign(&msg);
        assert!(verify(&keys.public_key(), &msg, &sig));
        assert_eq!(sig, keys.sign(&msg));
        assert!(!verify(&other.public_key(), &msg, &sig));
        for bit in [0usize, 100, 767] {
            let mut m = msg;
            m[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&keys.public_key(), &m, &sig));
        }
        for bit in [0usize, 300, 511] {
            let mut s = sig;
            s.0[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&keys.public_key(), &msg, &s));
        }
        assert!(!verify(&[0xff; 32], &msg, &sig));
        assert!(!verify(&keys.public_key(), &msg, &Signature([0xff; 64])));
    }
}
