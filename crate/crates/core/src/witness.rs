//! Keyed memory measurement.
//!
//! The session key `k` picks `m` challenge addresses inside Ω; the O-TEE reads
//! them in order and hashes the co-residence flag with the words read:
//!
//! ```text
//! c_i    = Ω[ SHA-256(be64(i) ‖ k) mod |Ω| ]        i = 1..=m
//! digest = SHA-256(B_CO ‖ be64(w_1) ‖ … ‖ be64(w_m))
//! ```
//!
//! `B_CO` is 1 for a clean measurement and 0 if any read faulted or was
//! interrupted. Faulted slots hash as zero.

use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::device::{DeviceSim, MeasurementContext, Omega, ProcessId, ProcessImage, ReadOutcome, VirtualAddress, Word};
use crate::group::{scalar_from_digest, Scalar};

/// Locations sampled per measurement unless configured otherwise.
pub const DEFAULT_LOCATIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChallengeAddresses(Vec<VirtualAddress>);

impl ChallengeAddresses {
    pub fn as_slice(&self) -> &[VirtualAddress] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The `i`-th challenge address (1-based). Depends on `(i, k)` and Ω only.
pub fn challenge_address(k: &[u8; 32], i: u64, omega: &Omega) -> VirtualAddress {
    let digest: [u8; 32] = Sha256::new()
        .chain_update(i.to_be_bytes())
        .chain_update(k)
        .finalize()
        .into();
    omega.word_address(reduce_be(&digest, omega.total_words()))
}

/// Big-endian 256-bit integer modulo `n`.
fn reduce_be(digest: &[u8; 32], n: u64) -> u64 {
    digest.chunks_exact(8).fold(0u64, |rem, chunk| {
        let limb = u64::from_be_bytes(chunk.try_into().expect("8-byte chunk"));
        ((((rem as u128) << 64) | limb as u128) % n as u128) as u64
    })
}

/// Derives `m >= 1` challenge addresses from the session key.
pub fn select_addresses(k: &[u8; 32], m: usize, omega: &Omega) -> ChallengeAddresses {
    assert!(m >= 1, "at least one location must be measured");
    ChallengeAddresses((1..=m as u64).map(|i| challenge_address(k, i, omega)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeasureResult {
    pub b_co: bool,
    pub words: Vec<Word>,
}

impl MeasureResult {
    /// What an honest co-resident measurement of `image` would return.
    ///
    /// This is how a verifier predicts the witness from its own copy of the
    /// agent's memory: unmapped slots read as zero but the flag stays set.
    pub fn expected(image: &ProcessImage, addrs: &ChallengeAddresses) -> Self {
        MeasureResult {
            b_co: true,
            words: addrs
                .as_slice()
                .iter()
                .map(|a| image.get(*a).unwrap_or_default())
                .collect(),
        }
    }
}

/// Memory the O-TEE can read word by word.
pub trait MemoryView {
    fn read_word(&mut self, addr: VirtualAddress) -> ReadOutcome;
}

/// A process on a simulated device, read within one measurement session.
pub struct ProcessHandle<'a> {
    device: &'a mut DeviceSim,
    pid: ProcessId,
    ctx: MeasurementContext,
}

impl<'a> ProcessHandle<'a> {
    /// Opens a new measurement session on `device`.
    pub fn open(device: &'a mut DeviceSim, pid: ProcessId) -> Self {
        let ctx = device.begin_session();
        ProcessHandle { device, pid, ctx }
    }

    pub fn context(&self) -> &MeasurementContext {
        &self.ctx
    }
}

impl MemoryView for ProcessHandle<'_> {
    fn read_word(&mut self, addr: VirtualAddress) -> ReadOutcome {
        self.device.read_word(self.pid, addr, &mut self.ctx)
    }
}

/// Reads every challenge address in order, never stopping early.
pub fn measure<V: MemoryView + ?Sized>(view: &mut V, addrs: &ChallengeAddresses) -> MeasureResult {
    let mut b_co = true;
    let words = addrs
        .as_slice()
        .iter()
        .map(|addr| match view.read_word(*addr) {
            ReadOutcome::Word(w) => w,
            ReadOutcome::Exception(_) => {
                b_co = false;
                Word(0)
            }
        })
        .collect();
    MeasureResult { b_co, words }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Witness {
    pub digest: [u8; 32],
    /// The digest read little-endian and reduced modulo the group order.
    pub scalar: Scalar,
}

pub fn compute_witness(mr: &MeasureResult) -> Witness {
    let mut h = Sha256::new();
    h.update([u8::from(mr.b_co)]);
    for w in &mr.words {
        h.update(w.0.to_be_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    Witness {
        digest,
        scalar: scalar_from_digest(&digest),
    }
}
