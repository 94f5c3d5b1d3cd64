//! Deterministic simulation of devices, process memory, interrupts, partial
//! memory mirrors and traffic routing.
//!
//! Interrupts are keyed by (measurement session, read index) rather than by
//! time, so an attack script replays identically.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Width of the virtual address space.
pub const ADDRESS_BITS: u32 = 48;
pub const WORD_BYTES: u64 = 8;

/// Default Ω: one 1 MiB range of 2^17 words.
pub const DEFAULT_OMEGA_START: u64 = 0x100_0000_0000;
pub const DEFAULT_OMEGA_END: u64 = 0x100_0010_0000;

/// An 8-byte aligned address below 2^48.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualAddress(u64);

impl VirtualAddress {
    pub fn new(addr: u64) -> Result<Self> {
        if addr >> ADDRESS_BITS != 0 || !addr.is_multiple_of(WORD_BYTES) {
            return Err(Error::InvalidAddress(addr));
        }
        Ok(VirtualAddress(addr))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Word(pub u64);

/// Half-open `[start, end)` interval of word addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AddressRange {
    pub start: VirtualAddress,
    pub end: VirtualAddress,
}

impl AddressRange {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        // end may equal 2^48 exactly.
        if end > 1 << ADDRESS_BITS || !end.is_multiple_of(WORD_BYTES) {
            return Err(Error::InvalidAddress(end));
        }
        let start = VirtualAddress::new(start)?;
        if end <= start.0 {
            return Err(Error::InvalidOmega("empty range"));
        }
        Ok(AddressRange {
            start,
            end: VirtualAddress(end),
        })
    }

    pub fn words(&self) -> u64 {
        (self.end.0 - self.start.0) / WORD_BYTES
    }

    pub fn contains(&self, addr: VirtualAddress) -> bool {
        self.start <= addr && addr < self.end
    }
}

/// The published set of measurable address ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Omega {
    ranges: Vec<AddressRange>,
    total_words: u64,
}

impl Default for Omega {
    fn default() -> Self {
        Omega::new(alloc::vec![AddressRange::new(DEFAULT_OMEGA_START, DEFAULT_OMEGA_END)
            .expect("default range is valid")])
        .expect("default Omega is valid")
    }
}

impl Omega {
    /// Ranges must be non-empty, sorted and pairwise disjoint.
    pub fn new(ranges: Vec<AddressRange>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidOmega("no ranges"));
        }
        for pair in ranges.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(Error::InvalidOmega("ranges overlap or are unsorted"));
            }
        }
        let total_words = ranges.iter().map(AddressRange::words).sum();
        Ok(Omega { ranges, total_words })
    }

    /// A single range of `words` words starting at `start`.
    pub fn contiguous(start: u64, words: u64) -> Result<Self> {
        let end = words
            .checked_mul(WORD_BYTES)
            .and_then(|len| start.checked_add(len))
            .ok_or(Error::InvalidOmega("range overflows"))?;
        Omega::new(alloc::vec![AddressRange::new(start, end)?])
    }

    pub fn ranges(&self) -> &[AddressRange] {
        &self.ranges
    }

    pub fn total_words(&self) -> u64 {
        self.total_words
    }

    pub fn contains(&self, addr: VirtualAddress) -> bool {
        self.ranges.iter().any(|r| r.contains(addr))
    }

    /// Address of the `index`-th word of the concatenated ranges.
    pub fn word_address(&self, index: u64) -> VirtualAddress {
        let mut rest = index % self.total_words;
        for r in &self.ranges {
            if rest < r.words() {
                return VirtualAddress(r.start.0 + rest * WORD_BYTES);
            }
            rest -= r.words();
        }
        unreachable!("index reduced modulo total_words")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessId(pub u32);

/// Sparse virtual memory of one process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcessImage {
    pub pid: ProcessId,
    pub device: DeviceId,
    memory: BTreeMap<VirtualAddress, Word>,
}

impl ProcessImage {
    pub fn empty(pid: ProcessId, device: DeviceId) -> Self {
        ProcessImage {
            pid,
            device,
            memory: BTreeMap::new(),
        }
    }

    pub fn map(&mut self, addr: VirtualAddress, word: Word) {
        self.memory.insert(addr, word);
    }

    pub fn get(&self, addr: VirtualAddress) -> Option<Word> {
        self.memory.get(&addr).copied()
    }

    pub fn mapped_words(&self) -> usize {
        self.memory.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VirtualAddress, Word)> + '_ {
        self.memory.iter().map(|(a, w)| (*a, *w))
    }

    /// Same memory contents, ignoring which process or device holds them.
    pub fn same_memory(&self, other: &ProcessImage) -> bool {
        self.memory == other.memory
    }
}

/// Fills the first `size_words` words of Ω from a stream seeded by `seed`.
///
/// Equal seeds and sizes give bit-identical memory on any device, which is
/// how an aggressor reconstructs the memory of its own agent.
pub fn load_process(
    device: DeviceId,
    pid: ProcessId,
    seed: u64,
    size_words: u64,
    omega: &Omega,
) -> Result<ProcessImage> {
    if size_words == 0 || size_words > omega.total_words() {
        return Err(Error::RegionOverflow {
            requested: size_words,
            capacity: omega.total_words(),
        });
    }
    let mut stream = ChaCha20Rng::seed_from_u64(seed);
    let mut image = ProcessImage::empty(pid, device);
    for index in 0..size_words {
        image.map(omega.word_address(index), Word(stream.next_u64()));
    }
    Ok(image)
}

/// Copies each mapped word of `src` with probability `fraction` into a new
/// image on `dst_device`; everything else stays unmapped.
pub fn clone_memory_subset<R: RngCore>(
    src: &ProcessImage,
    dst_device: DeviceId,
    dst_pid: ProcessId,
    fraction: f64,
    rng: &mut R,
) -> ProcessImage {
    let fraction = fraction.clamp(0.0, 1.0);
    // Compare against a 53-bit uniform so f = 1 copies everything and f = 0 nothing.
    let threshold = (fraction * (1u64 << 53) as f64) as u64;
    let mut image = ProcessImage::empty(dst_pid, dst_device);
    for (addr, word) in src.iter() {
        if (rng.next_u64() >> 11) < threshold {
            image.map(addr, word);
        }
    }
    image
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExceptionKind {
    Unmapped,
    Interrupt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExceptionRecord {
    pub read_index: u64,
    pub addr: VirtualAddress,
    pub kind: ExceptionKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadOutcome {
    Word(Word),
    Exception(ExceptionKind),
}

/// Per-measurement exit log, the simulator's analogue of an enclave's exit info.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeasurementContext {
    pub session: u64,
    reads: u64,
    exceptions: Vec<ExceptionRecord>,
}

impl MeasurementContext {
    pub fn new(session: u64) -> Self {
        MeasurementContext {
            session,
            reads: 0,
            exceptions: Vec::new(),
        }
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn exceptions(&self) -> &[ExceptionRecord] {
        &self.exceptions
    }

    pub fn flagged(&self) -> bool {
        !self.exceptions.is_empty()
    }
}

/// A simulated device: its processes, whether it hosts an O-TEE, and the
/// interrupts an adversary has scheduled on it.
#[derive(Clone, Debug)]
pub struct DeviceSim {
    pub id: DeviceId,
    pub has_otee: bool,
    processes: BTreeMap<ProcessId, ProcessImage>,
    interrupts: BTreeSet<(u64, u64)>,
    next_session: u64,
}

impl DeviceSim {
    pub fn new(id: DeviceId, has_otee: bool) -> Self {
        DeviceSim {
            id,
            has_otee,
            processes: BTreeMap::new(),
            interrupts: BTreeSet::new(),
            next_session: 1,
        }
    }

    pub fn add_process(&mut self, mut image: ProcessImage) {
        image.device = self.id;
        self.processes.insert(image.pid, image);
    }

    pub fn process(&self, pid: ProcessId) -> Option<&ProcessImage> {
        self.processes.get(&pid)
    }

    pub fn processes(&self) -> impl Iterator<Item = &ProcessImage> {
        self.processes.values()
    }

    /// Fires an interrupt on the `read_index`-th read (1-based) of `session`.
    pub fn schedule_interrupt(&mut self, session: u64, read_index: u64) {
        self.interrupts.insert((session, read_index));
    }

    pub fn pending_interrupts(&self) -> usize {
        self.interrupts.len()
    }

    /// Opens the next measurement session (numbered from 1).
    pub fn begin_session(&mut self) -> MeasurementContext {
        let ctx = MeasurementContext::new(self.next_session);
        self.next_session += 1;
        ctx
    }

    /// Reads one word of `pid` within the measurement `ctx`.
    ///
    /// Unmapped addresses and scheduled interrupts are returned as exceptions
    /// and logged in `ctx`; an interrupt is consumed when it fires.
    pub fn read_word(&mut self, pid: ProcessId, addr: VirtualAddress, ctx: &mut MeasurementContext) -> ReadOutcome {
        ctx.reads += 1;
        let index = ctx.reads;
        let kind = if self.interrupts.remove(&(ctx.session, index)) {
            ExceptionKind::Interrupt
        } else {
            match self.processes.get(&pid).and_then(|p| p.get(addr)) {
                Some(word) => return ReadOutcome::Word(word),
                None => ExceptionKind::Unmapped,
            }
        };
        ctx.exceptions.push(ExceptionRecord {
            read_index: index,
            addr,
            kind,
        });
        ReadOutcome::Exception(kind)
    }
}

/// Connections from `source_pid` on `source_device` leave through
/// `egress_device`, where `proxy_pid` fronts them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingRule {
    pub source_device: DeviceId,
    pub source_pid: ProcessId,
    pub egress_device: DeviceId,
    pub proxy_pid: ProcessId,
}

/// Where a connection actually leaves the simulated network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Endpoint {
    pub device: DeviceId,
    pub pid: ProcessId,
}

/// All devices of a scenario plus the routing table.
#[derive(Clone, Debug, Default)]
pub struct World {
    devices: BTreeMap<DeviceId, DeviceSim>,
    routes: Vec<RoutingRule>,
}

impl World {
    pub fn new() -> Self {
        World::default()
    }

    pub fn add_device(&mut self, device: DeviceSim) {
        self.devices.insert(device.id, device);
    }

    pub fn device(&self, id: DeviceId) -> Option<&DeviceSim> {
        self.devices.get(&id)
    }

    pub fn device_mut(&mut self, id: DeviceId) -> Option<&mut DeviceSim> {
        self.devices.get_mut(&id)
    }

    pub fn set_route(&mut self, rule: RoutingRule) {
        self.routes.retain(|r| !(r.source_device == rule.source_device && r.source_pid == rule.source_pid));
        self.routes.push(rule);
    }

    /// The device and fronting process of a connection opened by `pid` on `device`.
    pub fn resolve_endpoint(&self, device: DeviceId, pid: ProcessId) -> Endpoint {
        self.routes
            .iter()
            .find(|r| r.source_device == device && r.source_pid == pid)
            .map(|r| Endpoint {
                device: r.egress_device,
                pid: r.proxy_pid,
            })
            .unwrap_or(Endpoint { device, pid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const D: DeviceId = DeviceId(1);
    const D2: DeviceId = DeviceId(2);
    const P: ProcessId = ProcessId(10);

    fn small_omega() -> Omega {
        Omega::contiguous(DEFAULT_OMEGA_START, 64).unwrap()
    }

    #[test]
    fn address_validation() {
        assert!(VirtualAddress::new(0x1000).is_ok());
        assert_eq!(VirtualAddress::new(0x1001), Err(Error::InvalidAddress(0x1001)));
        assert!(VirtualAddress::new(1 << 48).is_err());
        assert!(VirtualAddress::new((1 << 48) - 8).is_ok());
    }

    #[test]
    fn omega_validation_and_indexing() {
        let omega = Omega::default();
        assert_eq!(omega.total_words(), 1 << 17);
        assert!(Omega::new(Vec::new()).is_err());
        let a = AddressRange::new(0x1000, 0x1010).unwrap();
        let b = AddressRange::new(0x1008, 0x1020).unwrap();
        assert!(Omega::new(alloc::vec![a, b]).is_err());
        assert!(Omega::new(alloc::vec![b, a]).is_err());
        assert!(AddressRange::new(0x1000, 0x1000).is_err());

        let c = AddressRange::new(0x2000, 0x2008).unwrap();
        let omega = Omega::new(alloc::vec![a, c]).unwrap();
        assert_eq!(omega.total_words(), 3);
        assert_eq!(omega.word_address(1).get(), 0x1008);
        assert_eq!(omega.word_address(2).get(), 0x2000);
        assert_eq!(omega.word_address(3).get(), 0x1000);
    }

    #[test]
    fn load_is_deterministic_per_seed() {
        let omega = Omega::default();
        let a = load_process(D, P, 7, 1000, &omega).unwrap();
        let b = load_process(D2, ProcessId(3), 7, 1000, &omega).unwrap();
        assert!(a.same_memory(&b));
        assert_eq!(a.mapped_words(), 1000);

        let one = load_process(D, P, 7, 1, &omega).unwrap();
        assert_eq!(one.mapped_words(), 1);
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let omega = Omega::default();
        let mut same = 0usize;
        let mut total = 0usize;
        for seed in 0..1000u64 {
            let a = load_process(D, P, seed, 16, &omega).unwrap();
            let b = load_process(D, P, seed + 1_000_000, 16, &omega).unwrap();
            for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
                same += usize::from(x == y);
                total += 1;
            }
        }
        assert!(same * 100 <= total, "{same}/{total}");
    }

    #[test]
    fn oversized_process_is_rejected() {
        let err = load_process(D, P, 1, 65, &small_omega()).unwrap_err();
        assert_eq!(err, Error::RegionOverflow { requested: 65, capacity: 64 });
        assert!(load_process(D, P, 1, 0, &small_omega()).is_err());
    }

    #[test]
    fn interrupt_fires_once_at_its_read_index() {
        let omega = small_omega();
        let mut dev = DeviceSim::new(D, true);
        dev.add_process(load_process(D, P, 1, 64, &omega).unwrap());
        dev.schedule_interrupt(1, 3);
        let mut ctx = dev.begin_session();
        let outcomes: Vec<_> = (0..5)
            .map(|i| dev.read_word(P, omega.word_address(i), &mut ctx))
            .collect();
        assert!(matches!(outcomes[0], ReadOutcome::Word(_)));
        assert!(matches!(outcomes[1], ReadOutcome::Word(_)));
        assert_eq!(outcomes[2], ReadOutcome::Exception(ExceptionKind::Interrupt));
        assert!(matches!(outcomes[3], ReadOutcome::Word(_)));
        assert!(ctx.flagged());
        assert_eq!(ctx.exceptions()[0].read_index, 3);
        assert_eq!(dev.pending_interrupts(), 0);

        // The next session is not affected.
        let mut ctx = dev.begin_session();
        assert_eq!(ctx.session, 2);
        for i in 0..5 {
            dev.read_word(P, omega.word_address(i), &mut ctx);
        }
        assert!(!ctx.flagged());
    }

    #[test]
    fn unmapped_read_is_an_exception() {
        let mut dev = DeviceSim::new(D, true);
        dev.add_process(ProcessImage::empty(P, D));
        let mut ctx = dev.begin_session();
        let addr = VirtualAddress::new(DEFAULT_OMEGA_START).unwrap();
        assert_eq!(dev.read_word(P, addr, &mut ctx), ReadOutcome::Exception(ExceptionKind::Unmapped));
        // Unknown process reads as unmapped too.
        assert_eq!(
            dev.read_word(ProcessId(99), addr, &mut ctx),
            ReadOutcome::Exception(ExceptionKind::Unmapped)
        );
        assert_eq!(ctx.exceptions().len(), 2);
    }

    #[test]
    fn clone_fractions() {
        let omega = Omega::default();
        let src = load_process(D2, P, 5, 4096, &omega).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let full = clone_memory_subset(&src, D, ProcessId(2), 1.0, &mut rng);
        assert!(full.same_memory(&src));
        assert_eq!(full.device, D);
        let none = clone_memory_subset(&src, D, ProcessId(2), 0.0, &mut rng);
        assert_eq!(none.mapped_words(), 0);
        let half = clone_memory_subset(&src, D, ProcessId(2), 0.5, &mut rng);
        let n = half.mapped_words() as f64;
        // Binomial(4096, 0.5): sd 32.
        assert!((n - 2048.0).abs() < 160.0, "{n}");
        assert!(half.iter().all(|(a, w)| src.get(a) == Some(w)));
    }

    #[test]
    fn routing_resolution() {
        let mut world = World::new();
        world.add_device(DeviceSim::new(D, true));
        world.add_device(DeviceSim::new(D2, false));
        assert_eq!(world.resolve_endpoint(D2, P), Endpoint { device: D2, pid: P });
        world.set_route(RoutingRule {
            source_device: D2,
            source_pid: P,
            egress_device: D,
            proxy_pid: ProcessId(77),
        });
        assert_eq!(world.resolve_endpoint(D2, P), Endpoint { device: D, pid: ProcessId(77) });
        assert_eq!(world.resolve_endpoint(D2, ProcessId(1)), Endpoint { device: D2, pid: ProcessId(1) });
    }
}
