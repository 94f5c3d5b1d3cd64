//! Scenario files: a small world of devices, an agent connection and the
//! verdict the aggressor is expected to reach.
//!
//! ```toml
//! name = "honest"
//! runs = 1
//! locations = 5
//!
//! [omega]
//! start = 0x10000000000
//! words = 4096
//!
//! [[device]]
//! id = 1
//! otee = true          # hosts an O-TEE
//! registered = true    # its key is in the aggressor's registry (default)
//!
//! [[process]]
//! device = 1
//! pid = 7
//! seed = 42            # memory contents
//! size = 4096          # words, from the start of Ω
//!
//! [[clone]]            # re-drawn for every run
//! from = { device = 2, pid = 7 }
//! to = { device = 1, pid = 8 }
//! fraction = 0.5
//!
//! [[route]]
//! from = { device = 2, pid = 7 }
//! via = { device = 1, pid = 8 }
//!
//! [[interrupt]]
//! device = 1
//! session = 1          # measurement session on that device, from 1
//! read = 3             # 1-based read index within the session
//!
//! [agent]              # the process that opens the connection
//! device = 1
//! pid = 7
//!
//! [aggressor]          # how the aggressor rebuilds its agent's memory
//! seed = 42
//! size = 4096
//!
//! [expect]
//! verdict = "Protected"    # every run, or
//! # rate = 0.03125         # Protected rate inside the 95% interval
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use odt_core::bounds::{binomial_ci, Z_95};
use odt_core::device::{
    clone_memory_subset, load_process, DeviceId, DeviceSim, Omega, ProcessId, RoutingRule, World, DEFAULT_OMEGA_START,
};
use odt_core::endpoints::{
    run_loopback, AggressorConfig, MeasurementConfig, OteeClient, PlainClient, ProverReport, Registry, ServerSession,
    Verdict,
};
use odt_core::witness::{select_addresses, MeasureResult};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OdtError, Result};
use crate::net::{child_rng, otee_identity};

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub runs: u64,
    #[serde(default = "default_locations")]
    pub locations: usize,
    #[serde(default)]
    pub omega: OmegaSpec,
    #[serde(default, rename = "device")]
    pub devices: Vec<DeviceSpec>,
    #[serde(default, rename = "process")]
    pub processes: Vec<ProcessSpec>,
    #[serde(default, rename = "clone")]
    pub clones: Vec<CloneSpec>,
    #[serde(default, rename = "route")]
    pub routes: Vec<RouteSpec>,
    #[serde(default, rename = "interrupt")]
    pub interrupts: Vec<InterruptSpec>,
    pub agent: EndpointSpec,
    pub aggressor: ImageSpec,
    pub expect: Expectation,
}

fn one() -> u64 {
    1
}

fn default_locations() -> usize {
    odt_core::witness::DEFAULT_LOCATIONS
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaSpec {
    pub start: u64,
    pub words: u64,
}

impl Default for OmegaSpec {
    fn default() -> Self {
        OmegaSpec {
            start: DEFAULT_OMEGA_START,
            words: Omega::default().total_words(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: u32,
    #[serde(default)]
    pub otee: bool,
    #[serde(default = "yes")]
    pub registered: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub device: u32,
    pub pid: u32,
    pub seed: u64,
    pub size: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSpec {
    pub device: u32,
    pub pid: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CloneSpec {
    pub from: EndpointSpec,
    pub to: EndpointSpec,
    pub fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub from: EndpointSpec,
    pub via: EndpointSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InterruptSpec {
    pub device: u32,
    pub session: u64,
    pub read: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub seed: u64,
    pub size: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    #[serde(default)]
    pub verdict: Option<VerdictName>,
    #[serde(default)]
    pub rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
pub enum VerdictName {
    Protected,
    Inconclusive,
}

impl From<VerdictName> for Verdict {
    fn from(v: VerdictName) -> Self {
        match v {
            VerdictName::Protected => Verdict::Protected,
            VerdictName::Inconclusive => Verdict::Inconclusive,
        }
    }
}

impl ScenarioSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| invalid(path, e.to_string()))?;
        spec.validate(path)?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let devices: BTreeSet<u32> = self.devices.iter().map(|d| d.id).collect();
        if devices.len() != self.devices.len() {
            return Err(invalid(path, "duplicate device id"));
        }
        let mut processes = BTreeSet::new();
        let check_device = |d: u32, what: &str| {
            if devices.contains(&d) {
                Ok(())
            } else {
                Err(invalid(path, format!("{what} refers to unknown device {d}")))
            }
        };
        for p in &self.processes {
            check_device(p.device, "process")?;
            if !processes.insert((p.device, p.pid)) {
                return Err(invalid(path, format!("duplicate process {}:{}", p.device, p.pid)));
            }
        }
        for c in &self.clones {
            check_device(c.to.device, "clone target")?;
            if !processes.contains(&(c.from.device, c.from.pid)) {
                return Err(invalid(path, "clone source is not a declared process"));
            }
            if !(0.0..=1.0).contains(&c.fraction) {
                return Err(invalid(path, "clone fraction must lie in [0, 1]"));
            }
            if !processes.insert((c.to.device, c.to.pid)) {
                return Err(invalid(path, "clone target collides with an existing process"));
            }
        }
        for r in &self.routes {
            check_device(r.from.device, "route source")?;
            check_device(r.via.device, "route egress")?;
            if !processes.contains(&(r.via.device, r.via.pid)) {
                return Err(invalid(path, "route proxy is not a declared process"));
            }
        }
        for i in &self.interrupts {
            check_device(i.device, "interrupt")?;
            if i.session == 0 || i.read == 0 {
                return Err(invalid(path, "interrupt session and read index start at 1"));
            }
        }
        if !processes.contains(&(self.agent.device, self.agent.pid)) {
            return Err(invalid(path, "agent is not a declared process"));
        }
        if self.runs == 0 {
            return Err(invalid(path, "runs must be at least 1"));
        }
        if self.locations == 0 {
            return Err(invalid(path, "locations must be at least 1"));
        }
        Omega::contiguous(self.omega.start, self.omega.words).map_err(|e| invalid(path, e.to_string()))?;
        match (self.expect.verdict, self.expect.rate) {
            (Some(_), None) => Ok(()),
            (None, Some(r)) if (0.0..=1.0).contains(&r) => Ok(()),
            (None, Some(_)) => Err(invalid(path, "expected rate must lie in [0, 1]")),
            _ => Err(invalid(path, "[expect] needs exactly one of `verdict` or `rate`")),
        }
    }
}

fn invalid(path: &Path, reason: impl Into<String>) -> OdtError {
    OdtError::Scenario {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Facts behind a Protected verdict, checked on every such run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BindingChain {
    /// The signing O-TEE is registered for the device it ran on.
    pub registered_otee: bool,
    /// The measured process lives on the O-TEE's device.
    pub measured_on_device: bool,
    /// The measured words are the agent's memory at the challenge addresses.
    pub measured_agent_image: bool,
    pub b_co: bool,
    pub same_k: bool,
}

impl BindingChain {
    pub fn holds(&self) -> bool {
        self.registered_otee && self.measured_on_device && self.measured_agent_image && self.b_co && self.same_k
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub verdict: &'static str,
    pub signature_ok: bool,
    pub equality_ok: bool,
    pub heartbeat: bool,
    pub binding: Option<BindingChain>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub runs: u64,
    pub protected: u64,
    pub inconclusive: u64,
    pub expected_verdict: Option<&'static str>,
    pub expected_rate: Option<f64>,
    pub empirical_rate: f64,
    /// 95% Wilson interval of the Protected rate.
    pub ci95: (f64, f64),
    /// Every Protected run satisfied the binding chain.
    pub binding_chain_ok: bool,
    pub expectation_met: bool,
}

/// Devices, identities and the aggressor view built once per scenario.
pub struct PreparedScenario {
    world: World,
    identities: Vec<odt_core::endpoints::OteeIdentity>,
    aggressor: Arc<AggressorConfig>,
    agent_image: odt_core::device::ProcessImage,
}

pub fn prepare(spec: &ScenarioSpec, seed: u64) -> Result<PreparedScenario> {
    let omega = Omega::contiguous(spec.omega.start, spec.omega.words)?;
    let mut world = World::new();
    let mut identities = Vec::new();
    let mut registry = Registry::new();
    for d in &spec.devices {
        let id = DeviceId(d.id);
        world.add_device(DeviceSim::new(id, d.otee));
        if d.otee {
            let identity = otee_identity(seed, id);
            if d.registered {
                registry.register(&identity);
            }
            identities.push(identity);
        }
    }
    for p in &spec.processes {
        let image = load_process(DeviceId(p.device), ProcessId(p.pid), p.seed, p.size, &omega)?;
        world.device_mut(DeviceId(p.device)).expect("validated").add_process(image);
    }
    for r in &spec.routes {
        world.set_route(RoutingRule {
            source_device: DeviceId(r.from.device),
            source_pid: ProcessId(r.from.pid),
            egress_device: DeviceId(r.via.device),
            proxy_pid: ProcessId(r.via.pid),
        });
    }
    for i in &spec.interrupts {
        world.device_mut(DeviceId(i.device)).expect("validated").schedule_interrupt(i.session, i.read);
    }
    let agent_device = DeviceId(spec.agent.device);
    let agent_image = world
        .device(agent_device)
        .and_then(|d| d.process(ProcessId(spec.agent.pid)))
        .cloned()
        .expect("validated");
    let expected_image = load_process(
        agent_device,
        ProcessId(spec.agent.pid),
        spec.aggressor.seed,
        spec.aggressor.size,
        &omega,
    )?;
    let aggressor = Arc::new(AggressorConfig {
        expected_image,
        measurement: MeasurementConfig {
            omega,
            locations: spec.locations,
        },
        registry,
    });
    Ok(PreparedScenario {
        world,
        identities,
        aggressor,
        agent_image,
    })
}

fn binding_chain(
    report: &ProverReport,
    server: &ServerSession<'_>,
    prepared: &PreparedScenario,
    world: &World,
) -> BindingChain {
    let registered_otee = prepared
        .aggressor
        .registry
        .signer(
            &odt_core::handshake::OdtToken::signed_message(&report.token.y, &report.token.z, &report.secrets.k),
            &report.token.sigma,
        )
        .is_some_and(|d| d == report.device);
    let measured_on_device = world
        .device(report.device)
        .is_some_and(|d| d.has_otee && d.process(report.pid).is_some());
    let cfg = &prepared.aggressor.measurement;
    let addrs = select_addresses(&report.secrets.k, cfg.locations, &cfg.omega);
    let measured_agent_image = MeasureResult::expected(&prepared.agent_image, &addrs).words == report.measurement.words;
    BindingChain {
        registered_otee,
        measured_on_device,
        measured_agent_image,
        b_co: report.measurement.b_co,
        same_k: server.secrets().map(|s| s.k) == Some(report.secrets.k),
    }
}

/// One connection from the agent to the aggressor.
pub fn run_once(spec: &ScenarioSpec, prepared: &PreparedScenario, rng: &mut ChaCha20Rng) -> Result<RunResult> {
    let mut world = prepared.world.clone();
    for c in &spec.clones {
        let src = world
            .device(DeviceId(c.from.device))
            .and_then(|d| d.process(ProcessId(c.from.pid)))
            .cloned()
            .expect("validated");
        let image = clone_memory_subset(&src, DeviceId(c.to.device), ProcessId(c.to.pid), c.fraction, rng);
        world.device_mut(DeviceId(c.to.device)).expect("validated").add_process(image);
    }
    let egress = world.resolve_endpoint(DeviceId(spec.agent.device), ProcessId(spec.agent.pid));
    let mut server = ServerSession::aggressor(&prepared.aggressor);
    let mut server_rng = child_rng(rng);
    let identity = prepared.identities.iter().find(|i| i.device == egress.device);
    let has_otee = world.device(egress.device).is_some_and(|d| d.has_otee);

    let report = match identity.filter(|_| has_otee) {
        Some(identity) => {
            let device = world.device_mut(egress.device).expect("resolved device exists");
            let (mut client, hello) = OteeClient::start(identity, device, egress.pid, &prepared.aggressor.measurement, rng);
            run_loopback(&mut client, hello, &mut server, rng, &mut server_rng)?;
            client.into_report()
        }
        None => {
            let (mut client, hello) = PlainClient::start(rng);
            run_loopback(&mut client, hello, &mut server, rng, &mut server_rng)?;
            None
        }
    };
    let outcome = server.outcome().expect("aggressor session");
    let binding = match (&report, outcome.verdict) {
        (Some(r), Verdict::Protected) => Some(binding_chain(r, &server, prepared, &world)),
        _ => None,
    };
    Ok(RunResult {
        verdict: outcome.verdict.as_str(),
        signature_ok: outcome.signature_ok,
        equality_ok: outcome.equality_ok,
        heartbeat: server.stored_odt().is_some(),
        binding,
    })
}

/// Runs the scenario `runs` times (or `spec.runs`) from `seed` (or `spec.seed`, or 0).
pub fn run_scenario(spec: &ScenarioSpec, seed: Option<u64>, runs: Option<u64>) -> Result<ScenarioReport> {
    let seed = seed.or(spec.seed).unwrap_or(0);
    let runs = runs.unwrap_or(spec.runs);
    if runs == 0 {
        return Err(OdtError::InvalidArgument("runs must be at least 1".into()));
    }
    let prepared = prepare(spec, seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut protected = 0;
    let mut binding_chain_ok = true;
    for _ in 0..runs {
        let r = run_once(spec, &prepared, &mut rng)?;
        if r.verdict == Verdict::Protected.as_str() {
            protected += 1;
            binding_chain_ok &= r.binding.is_some_and(|b| b.holds());
        }
    }
    let ci95 = binomial_ci(protected, runs, Z_95);
    let empirical_rate = protected as f64 / runs as f64;
    let expectation_met = binding_chain_ok
        && match (spec.expect.verdict, spec.expect.rate) {
            (Some(v), _) => {
                let want = if Verdict::from(v) == Verdict::Protected { runs } else { 0 };
                protected == want
            }
            (None, Some(rate)) => ci95.0 <= rate && rate <= ci95.1,
            (None, None) => unreachable!("validated"),
        };
    Ok(ScenarioReport {
        name: spec.name.clone(),
        seed,
        runs,
        protected,
        inconclusive: runs - protected,
        expected_verdict: spec.expect.verdict.map(|v| Verdict::from(v).as_str()),
        expected_rate: spec.expect.rate,
        empirical_rate,
        ci95,
        binding_chain_ok,
        expectation_met,
    })
}

/// Default location of the bundled scenario files.
pub fn bundled_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        name = "t"
        [omega]
        start = 0x10000000
        words = 64
        [[device]]
        id = 1
        otee = true
        [[process]]
        device = 1
        pid = 7
        seed = 3
        size = 64
        [agent]
        device = 1
        pid = 7
        [aggressor]
        seed = 3
        size = 64
        [expect]
        verdict = "Protected"
    "#;

    fn parse(text: &str) -> Result<ScenarioSpec> {
        ScenarioSpec::parse(text, Path::new("test.cfg"))
    }

    #[test]
    fn minimal_scenario_runs() {
        let spec = parse(MINIMAL).unwrap();
        let report = run_scenario(&spec, Some(1), Some(3)).unwrap();
        assert_eq!(report.protected, 3);
        assert!(report.expectation_met);
    }

    #[test]
    fn wrong_aggressor_seed_is_inconclusive() {
        let spec = parse(&MINIMAL.replace("seed = 3\n        size = 64\n        [expect]", "seed = 4\n        size = 64\n        [expect]")).unwrap();
        assert_eq!(spec.aggressor.seed, 4);
        let report = run_scenario(&spec, Some(1), Some(2)).unwrap();
        assert_eq!(report.protected, 0);
        assert!(!report.expectation_met);
    }

    #[test]
    fn references_are_checked() {
        let bad = MINIMAL.replace("[agent]\n        device = 1", "[agent]\n        device = 2");
        assert!(matches!(parse(&bad), Err(OdtError::Scenario { .. })));
        let both = MINIMAL.replace("verdict = \"Protected\"", "verdict = \"Protected\"\nrate = 0.5");
        assert!(parse(&both).is_err());
        let typo = MINIMAL.replace("otee = true", "otee = true\nfoo = 1");
        assert!(parse(&typo).is_err());
        let bad_verdict = MINIMAL.replace("\"Protected\"", "\"NotProtected\"");
        assert!(parse(&bad_verdict).is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let spec = parse(MINIMAL).unwrap();
        let prepared = prepare(&spec, 5).unwrap();
        let a = run_once(&spec, &prepared, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = run_once(&spec, &prepared, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}
