//! The `odt` command line.
//!
//! Exit codes: 0 success, 1 an expectation or check did not hold (or a
//! runtime failure), 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use odt_core::bounds::{preservation_bound_general, preservation_bound_key, PreservationParams, Probability};
use odt_core::device::{load_process, DeviceId, DeviceSim, Omega, ProcessId, DEFAULT_OMEGA_START};
use odt_core::endpoints::{AggressorConfig, ClientSession, MeasurementConfig, OteeClient, PlainClient, Registry};
use odt_core::handshake::Message;
use odt_core::witness::DEFAULT_LOCATIONS;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::bench::{bench, BenchTarget};
use crate::error::{OdtError, Result};
use crate::net::{drive_client, otee_identity, serve, ServerMode};
use crate::scenario::{run_scenario, ScenarioSpec};
use crate::stats::{sample, uniformity_test, write_csv, Source, UniformityReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Thresholds the uniformity check must meet.
pub const MAX_ADVANTAGE: f64 = 0.01;
pub const MIN_P_VALUE: f64 = 0.001;
pub const MAX_ABS_Z: f64 = 4.0;

#[derive(Debug, Parser)]
#[command(name = "odt", version, about = "Oblivious digital tokens: servers, clients, scenarios and analyses")]
pub struct Cli {
    /// Seed for the single generator all randomness flows from.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print JSON to stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a plain or aggressor server.
    Serve(ServeArgs),
    /// Connect an O-TEE-mediated process (or a plain client) to a server.
    Connect(ConnectArgs),
    /// Run a scenario file and compare verdicts with its expectation.
    Scenario(ScenarioArgs),
    /// Statistical analyses.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Analytic calculators.
    Calc {
        #[command(subcommand)]
        what: CalcCommand,
    },
    /// Time protocol operations.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Plain,
    Aggressor,
}

#[derive(Debug, Args)]
pub struct MeasurementArgs {
    /// First byte address of the measured region.
    #[arg(long, default_value_t = DEFAULT_OMEGA_START)]
    pub omega_start: u64,
    /// Size of the measured region in 8-byte words; defaults to the process size.
    #[arg(long)]
    pub omega_words: Option<u64>,
    /// Number of measured locations.
    #[arg(long, default_value_t = DEFAULT_LOCATIONS)]
    pub locations: usize,
}

impl MeasurementArgs {
    fn config(&self, image_words: Option<u64>) -> Result<MeasurementConfig> {
        if self.locations == 0 {
            return Err(OdtError::InvalidArgument("--locations must be at least 1".into()));
        }
        let words = self
            .omega_words
            .or(image_words)
            .unwrap_or_else(|| Omega::default().total_words());
        Ok(MeasurementConfig {
            omega: Omega::contiguous(self.omega_start, words)?,
            locations: self.locations,
        })
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub listen: String,
    /// Memory seed of the agent the aggressor planted.
    #[arg(long, required_if_eq("mode", "aggressor"))]
    pub expect_seed: Option<u64>,
    /// Memory size of the agent in words.
    #[arg(long, required_if_eq("mode", "aggressor"))]
    pub expect_size: Option<u64>,
    /// Seed of the registered O-TEE identity.
    #[arg(long, default_value_t = 0)]
    pub otee_seed: u64,
    /// Stop after this many connections.
    #[arg(long)]
    pub max_sessions: Option<u64>,
    /// Append stored tokens as JSON lines to this file.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[command(flatten)]
    pub measurement: MeasurementArgs,
}

#[derive(Debug, Args)]
pub struct ConnectArgs {
    #[arg(long)]
    pub process_seed: u64,
    #[arg(long)]
    pub process_size: u64,
    #[arg(long)]
    pub to: String,
    /// Seed of this device's O-TEE identity.
    #[arg(long, default_value_t = 0)]
    pub otee_seed: u64,
    /// Connect as an ordinary client without an O-TEE.
    #[arg(long)]
    pub plain: bool,
    #[command(flatten)]
    pub measurement: MeasurementArgs,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    pub file: PathBuf,
    #[arg(long)]
    pub runs: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Compare two nonce sources with per-bit, chi-square and distinguisher tests.
    Uniformity(UniformityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Plain,
    Aggressor,
    Uniform,
    TopBitCleared,
}

impl From<SourceArg> for Source {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Plain => Source::Plain,
            SourceArg::Aggressor => Source::Aggressor,
            SourceArg::Uniform => Source::Uniform,
            SourceArg::TopBitCleared => Source::TopBitCleared,
        }
    }
}

#[derive(Debug, Args)]
pub struct UniformityArgs {
    /// Samples per source.
    #[arg(long)]
    pub samples: usize,
    /// Write the samples as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "aggressor")]
    pub a: SourceArg,
    #[arg(long, value_enum, default_value = "plain")]
    pub b: SourceArg,
}

#[derive(Debug, Subcommand)]
pub enum CalcCommand {
    /// Security-preservation bounds.
    Preservation(PreservationArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundMode {
    General,
    Key,
}

#[derive(Debug, Args)]
pub struct PreservationArgs {
    #[arg(long, value_enum)]
    pub mode: BoundMode,
    /// Number of measurable locations |I|.
    #[arg(long)]
    pub i_size: u64,
    /// |X| = 2^x_bits values per location.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..=127))]
    pub x_bits: u32,
    /// Query budget.
    #[arg(long)]
    pub q: u64,
    /// Bits of each location the adversary knows (general mode).
    #[arg(long, default_value_t = 0)]
    pub known_bits: u32,
    /// Locations measured per query (general mode).
    #[arg(long, default_value_t = 1)]
    pub c: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub target: BenchTarget,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                OdtError::Scenario { .. } => {
                    let _ = writeln!(err, "\nscenario file schema:\n{SCENARIO_SCHEMA}");
                    EXIT_USAGE
                }
                OdtError::InvalidArgument(_)
                | OdtError::InsufficientSamples { .. }
                | OdtError::SizeMismatch(..)
                | OdtError::Protocol(odt_core::Error::DomainError(_))
                | OdtError::Protocol(odt_core::Error::RegionOverflow { .. })
                | OdtError::Protocol(odt_core::Error::InvalidOmega(_))
                | OdtError::Protocol(odt_core::Error::InvalidAddress(_)) => EXIT_USAGE,
                _ => EXIT_MISMATCH,
            }
        }
    }
}

/// Shown on scenario parse errors.
pub const SCENARIO_SCHEMA: &str = r#"name = "..."                       # required
seed = 0                           # optional; --seed overrides
runs = 1                           # optional; --runs overrides
locations = 5                      # measured locations
[omega] start = <addr>, words = <n>
[[device]] id = <u32>, otee = <bool>, registered = <bool, default true>
[[process]] device, pid, seed, size
[[clone]] from = { device, pid }, to = { device, pid }, fraction = <0..1>
[[route]] from = { device, pid }, via = { device, pid }
[[interrupt]] device, session (from 1), read (from 1)
[agent] device, pid
[aggressor] seed, size
[expect] verdict = "Protected" | "Inconclusive"   or   rate = <0..1>"#;

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Serve(a) => cmd_serve(cli, a, out),
        Command::Connect(a) => cmd_connect(cli, a, out),
        Command::Scenario(a) => cmd_scenario(cli, a, out),
        Command::Analyze {
            what: AnalyzeCommand::Uniformity(a),
        } => cmd_uniformity(cli, a, out),
        Command::Calc {
            what: CalcCommand::Preservation(a),
        } => cmd_preservation(cli, a, out),
        Command::Bench(a) => {
            let r = bench(a.target, a.iters, cli.seed)?;
            if cli.json {
                writeln!(out, "{}", serde_json::to_string(&r)?)?;
            } else {
                writeln!(
                    out,
                    "{:?}: median {:.4} ms, mean {:.4} ms, stddev {:.4} ms over {} iterations",
                    r.target, r.median_ms, r.mean_ms, r.stddev_ms, r.n_iters
                )?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn cmd_serve(cli: &Cli, a: &ServeArgs, out: &mut dyn Write) -> Result<i32> {
    let measurement = a.measurement.config(a.expect_size)?;
    let mode = match a.mode {
        Mode::Plain => ServerMode::Plain,
        Mode::Aggressor => {
            let (seed, size) = a.expect_seed.zip(a.expect_size).ok_or_else(|| {
                OdtError::InvalidArgument("aggressor mode needs --expect-seed and --expect-size".into())
            })?;
            let identity = otee_identity(a.otee_seed, DeviceId(1));
            let mut registry = Registry::new();
            registry.register(&identity);
            ServerMode::Aggressor(Arc::new(AggressorConfig {
                expected_image: load_process(DeviceId(1), ProcessId(1), seed, size, &measurement.omega)?,
                measurement,
                registry,
            }))
        }
    };
    let listener = TcpListener::bind(&a.listen)?;
    let local = listener.local_addr()?;
    if cli.json {
        writeln!(out, "{}", json!({ "listening": local.to_string() }))?;
    } else {
        writeln!(out, "listening on {local}")?;
    }
    out.flush()?;
    let mut records = match &a.records {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut failure = None;
    serve(listener, mode, cli.seed, a.max_sessions, |s| {
        let verdict = s.outcome.map(|o| o.verdict.as_str());
        let line = if cli.json {
            json!({
                "session_id": s.session_id,
                "peer": s.peer.map(|p| p.to_string()),
                "frames": s.frames,
                "verdict": verdict,
                "signature_ok": s.outcome.map(|o| o.signature_ok),
                "equality_ok": s.outcome.map(|o| o.equality_ok),
                "error": s.error,
            })
            .to_string()
        } else {
            format!(
                "session {}: {} frames, verdict {}{}",
                s.session_id,
                s.frames,
                verdict.unwrap_or("n/a"),
                s.error.as_deref().map(|e| format!(", error: {e}")).unwrap_or_default()
            )
        };
        let result = writeln!(out, "{line}").and_then(|_| out.flush()).and_then(|_| {
            match (&mut records, &s.record) {
                (Some(f), Some(r)) => writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")),
                _ => Ok(()),
            }
        });
        if let Err(e) = result {
            failure.get_or_insert(e);
        }
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(EXIT_OK),
    }
}

fn cmd_connect(cli: &Cli, a: &ConnectArgs, out: &mut dyn Write) -> Result<i32> {
    let measurement = a.measurement.config(Some(a.process_size))?;
    let mut rng = ChaCha20Rng::seed_from_u64(cli.seed);
    let mut stream = TcpStream::connect(&a.to)?;
    let (transcript, token, k) = if a.plain {
        let (mut client, hello) = PlainClient::start(&mut rng);
        let t = drive_client(&mut stream, &mut client, hello, &mut rng)?;
        let k = client.secrets().map(|s| s.k);
        (t, None, k)
    } else {
        let image = load_process(DeviceId(1), ProcessId(1), a.process_seed, a.process_size, &measurement.omega)?;
        let mut device = DeviceSim::new(DeviceId(1), true);
        device.add_process(image);
        let identity = otee_identity(a.otee_seed, DeviceId(1));
        let (mut client, hello) = OteeClient::start(&identity, &mut device, ProcessId(1), &measurement, &mut rng);
        let t = drive_client(&mut stream, &mut client, hello, &mut rng)?;
        debug_assert!(!client.awaiting_server());
        let report = client.into_report();
        (t, report.as_ref().map(|r| r.token), report.map(|r| r.secrets.k))
    };
    let echoed = transcript
        .frames
        .last()
        .is_some_and(|(_, f)| matches!(Message::decode(f), Ok(Message::Heartbeat(_))));
    let shape: Vec<_> = transcript
        .shape()
        .into_iter()
        .map(|(d, ty, len)| json!({ "dir": format!("{d:?}"), "type": ty, "len": len }))
        .collect();
    if cli.json {
        writeln!(
            out,
            "{}",
            json!({
                "frames": shape,
                "heartbeat_echoed": echoed,
                "token": token.map(|t| hex::encode(t.to_bytes())),
                "k_hash": k.map(|k| hex::encode(odt_core::crypto::hash256(&k))),
            })
        )?;
    } else {
        writeln!(out, "handshake complete: {} frames", transcript.frames.len())?;
        if let Some(t) = token {
            writeln!(out, "token sent ({} bytes), echoed: {echoed}", t.to_bytes().len())?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_scenario(cli: &Cli, a: &ScenarioArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = ScenarioSpec::load(&a.file)?;
    let seed = if cli.seed != 0 { Some(cli.seed) } else { None };
    let r = run_scenario(&spec, seed, a.runs)?;
    if cli.json {
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    } else {
        let want = match (r.expected_verdict, r.expected_rate) {
            (Some(v), _) => format!("expected {v} on every run"),
            (None, Some(rate)) => format!("expected Protected rate {rate}"),
            _ => String::new(),
        };
        writeln!(
            out,
            "{}: {} runs, {} Protected, {} Inconclusive (rate {:.5}, 95% CI [{:.5}, {:.5}]); {}; {}",
            r.name,
            r.runs,
            r.protected,
            r.inconclusive,
            r.empirical_rate,
            r.ci95.0,
            r.ci95.1,
            want,
            if r.expectation_met { "met" } else { "NOT met" }
        )?;
    }
    Ok(if r.expectation_met { EXIT_OK } else { EXIT_MISMATCH })
}

/// Whether a report meets the uniformity thresholds.
pub fn indistinguishable(r: &UniformityReport) -> bool {
    r.advantage < MAX_ADVANTAGE
        && r.byte_chi_square.p_value > MIN_P_VALUE
        && r.positional_chi_square.p_value > MIN_P_VALUE
        && r.max_abs_z < MAX_ABS_Z
}

fn cmd_uniformity(cli: &Cli, a: &UniformityArgs, out: &mut dyn Write) -> Result<i32> {
    // Distinct streams for the two sources, both derived from --seed.
    let sa = sample(a.a.into(), a.samples, cli.seed.wrapping_mul(2));
    let sb = sample(a.b.into(), a.samples, cli.seed.wrapping_mul(2).wrapping_add(1));
    let r = uniformity_test(&sa, &sb)?;
    if let Some(path) = &a.out {
        write_csv(path, &[&sa, &sb])?;
    }
    let ok = indistinguishable(&r);
    if cli.json {
        let mut v = serde_json::to_value(&r)?;
        v["indistinguishable"] = json!(ok);
        writeln!(out, "{v}")?;
    } else {
        writeln!(
            out,
            "{} vs {} ({} samples each): max |z| {:.3}, byte chi-square p {:.4}, positional chi-square p {:.4}, advantage {:.4}; {}",
            r.a.as_str(),
            r.b.as_str(),
            r.n,
            r.max_abs_z,
            r.byte_chi_square.p_value,
            r.positional_chi_square.p_value,
            r.advantage,
            if ok { "indistinguishable" } else { "DISTINGUISHABLE" }
        )?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_MISMATCH })
}

/// `2^x`, with the plain value only when it does not underflow.
fn fmt_probability(p: &Probability) -> String {
    if p.value > 0.0 || p.log2 == f64::NEG_INFINITY {
        format!("{:e} (2^{:.3})", p.value, p.log2)
    } else {
        format!("2^{:.3}", p.log2)
    }
}

fn cmd_preservation(cli: &Cli, a: &PreservationArgs, out: &mut dyn Write) -> Result<i32> {
    let x_size = 1u128 << a.x_bits;
    let show = |p: &Probability| json!({ "p": p.value, "log2_p": p.log2 });
    let (value, text) = match a.mode {
        BoundMode::Key => {
            let p = preservation_bound_key(a.i_size, x_size, a.q)?;
            (json!({ "mode": "key", "result": show(&p) }), format!("P = {}", fmt_probability(&p)))
        }
        BoundMode::General => {
            let b = preservation_bound_general(&PreservationParams {
                x_size,
                known_bits: a.known_bits,
                c: a.c,
                i_size: a.i_size,
                q: a.q,
            })?;
            let simplified = b.simplified.as_ref().map(show);
            let text = format!(
                "P = {}; simplified bound q/(2^C - q) = {}",
                fmt_probability(&b.p),
                b.simplified
                    .as_ref()
                    .map(fmt_probability)
                    .unwrap_or_else(|| "vacuous (2^C <= q)".into())
            );
            (json!({ "mode": "general", "result": show(&b.p), "simplified_bound": simplified }), text)
        }
    };
    if cli.json {
        writeln!(out, "{value}")?;
    } else {
        writeln!(out, "{text}")?;
    }
    Ok(EXIT_OK)
}
