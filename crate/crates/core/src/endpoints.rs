//! Protocol endpoints as sans-IO state machines.
//!
//! The O-TEE client embeds `u` in its ClientHello nonce and returns the token
//! in a heartbeat after its Finished. A plain server answers with a random
//! nonce; an aggressor answers with the uniform encoding of its commitment and
//! keeps the heartbeat payload for offline verification. Both servers emit
//! the same frames in the same order.

use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};

use crate::crypto::{verify, SigKeyPair, Signature};
use crate::device::{DeviceId, DeviceSim, MeasurementContext, Omega, ProcessId, ProcessImage};
use crate::elligator::{decode_uniform, UniformBytes32};
use crate::error::{Error, Result};
use crate::group::{Curve25519, GroupElement, Scalar};
use crate::handshake::{
    ClientHandshake, ContentType, HeartbeatMessage, HeartbeatType, Message, OdtToken, ServerHandshake, SessionSecrets,
};
use crate::ppet::{prover_respond, verifier_commit, VerifierState};
use crate::witness::{compute_witness, measure, select_addresses, MeasureResult, ProcessHandle, Witness, DEFAULT_LOCATIONS};

/// Signing identity of the O-TEE on one device.
#[derive(Clone, Debug)]
pub struct OteeIdentity {
    pub keys: SigKeyPair,
    pub device: DeviceId,
}

impl OteeIdentity {
    pub fn generate<R: RngCore + CryptoRng>(device: DeviceId, rng: &mut R) -> Self {
        OteeIdentity {
            keys: SigKeyPair::generate(rng),
            device,
        }
    }
}

/// Public keys of certified O-TEEs and the devices they run on.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    entries: Vec<([u8; 32], DeviceId)>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn register(&mut self, identity: &OteeIdentity) {
        self.register_key(identity.keys.public_key(), identity.device);
    }

    pub fn register_key(&mut self, pk: [u8; 32], device: DeviceId) {
        self.entries.retain(|(k, _)| *k != pk);
        self.entries.push((pk, device));
    }

    pub fn device_of(&self, pk: &[u8; 32]) -> Option<DeviceId> {
        self.entries.iter().find(|(k, _)| k == pk).map(|(_, d)| *d)
    }

    /// Device whose registered key verifies `sig` over `msg`.
    pub fn signer(&self, msg: &[u8], sig: &Signature) -> Option<DeviceId> {
        self.entries.iter().find(|(pk, _)| verify(pk, msg, sig)).map(|(_, d)| *d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Which region is measured and how many locations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeasurementConfig {
    pub omega: Omega,
    pub locations: usize,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        MeasurementConfig {
            omega: Omega::default(),
            locations: DEFAULT_LOCATIONS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Protected,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Protected => "Protected",
            Verdict::Inconclusive => "Inconclusive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerificationOutcome {
    pub signature_ok: bool,
    pub equality_ok: bool,
    pub verdict: Verdict,
}

impl VerificationOutcome {
    pub fn from_flags(signature_ok: bool, equality_ok: bool) -> Self {
        let verdict = if signature_ok && equality_ok {
            Verdict::Protected
        } else {
            Verdict::Inconclusive
        };
        VerificationOutcome {
            signature_ok,
            equality_ok,
            verdict,
        }
    }

    /// No token was received.
    pub fn missing() -> Self {
        Self::from_flags(false, false)
    }
}

/// Offline check of a stored token against the session key and commitment exponent.
pub fn verify_odt(token: &OdtToken, k: &[u8; 32], s: &Scalar, registry: &Registry) -> VerificationOutcome {
    let msg = OdtToken::signed_message(&token.y, &token.z, k);
    let signature_ok = registry.signer(&msg, &token.sigma).is_some();
    let equality_ok = match (GroupElement::from_bytes(&token.y), GroupElement::from_bytes(&token.z)) {
        (Some(y), Some(z)) => z == y.exp(s),
        _ => false,
    };
    VerificationOutcome::from_flags(signature_ok, equality_ok)
}

fn abort(e: Error) -> Error {
    match e {
        Error::MacMismatch => Error::HandshakeAborted("Finished MAC mismatch"),
        Error::MalformedFrame { .. } => Error::HandshakeAborted("malformed frame"),
        Error::UnexpectedMessage { .. } => Error::HandshakeAborted("unexpected message"),
        Error::DegenerateShare => Error::HandshakeAborted("degenerate key share"),
        other => other,
    }
}

/// The client side of one connection.
pub trait ClientSession {
    /// Handles ServerHello ‖ Certificate ‖ Finished; returns frames to send.
    fn on_server_flight<R: RngCore + CryptoRng>(&mut self, flight: [&[u8]; 3], rng: &mut R) -> Result<Vec<Vec<u8>>>;

    /// Handles a frame arriving after the handshake.
    fn on_server_frame(&mut self, frame: &[u8]) -> Result<()>;

    /// Whether the client still waits for a frame from the server.
    fn awaiting_server(&self) -> bool;
}

/// Everything the O-TEE computed in one session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProverReport {
    pub secrets: SessionSecrets,
    pub device: DeviceId,
    pub pid: ProcessId,
    pub measurement: MeasureResult,
    pub context: MeasurementContext,
    pub witness: Witness,
    pub token: OdtToken,
}

/// TLS client mediated by an O-TEE.
///
/// The measured process is the one the connection actually leaves from,
/// as resolved by the caller's routing layer.
pub struct OteeClient<'a> {
    identity: &'a OteeIdentity,
    device: &'a mut DeviceSim,
    pid: ProcessId,
    config: &'a MeasurementConfig,
    u: GroupElement,
    handshake: ClientHandshake,
    heartbeat_payload: Option<Vec<u8>>,
    report: Option<ProverReport>,
}

impl<'a> OteeClient<'a> {
    /// Returns the client and its ClientHello, whose nonce is the canonical encoding of a fresh `u`.
    pub fn start<R: RngCore + CryptoRng>(
        identity: &'a OteeIdentity,
        device: &'a mut DeviceSim,
        pid: ProcessId,
        config: &'a MeasurementConfig,
        rng: &mut R,
    ) -> (Self, Vec<u8>) {
        let u = GroupElement::random(rng);
        let (handshake, hello) = ClientHandshake::start(u.to_bytes(), rng);
        let client = OteeClient {
            identity,
            device,
            pid,
            config,
            u,
            handshake,
            heartbeat_payload: None,
            report: None,
        };
        (client, hello)
    }

    pub fn u(&self) -> &GroupElement {
        &self.u
    }

    pub fn report(&self) -> Option<&ProverReport> {
        self.report.as_ref()
    }

    pub fn into_report(self) -> Option<ProverReport> {
        self.report
    }
}

impl ClientSession for OteeClient<'_> {
    fn on_server_flight<R: RngCore + CryptoRng>(&mut self, flight: [&[u8]; 3], rng: &mut R) -> Result<Vec<Vec<u8>>> {
        let (n1, secrets) = self.handshake.on_server_hello(flight[0], flight[1]).map_err(abort)?;
        // Finished goes out before the token is computed.
        let finished = self.handshake.on_server_finished(flight[2]).map_err(abort)?;

        let addrs = select_addresses(&secrets.k, self.config.locations, &self.config.omega);
        let mut handle = ProcessHandle::open(self.device, self.pid);
        let measurement = measure(&mut handle, &addrs);
        let context = handle.context().clone();
        let witness = compute_witness(&measurement);

        let v = decode_uniform(&UniformBytes32(n1));
        let resp = prover_respond::<Curve25519, R>(&self.u, Some(&v), &witness.scalar, rng);
        let (y, z) = (resp.y.to_bytes(), resp.z.to_bytes());
        let sigma = self.identity.keys.sign(&OdtToken::signed_message(&y, &z, &secrets.k));
        let token = OdtToken { y, z, sigma };

        let heartbeat = HeartbeatMessage::request(&token.to_bytes(), rng);
        self.heartbeat_payload = Some(heartbeat.payload.clone());
        self.report = Some(ProverReport {
            secrets,
            device: self.identity.device,
            pid: self.pid,
            measurement,
            context,
            witness,
            token,
        });
        Ok(alloc::vec![finished, Message::Heartbeat(heartbeat).encode()])
    }

    fn on_server_frame(&mut self, frame: &[u8]) -> Result<()> {
        let Some(expected) = self.heartbeat_payload.take() else {
            return Err(Error::HandshakeAborted("unexpected frame after handshake"));
        };
        match Message::decode(frame).map_err(abort)? {
            Message::Heartbeat(hb) if hb.hb_type == HeartbeatType::Response && hb.payload == expected => Ok(()),
            Message::Heartbeat(_) => Err(Error::HandshakeAborted("heartbeat echo mismatch")),
            _ => Err(Error::HandshakeAborted("unexpected message")),
        }
    }

    fn awaiting_server(&self) -> bool {
        self.heartbeat_payload.is_some()
    }
}

/// Ordinary TLS client: random nonce, no heartbeat.
pub struct PlainClient {
    handshake: ClientHandshake,
    secrets: Option<SessionSecrets>,
}

impl PlainClient {
    pub fn start<R: RngCore + CryptoRng>(rng: &mut R) -> (Self, Vec<u8>) {
        let mut random = [0u8; 32];
        rng.fill_bytes(&mut random);
        let (handshake, hello) = ClientHandshake::start(random, rng);
        (PlainClient { handshake, secrets: None }, hello)
    }

    pub fn secrets(&self) -> Option<&SessionSecrets> {
        self.secrets.as_ref()
    }
}

impl ClientSession for PlainClient {
    fn on_server_flight<R: RngCore + CryptoRng>(&mut self, flight: [&[u8]; 3], _rng: &mut R) -> Result<Vec<Vec<u8>>> {
        let (_, secrets) = self.handshake.on_server_hello(flight[0], flight[1]).map_err(abort)?;
        let finished = self.handshake.on_server_finished(flight[2]).map_err(abort)?;
        self.secrets = Some(secrets);
        Ok(alloc::vec![finished])
    }

    fn on_server_frame(&mut self, _frame: &[u8]) -> Result<()> {
        Err(Error::HandshakeAborted("unexpected frame after handshake"))
    }

    fn awaiting_server(&self) -> bool {
        false
    }
}

/// What an aggressor knows about the agent it planted.
#[derive(Clone, Debug)]
pub struct AggressorConfig {
    /// Reconstruction of the agent's memory.
    pub expected_image: ProcessImage,
    pub measurement: MeasurementConfig,
    pub registry: Registry,
}

#[derive(Clone, Copy, Debug)]
pub enum ServerRole<'a> {
    Plain,
    Aggressor(&'a AggressorConfig),
}

/// A token kept for offline verification along with what is needed to check it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoredOdt {
    pub token: OdtToken,
    pub k: [u8; 32],
    pub s: Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ServerState {
    AwaitHello,
    AwaitFinished,
    Established,
}

/// The server side of one connection.
pub struct ServerSession<'a> {
    role: ServerRole<'a>,
    state: ServerState,
    handshake: Option<ServerHandshake>,
    verifier: Option<VerifierState<Curve25519>>,
    stored: Option<StoredOdt>,
}

impl<'a> ServerSession<'a> {
    pub fn new(role: ServerRole<'a>) -> Self {
        ServerSession {
            role,
            state: ServerState::AwaitHello,
            handshake: None,
            verifier: None,
            stored: None,
        }
    }

    pub fn plain() -> Self {
        Self::new(ServerRole::Plain)
    }

    pub fn aggressor(config: &'a AggressorConfig) -> Self {
        Self::new(ServerRole::Aggressor(config))
    }

    pub fn is_established(&self) -> bool {
        self.state == ServerState::Established
    }

    pub fn secrets(&self) -> Option<&SessionSecrets> {
        self.handshake.as_ref().and_then(|h| h.secrets())
    }

    pub fn verifier_state(&self) -> Option<&VerifierState<Curve25519>> {
        self.verifier.as_ref()
    }

    pub fn stored_odt(&self) -> Option<&StoredOdt> {
        self.stored.as_ref()
    }

    /// Offline verdict for an aggressor session; `None` for a plain server.
    pub fn outcome(&self) -> Option<VerificationOutcome> {
        let ServerRole::Aggressor(config) = self.role else {
            return None;
        };
        Some(match &self.stored {
            Some(odt) => verify_odt(&odt.token, &odt.k, &odt.s, &config.registry),
            None => VerificationOutcome::missing(),
        })
    }

    /// Handles one frame from the client and returns the frames to send back.
    pub fn on_frame<R: RngCore + CryptoRng>(&mut self, frame: &[u8], rng: &mut R) -> Result<Vec<Vec<u8>>> {
        match self.state {
            ServerState::AwaitHello => {
                let mut hs = ServerHandshake::on_client_hello(frame, rng)?;
                let n1 = self.server_nonce(&hs, rng)?;
                let flight = hs.respond(n1);
                self.handshake = Some(hs);
                self.state = ServerState::AwaitFinished;
                Ok(flight.into())
            }
            ServerState::AwaitFinished => {
                self.handshake
                    .as_mut()
                    .expect("handshake exists after hello")
                    .on_client_finished(frame)?;
                self.state = ServerState::Established;
                Ok(Vec::new())
            }
            ServerState::Established => match Message::decode(frame)? {
                Message::Heartbeat(hb) if hb.hb_type == HeartbeatType::Request => {
                    self.keep_token(&hb.payload);
                    Ok(alloc::vec![Message::Heartbeat(HeartbeatMessage::response_to(&hb, rng)).encode()])
                }
                Message::Heartbeat(_) => Ok(Vec::new()),
                other => Err(Error::UnexpectedMessage {
                    expected: ContentType::Heartbeat.name(),
                    got: other.content_type().name(),
                }),
            },
        }
    }

    fn server_nonce<R: RngCore + CryptoRng>(&mut self, hs: &ServerHandshake, rng: &mut R) -> Result<[u8; 32]> {
        let ServerRole::Aggressor(config) = self.role else {
            let mut n1 = [0u8; 32];
            rng.fill_bytes(&mut n1);
            return Ok(n1);
        };
        let u = GroupElement::from_bytes(&hs.client_hello().random).unwrap_or_else(|| GroupElement::random(rng));
        let k = hs.witness_key();
        let addrs = select_addresses(&k, config.measurement.locations, &config.measurement.omega);
        let expected = compute_witness(&MeasureResult::expected(&config.expected_image, &addrs));
        let st = verifier_commit(&u, &expected.scalar, rng, true)?;
        let nonce = st.nonce.expect("encodable commitment carries its nonce");
        self.verifier = Some(st);
        Ok(nonce.0)
    }

    fn keep_token(&mut self, payload: &[u8]) {
        if self.stored.is_some() {
            return;
        }
        let (ServerRole::Aggressor(_), Some(st), Some(token)) = (self.role, self.verifier, OdtToken::from_bytes(payload))
        else {
            return;
        };
        let k = self.secrets().expect("established session has secrets").k;
        self.stored = Some(StoredOdt { token, k, s: st.s });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

/// Every frame of one session in wire order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionTranscript {
    pub frames: Vec<(Direction, Vec<u8>)>,
}

impl SessionTranscript {
    /// Direction, content type and length of each frame.
    pub fn shape(&self) -> Vec<(Direction, u8, usize)> {
        self.frames.iter().map(|(d, f)| (*d, f[0], f.len())).collect()
    }

    pub fn push(&mut self, direction: Direction, frame: Vec<u8>) {
        self.frames.push((direction, frame));
    }
}

/// Runs a whole session in memory, starting from the client's ClientHello.
pub fn run_loopback<C, RC, RS>(
    client: &mut C,
    client_hello: Vec<u8>,
    server: &mut ServerSession<'_>,
    client_rng: &mut RC,
    server_rng: &mut RS,
) -> Result<SessionTranscript>
where
    C: ClientSession,
    RC: RngCore + CryptoRng,
    RS: RngCore + CryptoRng,
{
    let mut transcript = SessionTranscript::default();
    let flight = server.on_frame(&client_hello, server_rng)?;
    transcript.push(Direction::ClientToServer, client_hello);
    let [sh, cert, fin]: [Vec<u8>; 3] = flight
        .try_into()
        .map_err(|_| Error::HandshakeAborted("server flight must have three frames"))?;
    let outgoing = client.on_server_flight([&sh, &cert, &fin], client_rng)?;
    for f in [sh, cert, fin] {
        transcript.push(Direction::ServerToClient, f);
    }
    for frame in outgoing {
        let replies = server.on_frame(&frame, server_rng)?;
        transcript.push(Direction::ClientToServer, frame);
        for reply in replies {
            client.on_server_frame(&reply)?;
            transcript.push(Direction::ServerToClient, reply);
        }
    }
    if client.awaiting_server() {
        return Err(Error::HandshakeAborted("server never answered the heartbeat"));
    }
    Ok(transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{load_process, ProcessId};
    use crate::handshake::ODT_TOKEN_LEN;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const D: DeviceId = DeviceId(1);
    const AGENT: ProcessId = ProcessId(7);

    struct Setup {
        identity: OteeIdentity,
        device: DeviceSim,
        config: AggressorConfig,
    }

    fn setup(rng: &mut ChaCha20Rng) -> Setup {
        let measurement = MeasurementConfig {
            omega: Omega::contiguous(0x1000_0000, 4096).unwrap(),
            locations: 5,
        };
        let identity = OteeIdentity::generate(D, rng);
        let mut registry = Registry::new();
        registry.register(&identity);
        let image = load_process(D, AGENT, 99, 4096, &measurement.omega).unwrap();
        let mut device = DeviceSim::new(D, true);
        device.add_process(image.clone());
        Setup {
            identity,
            device,
            config: AggressorConfig {
                expected_image: image,
                measurement,
                registry,
            },
        }
    }

    #[test]
    fn honest_session_is_protected() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut srng = ChaCha20Rng::seed_from_u64(32);
        let mut s = setup(&mut rng);
        let mut server = ServerSession::aggressor(&s.config);
        let (mut client, hello) = OteeClient::start(&s.identity, &mut s.device, AGENT, &s.config.measurement, &mut rng);
        run_loopback(&mut client, hello, &mut server, &mut rng, &mut srng).unwrap();
        let report = client.into_report().unwrap();
        let outcome = server.outcome().unwrap();
        assert_eq!(outcome.verdict, Verdict::Protected);
        assert!(report.measurement.b_co);
        assert_eq!(Some(&report.secrets), server.secrets());
        assert_eq!(server.stored_odt().unwrap().token, report.token);
    }

    #[test]
    fn plain_server_echoes_and_ignores_token() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let mut srng = ChaCha20Rng::seed_from_u64(34);
        let mut s = setup(&mut rng);
        let mut server = ServerSession::plain();
        let (mut client, hello) = OteeClient::start(&s.identity, &mut s.device, AGENT, &s.config.measurement, &mut rng);
        let t = run_loopback(&mut client, hello, &mut server, &mut rng, &mut srng).unwrap();
        assert_eq!(server.outcome(), None);
        assert_eq!(server.stored_odt(), None);
        let (_, last) = t.frames.last().unwrap();
        let Message::Heartbeat(hb) = Message::decode(last).unwrap() else { panic!() };
        assert_eq!(hb.payload.len(), ODT_TOKEN_LEN);
    }

    #[test]
    fn plain_client_to_aggressor_is_inconclusive() {
        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let s = setup(&mut rng);
        let mut server = ServerSession::aggressor(&s.config);
        let (mut client, hello) = PlainClient::start(&mut rng);
        let mut srng = ChaCha20Rng::seed_from_u64(36);
        run_loopback(&mut client, hello, &mut server, &mut rng, &mut srng).unwrap();
        assert!(server.is_established());
        assert_eq!(server.outcome(), Some(VerificationOutcome::missing()));
        assert_eq!(client.secrets(), server.secrets());
    }

    #[test]
    fn unregistered_signer_is_inconclusive() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let mut s = setup(&mut rng);
        let rogue = OteeIdentity::generate(D, &mut rng);
        let mut server = ServerSession::aggressor(&s.config);
        let (mut client, hello) = OteeClient::start(&rogue, &mut s.device, AGENT, &s.config.measurement, &mut rng);
        let mut srng = ChaCha20Rng::seed_from_u64(38);
        run_loopback(&mut client, hello, &mut server, &mut rng, &mut srng).unwrap();
        let outcome = server.outcome().unwrap();
        assert!(!outcome.signature_ok);
        assert!(outcome.equality_ok);
        assert_eq!(outcome.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn replayed_token_fails_signature_for_new_session() {
        let mut rng = ChaCha20Rng::seed_from_u64(39);
        let mut srng = ChaCha20Rng::seed_from_u64(40);
        let mut s = setup(&mut rng);
        let mut first = ServerSession::aggressor(&s.config);
        let (mut c, h) = OteeClient::start(&s.identity, &mut s.device, AGENT, &s.config.measurement, &mut rng);
        run_loopback(&mut c, h, &mut first, &mut rng, &mut srng).unwrap();
        let old = *first.stored_odt().unwrap();

        let mut second = ServerSession::aggressor(&s.config);
        let (mut c, h) = OteeClient::start(&s.identity, &mut s.device, AGENT, &s.config.measurement, &mut rng);
        run_loopback(&mut c, h, &mut second, &mut rng, &mut srng).unwrap();
        let new = second.stored_odt().unwrap();
        let replay = verify_odt(&old.token, &new.k, &new.s, &s.config.registry);
        assert!(!replay.signature_ok);
        assert_eq!(replay.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn outcome_depends_only_on_flags() {
        for sig in [false, true] {
            for eq in [false, true] {
                let o = VerificationOutcome::from_flags(sig, eq);
                assert_eq!(o.verdict == Verdict::Protected, sig && eq);
            }
        }
    }

    #[test]
    fn tampered_server_finished_aborts_client() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let mut srng = ChaCha20Rng::seed_from_u64(42);
        let mut s = setup(&mut rng);
        let mut server = ServerSession::plain();
        let (mut client, hello) = OteeClient::start(&s.identity, &mut s.device, AGENT, &s.config.measurement, &mut rng);
        let mut flight = server.on_frame(&hello, &mut srng).unwrap();
        flight[2][10] ^= 1;
        let err = client
            .on_server_flight([&flight[0], &flight[1], &flight[2]], &mut rng)
            .unwrap_err();
        assert_eq!(err, Error::HandshakeAborted("Finished MAC mismatch"));
        assert!(client.report().is_none());
    }

    #[test]
    fn undecodable_client_nonce_falls_back_to_random_u() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let s = setup(&mut rng);
        let mut server = ServerSession::aggressor(&s.config);
        let (mut client, hello) = PlainClient::start(&mut rng);
        let flight = server.on_frame(&hello, &mut rng).unwrap();
        assert_eq!(flight.len(), 3);
        assert!(server.verifier_state().is_some());
        client.on_server_flight([&flight[0], &flight[1], &flight[2]], &mut rng).unwrap();
    }
}
