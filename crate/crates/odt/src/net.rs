//! Sessions over real byte streams, and a threaded TCP server.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{mpsc, Arc};
use std::thread;

use odt_core::crypto::{hash256, hash256_parts, SigKeyPair};
use odt_core::device::DeviceId;
use odt_core::endpoints::{
    AggressorConfig, ClientSession, Direction, OteeIdentity, ServerSession, SessionTranscript, VerificationOutcome,
};
use odt_core::Error;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::transport::{read_frame, write_frame};

/// Independent generator drawn from `master`.
pub fn child_rng(master: &mut ChaCha20Rng) -> ChaCha20Rng {
    let mut seed = [0u8; 32];
    master.fill_bytes(&mut seed);
    ChaCha20Rng::from_seed(seed)
}

/// Deterministic O-TEE identity shared by `serve` and `connect` through a
/// common seed, standing in for certification by the neutral party.
pub fn otee_identity(seed: u64, device: DeviceId) -> OteeIdentity {
    let sk = hash256_parts(&[b"odt otee identity", &seed.to_be_bytes(), &device.0.to_be_bytes()]);
    OteeIdentity {
        keys: SigKeyPair::from_secret(sk),
        device,
    }
}

fn expect_frame<S: Read>(stream: &mut S) -> Result<Vec<u8>> {
    read_frame(stream)?.ok_or_else(|| Error::HandshakeAborted("peer closed the connection").into())
}

/// Runs the client side of a session over `stream`.
pub fn drive_client<S, C, R>(stream: &mut S, client: &mut C, hello: Vec<u8>, rng: &mut R) -> Result<SessionTranscript>
where
    S: Read + Write,
    C: ClientSession,
    R: RngCore + rand_core::CryptoRng,
{
    let mut transcript = SessionTranscript::default();
    write_frame(stream, &hello)?;
    transcript.push(Direction::ClientToServer, hello);
    let sh = expect_frame(stream)?;
    let cert = expect_frame(stream)?;
    let fin = expect_frame(stream)?;
    let outgoing = client.on_server_flight([&sh, &cert, &fin], rng)?;
    for f in [sh, cert, fin] {
        transcript.push(Direction::ServerToClient, f);
    }
    for frame in outgoing {
        write_frame(stream, &frame)?;
        transcript.push(Direction::ClientToServer, frame);
    }
    stream.flush()?;
    while client.awaiting_server() {
        let frame = expect_frame(stream)?;
        client.on_server_frame(&frame)?;
        transcript.push(Direction::ServerToClient, frame);
    }
    Ok(transcript)
}

/// Runs the server side of a session until the client closes the stream.
pub fn drive_server<S, R>(stream: &mut S, session: &mut ServerSession<'_>, rng: &mut R) -> Result<SessionTranscript>
where
    S: Read + Write,
    R: RngCore + rand_core::CryptoRng,
{
    let mut transcript = SessionTranscript::default();
    while let Some(frame) = read_frame(stream)? {
        let replies = session.on_frame(&frame, rng)?;
        transcript.push(Direction::ClientToServer, frame);
        for reply in replies {
            write_frame(stream, &reply)?;
            transcript.push(Direction::ServerToClient, reply);
        }
        stream.flush()?;
    }
    Ok(transcript)
}

/// A stored token as written for offline analysis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdtRecord {
    pub session_id: u64,
    pub y: String,
    pub z: String,
    pub sigma: String,
    pub k_hash: String,
    pub outcome: String,
}

#[derive(Clone, Debug)]
pub enum ServerMode {
    Plain,
    Aggressor(Arc<AggressorConfig>),
}

/// Result of one served connection.
#[derive(Clone, Debug)]
pub struct SessionSummary {
    pub session_id: u64,
    pub peer: Option<SocketAddr>,
    pub frames: usize,
    pub error: Option<String>,
    /// Aggressor sessions only.
    pub outcome: Option<VerificationOutcome>,
    pub record: Option<OdtRecord>,
}

/// Serves one connection with its own session state.
pub fn handle_connection<S: Read + Write>(
    stream: &mut S,
    session_id: u64,
    mode: &ServerMode,
    rng: &mut ChaCha20Rng,
) -> SessionSummary {
    let mut session = match mode {
        ServerMode::Plain => ServerSession::plain(),
        ServerMode::Aggressor(cfg) => ServerSession::aggressor(cfg),
    };
    let result = drive_server(stream, &mut session, rng);
    let outcome = session.outcome();
    let record = match (session.stored_odt(), outcome) {
        (Some(odt), Some(outcome)) => Some(OdtRecord {
            session_id,
            y: hex::encode(odt.token.y),
            z: hex::encode(odt.token.z),
            sigma: hex::encode(odt.token.sigma.0),
            k_hash: hex::encode(hash256(&odt.k)),
            outcome: outcome.verdict.as_str().to_owned(),
        }),
        _ => None,
    };
    let (frames, error) = match result {
        Ok(t) => (t.frames.len(), None),
        Err(e) => (0, Some(e.to_string())),
    };
    SessionSummary {
        session_id,
        peer: None,
        frames,
        error,
        outcome,
        record,
    }
}

enum Event {
    Accepted(std::io::Result<TcpStream>),
    Finished(SessionSummary),
}

/// Accepts connections, one thread each, reporting every session through
/// `report` as soon as it finishes. Stops after `max_sessions` connections if
/// given.
pub fn serve<F>(listener: TcpListener, mode: ServerMode, seed: u64, max_sessions: Option<u64>, mut report: F) -> Result<()>
where
    F: FnMut(SessionSummary),
{
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let (tx, rx) = mpsc::channel();
    let acceptor = {
        let tx = tx.clone();
        thread::spawn(move || {
            for (accepted, stream) in (1u64..).zip(listener.incoming()) {
                let failed = stream.is_err();
                if tx.send(Event::Accepted(stream)).is_err() || failed {
                    return;
                }
                if max_sessions.is_some_and(|m| accepted >= m) {
                    return;
                }
            }
        })
    };
    let mut session_id = 0u64;
    let mut running = 0u64;
    let mut result = Ok(());
    loop {
        let done_accepting = max_sessions.is_some_and(|m| session_id >= m) || result.is_err();
        if done_accepting && running == 0 {
            break;
        }
        match rx.recv().expect("the sender in this frame keeps the channel open") {
            Event::Accepted(Ok(mut stream)) => {
                session_id += 1;
                running += 1;
                let mut rng = child_rng(&mut master);
                let mode = mode.clone();
                let tx = tx.clone();
                let id = session_id;
                thread::spawn(move || {
                    let peer = stream.peer_addr().ok();
                    let mut summary = handle_connection(&mut stream, id, &mode, &mut rng);
                    summary.peer = peer;
                    let _ = tx.send(Event::Finished(summary));
                });
            }
            Event::Accepted(Err(e)) => result = Err(e.into()),
            Event::Finished(summary) => {
                running -= 1;
                report(summary);
            }
        }
    }
    if result.is_ok() {
        let _ = acceptor.join();
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_are_reproducible_and_distinct() {
        let a = otee_identity(1, DeviceId(1));
        assert_eq!(a.keys.public_key(), otee_identity(1, DeviceId(1)).keys.public_key());
        assert_ne!(a.keys.public_key(), otee_identity(2, DeviceId(1)).keys.public_key());
        assert_ne!(a.keys.public_key(), otee_identity(1, DeviceId(2)).keys.public_key());
    }
}
