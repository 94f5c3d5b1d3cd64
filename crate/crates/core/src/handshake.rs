//! A minimal handshake with TLS 1.3 geometry.
//!
//! Only the pieces the token rides on are real: 32-byte nonces, X25519 key
//! shares, a Finished MAC over the transcript and RFC 6520 heartbeats. There
//! is no negotiation, certificate validation or record protection.
//!
//! Every frame is `type (1) ‖ length (3, big-endian) ‖ body`.
//!
//! | type | message      | body                                              |
//! |------|--------------|---------------------------------------------------|
//! | 1    | ClientHello  | random (32) ‖ key_share (32)                      |
//! | 2    | ServerHello  | random (32) ‖ key_share (32)                      |
//! | 3    | Certificate  | opaque                                            |
//! | 4    | Finished     | HMAC-SHA256 (32)                                  |
//! | 24   | Heartbeat    | hb_type (1) ‖ payload_length (2) ‖ payload ‖ pad  |

use alloc::vec::Vec;

use curve25519_dalek::montgomery::MontgomeryPoint;
use hmac::{Hmac, Mac};
use rand_core::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::crypto::{hash256, hkdf_derive, hkdf_expand_label, Signature};
use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 4;
pub const HELLO_BODY_LEN: usize = 64;
pub const FINISHED_LEN: usize = 32;
pub const MAX_HEARTBEAT_PAYLOAD: usize = 2048;
pub const HEARTBEAT_PADDING: usize = 16;
/// Largest body length the 3-byte length field can describe.
pub const MAX_BODY_LEN: usize = (1 << 24) - 1;

/// Label of the Finished MAC key.
pub const FINISHED_LABEL: &[u8] = b"odt finished";

/// Certificate body sent by every server; stands in for a real chain.
pub const PLACEHOLDER_CERTIFICATE: &[u8; 64] =
    b"odt placeholder certificate: no chain, no validation, fixed size";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ContentType {
    ClientHello = 1,
    ServerHello = 2,
    Certificate = 3,
    Finished = 4,
    Heartbeat = 24,
}

impl ContentType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => ContentType::ClientHello,
            2 => ContentType::ServerHello,
            3 => ContentType::Certificate,
            4 => ContentType::Finished,
            24 => ContentType::Heartbeat,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ContentType::ClientHello => "ClientHello",
            ContentType::ServerHello => "ServerHello",
            ContentType::Certificate => "Certificate",
            ContentType::Finished => "Finished",
            ContentType::Heartbeat => "Heartbeat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hello {
    pub random: [u8; 32],
    pub key_share: [u8; 32],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum HeartbeatType {
    Request = 1,
    Response = 2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeartbeatMessage {
    pub hb_type: HeartbeatType,
    pub payload: Vec<u8>,
    pub padding: Vec<u8>,
}

impl HeartbeatMessage {
    pub fn request<R: RngCore + CryptoRng>(payload: &[u8], rng: &mut R) -> Self {
        HeartbeatMessage {
            hb_type: HeartbeatType::Request,
            payload: payload.to_vec(),
            padding: random_padding(rng),
        }
    }

    /// Echoes the request payload with fresh padding.
    pub fn response_to<R: RngCore + CryptoRng>(req: &HeartbeatMessage, rng: &mut R) -> Self {
        HeartbeatMessage {
            hb_type: HeartbeatType::Response,
            payload: req.payload.clone(),
            padding: random_padding(rng),
        }
    }
}

fn random_padding<R: RngCore>(rng: &mut R) -> Vec<u8> {
    let mut pad = alloc::vec![0u8; HEARTBEAT_PADDING];
    rng.fill_bytes(&mut pad);
    pad
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    ClientHello(Hello),
    ServerHello(Hello),
    Certificate(Vec<u8>),
    Finished([u8; 32]),
    Heartbeat(HeartbeatMessage),
}

fn malformed(offset: usize, reason: &'static str) -> Error {
    Error::MalformedFrame { offset, reason }
}

impl Message {
    pub fn content_type(&self) -> ContentType {
        match self {
            Message::ClientHello(_) => ContentType::ClientHello,
            Message::ServerHello(_) => ContentType::ServerHello,
            Message::Certificate(_) => ContentType::Certificate,
            Message::Finished(_) => ContentType::Finished,
            Message::Heartbeat(_) => ContentType::Heartbeat,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            Message::ClientHello(h) | Message::ServerHello(h) => {
                body.extend_from_slice(&h.random);
                body.extend_from_slice(&h.key_share);
            }
            Message::Certificate(c) => body.extend_from_slice(c),
            Message::Finished(mac) => body.extend_from_slice(mac),
            Message::Heartbeat(hb) => {
                body.push(hb.hb_type as u8);
                body.extend_from_slice(&(hb.payload.len() as u16).to_be_bytes());
                body.extend_from_slice(&hb.payload);
                body.extend_from_slice(&hb.padding);
            }
        }
        assert!(body.len() <= MAX_BODY_LEN, "frame body too large");
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.push(self.content_type() as u8);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
        out.extend_from_slice(&body);
        out
    }

    /// Decodes exactly one frame; `frame` must contain nothing else.
    pub fn decode(frame: &[u8]) -> Result<Message> {
        let total = frame_len(frame)?.ok_or_else(|| malformed(frame.len(), "truncated frame"))?;
        if frame.len() > total {
            return Err(malformed(total, "trailing bytes after frame"));
        }
        let ty = ContentType::from_u8(frame[0]).ok_or_else(|| malformed(0, "unknown content type"))?;
        let body = &frame[HEADER_LEN..];
        match ty {
            ContentType::ClientHello | ContentType::ServerHello => {
                if body.len() != HELLO_BODY_LEN {
                    return Err(malformed(1, "hello body must be 64 bytes"));
                }
                let hello = Hello {
                    random: body[..32].try_into().expect("32 bytes"),
                    key_share: body[32..].try_into().expect("32 bytes"),
                };
                Ok(if ty == ContentType::ClientHello {
                    Message::ClientHello(hello)
                } else {
                    Message::ServerHello(hello)
                })
            }
            ContentType::Certificate => Ok(Message::Certificate(body.to_vec())),
            ContentType::Finished => {
                let mac: [u8; 32] = body
                    .try_into()
                    .map_err(|_| malformed(1, "finished body must be 32 bytes"))?;
                Ok(Message::Finished(mac))
            }
            ContentType::Heartbeat => decode_heartbeat(body).map(Message::Heartbeat),
        }
    }
}

fn decode_heartbeat(body: &[u8]) -> Result<HeartbeatMessage> {
    let at = |i: usize| HEADER_LEN + i;
    let hb_type = match body.first() {
        Some(1) => HeartbeatType::Request,
        Some(2) => HeartbeatType::Response,
        Some(_) => return Err(malformed(at(0), "unknown heartbeat type")),
        None => return Err(malformed(at(0), "empty heartbeat")),
    };
    if body.len() < 3 {
        return Err(malformed(at(body.len()), "truncated heartbeat length"));
    }
    let len = u16::from_be_bytes([body[1], body[2]]) as usize;
    if len > MAX_HEARTBEAT_PAYLOAD {
        return Err(malformed(at(1), "heartbeat payload exceeds 2048 bytes"));
    }
    if body.len() < 3 + len + HEARTBEAT_PADDING {
        return Err(malformed(at(body.len()), "heartbeat shorter than payload plus padding"));
    }
    Ok(HeartbeatMessage {
        hb_type,
        payload: body[3..3 + len].to_vec(),
        padding: body[3 + len..].to_vec(),
    })
}

/// Total length of the frame starting at `buf[0]`, or `None` if the header
/// itself is incomplete. Errors only on an unknown content type.
pub fn frame_len(buf: &[u8]) -> Result<Option<usize>> {
    if buf.is_empty() {
        return Ok(None);
    }
    if ContentType::from_u8(buf[0]).is_none() {
        return Err(malformed(0, "unknown content type"));
    }
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let body = u32::from_be_bytes([0, buf[1], buf[2], buf[3]]) as usize;
    let total = HEADER_LEN + body;
    Ok((buf.len() >= total).then_some(total))
}

/// Splits a byte stream holding whole frames into frames.
pub fn split_frames(mut buf: &[u8]) -> Result<Vec<&[u8]>> {
    let mut frames = Vec::new();
    let mut offset = 0;
    while !buf.is_empty() {
        let len = frame_len(buf)
            .map_err(|e| shift(e, offset))?
            .ok_or_else(|| malformed(offset + buf.len(), "truncated frame"))?;
        frames.push(&buf[..len]);
        buf = &buf[len..];
        offset += len;
    }
    Ok(frames)
}

fn shift(e: Error, by: usize) -> Error {
    match e {
        Error::MalformedFrame { offset, reason } => Error::MalformedFrame {
            offset: offset + by,
            reason,
        },
        other => other,
    }
}

/// Ephemeral X25519 secret.
#[derive(Clone)]
pub struct DhSecret([u8; 32]);

impl DhSecret {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        DhSecret(bytes)
    }

    pub fn public(&self) -> [u8; 32] {
        MontgomeryPoint::mul_base_clamped(self.0).to_bytes()
    }
}

pub fn dh_keygen<R: RngCore + CryptoRng>(rng: &mut R) -> (DhSecret, [u8; 32]) {
    let mut bytes = [0u8; 32];
    rng.fill_bytes(&mut bytes);
    let secret = DhSecret(bytes);
    let public = secret.public();
    (secret, public)
}

/// X25519. Rejects low-order peer shares that force the all-zero output.
pub fn dh_shared(secret: &DhSecret, peer: &[u8; 32]) -> Result<[u8; 32]> {
    let hs = MontgomeryPoint(*peer).mul_clamped(secret.0).to_bytes();
    if hs == [0u8; 32] {
        return Err(Error::DegenerateShare);
    }
    Ok(hs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionSecrets {
    pub hs: [u8; 32],
    pub k: [u8; 32],
    /// Hash of ClientHello ‖ ServerHello ‖ Certificate frames.
    pub transcript_hash: [u8; 32],
}

impl SessionSecrets {
    pub fn new(hs: [u8; 32], transcript_hash: [u8; 32]) -> Self {
        SessionSecrets {
            hs,
            k: hkdf_derive(&hs),
            transcript_hash,
        }
    }
}

/// HMAC-SHA256 over `transcript_hash`, keyed by HKDF(HS, "odt finished").
pub fn finished_mac(hs: &[u8; 32], transcript_hash: &[u8; 32]) -> [u8; 32] {
    let key = hkdf_expand_label(hs, FINISHED_LABEL);
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&key).expect("HMAC takes any key length");
    mac.update(transcript_hash);
    mac.finalize().into_bytes().into()
}

fn verify_finished(hs: &[u8; 32], transcript_hash: &[u8; 32], received: &[u8; 32]) -> Result<()> {
    let key = hkdf_expand_label(hs, FINISHED_LABEL);
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&key).expect("HMAC takes any key length");
    mac.update(transcript_hash);
    mac.verify_slice(received).map_err(|_| Error::MacMismatch)
}

fn expect_message(frame: &[u8], expected: ContentType) -> Result<Message> {
    let msg = Message::decode(frame)?;
    if msg.content_type() != expected {
        return Err(Error::UnexpectedMessage {
            expected: expected.name(),
            got: msg.content_type().name(),
        });
    }
    Ok(msg)
}

/// Client half of the handshake: ClientHello out, server flight in,
/// Finished out.
pub struct ClientHandshake {
    dh: DhSecret,
    transcript: Sha256,
    secrets: Option<SessionSecrets>,
}

impl ClientHandshake {
    /// Builds the ClientHello carrying `random` as its nonce.
    pub fn start<R: RngCore + CryptoRng>(random: [u8; 32], rng: &mut R) -> (Self, Vec<u8>) {
        let (dh, key_share) = dh_keygen(rng);
        let frame = Message::ClientHello(Hello { random, key_share }).encode();
        let mut transcript = Sha256::new();
        transcript.update(&frame);
        (
            ClientHandshake {
                dh,
                transcript,
                secrets: None,
            },
            frame,
        )
    }

    /// Consumes ServerHello and Certificate; returns the server nonce and
    /// the session secrets. The server Finished is checked separately.
    pub fn on_server_hello(&mut self, server_hello: &[u8], certificate: &[u8]) -> Result<([u8; 32], SessionSecrets)> {
        let Message::ServerHello(sh) = expect_message(server_hello, ContentType::ServerHello)? else {
            unreachable!("content type checked");
        };
        expect_message(certificate, ContentType::Certificate)?;
        let hs = dh_shared(&self.dh, &sh.key_share)?;
        self.transcript.update(server_hello);
        self.transcript.update(certificate);
        let secrets = SessionSecrets::new(hs, self.transcript.clone().finalize().into());
        self.secrets = Some(secrets);
        Ok((sh.random, secrets))
    }

    /// Checks the server Finished and returns the client Finished frame.
    pub fn on_server_finished(&mut self, finished: &[u8]) -> Result<Vec<u8>> {
        let secrets = self.secrets.ok_or(Error::UnexpectedMessage {
            expected: "ServerHello",
            got: "Finished",
        })?;
        let Message::Finished(mac) = expect_message(finished, ContentType::Finished)? else {
            unreachable!("content type checked");
        };
        verify_finished(&secrets.hs, &secrets.transcript_hash, &mac)?;
        self.transcript.update(finished);
        let client_hash: [u8; 32] = self.transcript.clone().finalize().into();
        let frame = Message::Finished(finished_mac(&secrets.hs, &client_hash)).encode();
        self.transcript.update(&frame);
        Ok(frame)
    }

    pub fn secrets(&self) -> Option<&SessionSecrets> {
        self.secrets.as_ref()
    }
}

/// Server half: ClientHello in, ServerHello ‖ Certificate ‖ Finished out,
/// client Finished in.
pub struct ServerHandshake {
    client_hello: Hello,
    dh: DhSecret,
    key_share: [u8; 32],
    hs: [u8; 32],
    transcript: Sha256,
    secrets: Option<SessionSecrets>,
}

impl ServerHandshake {
    /// Parses the ClientHello and computes HS before the server nonce is chosen.
    pub fn on_client_hello<R: RngCore + CryptoRng>(frame: &[u8], rng: &mut R) -> Result<Self> {
        let Message::ClientHello(ch) = expect_message(frame, ContentType::ClientHello)? else {
            unreachable!("content type checked");
        };
        let (dh, key_share) = dh_keygen(rng);
        let hs = dh_shared(&dh, &ch.key_share)?;
        let mut transcript = Sha256::new();
        transcript.update(frame);
        Ok(ServerHandshake {
            client_hello: ch,
            dh,
            key_share,
            hs,
            transcript,
            secrets: None,
        })
    }

    pub fn client_hello(&self) -> &Hello {
        &self.client_hello
    }

    pub fn handshake_secret(&self) -> &[u8; 32] {
        &self.hs
    }

    /// `k = HKDF(HS)`, available before the ServerHello is built.
    pub fn witness_key(&self) -> [u8; 32] {
        hkdf_derive(&self.hs)
    }

    /// Emits the server flight with `random` as the server nonce.
    pub fn respond(&mut self, random: [u8; 32]) -> [Vec<u8>; 3] {
        let sh = Message::ServerHello(Hello {
            random,
            key_share: self.key_share,
        })
        .encode();
        let cert = Message::Certificate(PLACEHOLDER_CERTIFICATE.to_vec()).encode();
        self.transcript.update(&sh);
        self.transcript.update(&cert);
        let secrets = SessionSecrets::new(self.hs, self.transcript.clone().finalize().into());
        let fin = Message::Finished(finished_mac(&secrets.hs, &secrets.transcript_hash)).encode();
        self.transcript.update(&fin);
        self.secrets = Some(secrets);
        [sh, cert, fin]
    }

    pub fn on_client_finished(&mut self, frame: &[u8]) -> Result<()> {
        let secrets = self.secrets.ok_or(Error::UnexpectedMessage {
            expected: "ClientHello",
            got: "Finished",
        })?;
        let Message::Finished(mac) = expect_message(frame, ContentType::Finished)? else {
            unreachable!("content type checked");
        };
        let expected: [u8; 32] = self.transcript.clone().finalize().into();
        verify_finished(&secrets.hs, &expected, &mac)?;
        self.transcript.update(frame);
        Ok(())
    }

    pub fn secrets(&self) -> Option<&SessionSecrets> {
        self.secrets.as_ref()
    }

    #[doc(hidden)]
    pub fn dh_secret(&self) -> &DhSecret {
        &self.dh
    }
}

pub const ODT_TOKEN_LEN: usize = 128;

/// `(y, z, σ)` as carried in the heartbeat payload: `y ‖ z ‖ σ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OdtToken {
    pub y: [u8; 32],
    pub z: [u8; 32],
    pub sigma: Signature,
}

impl OdtToken {
    pub fn to_bytes(&self) -> [u8; ODT_TOKEN_LEN] {
        let mut out = [0u8; ODT_TOKEN_LEN];
        out[..32].copy_from_slice(&self.y);
        out[32..64].copy_from_slice(&self.z);
        out[64..].copy_from_slice(&self.sigma.0);
        out
    }

    /// `None` unless `bytes` is exactly 128 bytes long.
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let bytes: &[u8; ODT_TOKEN_LEN] = bytes.try_into().ok()?;
        Some(OdtToken {
            y: bytes[..32].try_into().expect("32 bytes"),
            z: bytes[32..64].try_into().expect("32 bytes"),
            sigma: Signature(bytes[64..].try_into().expect("64 bytes")),
        })
    }

    /// The signed message `y ‖ z ‖ hash256(k)`.
    pub fn signed_message(y: &[u8; 32], z: &[u8; 32], k: &[u8; 32]) -> [u8; 96] {
        let mut msg = [0u8; 96];
        msg[..32].copy_from_slice(y);
        msg[32..64].copy_from_slice(z);
        msg[64..].copy_from_slice(&hash256(k));
        msg
    }
}
