use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("group element has no uniform representative")]
    NotEncodable,
    #[error("no encodable commitment after {0} attempts")]
    EncodingExhausted(usize),
    #[error("process of {requested} words does not fit in an address set of {capacity} words")]
    RegionOverflow { requested: u64, capacity: u64 },
    #[error("invalid virtual address {0:#x}")]
    InvalidAddress(u64),
    #[error("invalid address set: {0}")]
    InvalidOmega(&'static str),
    #[error("malformed frame at byte {offset}: {reason}")]
    MalformedFrame { offset: usize, reason: &'static str },
    #[error("finished MAC mismatch")]
    MacMismatch,
    #[error("Diffie-Hellman share produced the all-zero secret")]
    DegenerateShare,
    #[error("unexpected {got} while waiting for {expected}")]
    UnexpectedMessage { expected: &'static str, got: &'static str },
    #[error("handshake aborted: {0}")]
    HandshakeAborted(&'static str),
    #[error("parameters outside the formula domain: {0}")]
    DomainError(&'static str),
    #[error("unknown device or process: {0}")]
    UnknownEntity(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
