//! Frames over byte streams.

use std::io::{ErrorKind, Read, Write};

use odt_core::handshake::{frame_len, HEADER_LEN};
use odt_core::Error;

use crate::error::Result;

/// Largest frame accepted from a peer.
pub const MAX_FRAME_LEN: usize = 1 << 16;

/// Reads one frame; `None` on a clean end of stream between frames.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_up_to(r, &mut header)?;
    if got == 0 {
        return Ok(None);
    }
    frame_len(&header[..got])?;
    if got < HEADER_LEN {
        return Err(truncated(got));
    }
    let body = u32::from_be_bytes([0, header[1], header[2], header[3]]) as usize;
    if HEADER_LEN + body > MAX_FRAME_LEN {
        return Err(Error::MalformedFrame { offset: 1, reason: "frame exceeds size limit" }.into());
    }
    let mut frame = vec![0u8; HEADER_LEN + body];
    frame[..HEADER_LEN].copy_from_slice(&header);
    let got = read_up_to(r, &mut frame[HEADER_LEN..])?;
    if got < body {
        return Err(truncated(HEADER_LEN + got));
    }
    Ok(Some(frame))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> Result<()> {
    w.write_all(frame)?;
    Ok(())
}

fn truncated(offset: usize) -> crate::error::OdtError {
    Error::MalformedFrame { offset, reason: "truncated frame" }.into()
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::OdtError;
    use odt_core::handshake::Message;
    use std::io::Cursor;

    #[test]
    fn frames_come_back_in_order() {
        let a = Message::Finished([1; 32]).encode();
        let b = Message::Certificate(vec![9; 100]).encode();
        let mut stream = Vec::new();
        write_frame(&mut stream, &a).unwrap();
        write_frame(&mut stream, &b).unwrap();
        let mut r = Cursor::new(stream);
        assert_eq!(read_frame(&mut r).unwrap(), Some(a));
        assert_eq!(read_frame(&mut r).unwrap(), Some(b));
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn truncated_stream_is_malformed() {
        let a = Message::Finished([1; 32]).encode();
        for cut in 1..a.len() {
            let err = read_frame(&mut Cursor::new(&a[..cut])).unwrap_err();
            assert!(
                matches!(err, OdtError::Protocol(Error::MalformedFrame { offset, .. }) if offset == cut),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn unknown_type_and_oversize() {
        assert!(read_frame(&mut Cursor::new([7u8, 0, 0, 0])).is_err());
        assert!(read_frame(&mut Cursor::new([3u8, 0xff, 0xff, 0xff])).is_err());
    }
}
