//! Binary row framing for streamed input.
//!
//! Each frame is a one-byte tag, a little-endian `u32` row index and `d`
//! little-endian `f64` values. Frames carry no length prefix; `d` is agreed
//! out of band.

use std::io::{self, BufRead, Write};

use crate::engine::RowKind;
use crate::error::{Error, Result};

pub const TAG_V: u8 = b'V';
pub const TAG_K: u8 = b'K';
pub const TAG_Q: u8 = b'Q';
pub const TAG_X2: u8 = b'Y';
pub const TAG_X1: u8 = b'X';

pub fn tag_of(kind: RowKind) -> u8 {
    match kind {
        RowKind::V => TAG_V,
        RowKind::K => TAG_K,
        RowKind::Q => TAG_Q,
        RowKind::X2 => TAG_X2,
        RowKind::X1 => TAG_X1,
    }
}

pub fn kind_of(tag: u8) -> Result<RowKind> {
    Ok(match tag {
        TAG_V => RowKind::V,
        TAG_K => RowKind::K,
        TAG_Q => RowKind::Q,
        TAG_X2 => RowKind::X2,
        TAG_X1 => RowKind::X1,
        other => return Err(Error::Format(format!("unknown frame tag 0x{other:02x}"))),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub kind: RowKind,
    pub index: u32,
    pub row: Vec<f64>,
}

pub fn frame_len(d: usize) -> usize {
    5 + 8 * d
}

pub fn encode_frame(kind: RowKind, index: u32, row: &[f64], out: &mut Vec<u8>) {
    out.push(tag_of(kind));
    out.extend_from_slice(&index.to_le_bytes());
    for v in row {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub struct FrameWriter<W: Write> {
    inner: W,
    d: usize,
    scratch: Vec<u8>,
}

impl<W: Write> FrameWriter<W> {
    pub fn new(inner: W, d: usize) -> Self {
        FrameWriter {
            inner,
            d,
            scratch: Vec::with_capacity(frame_len(d)),
        }
    }

    pub fn write(&mut self, kind: RowKind, index: u32, row: &[f64]) -> io::Result<()> {
        if row.len() != self.d {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("frame row has {} values, expected {}", row.len(), self.d),
            ));
        }
        self.scratch.clear();
        encode_frame(kind, index, row, &mut self.scratch);
        self.inner.write_all(&self.scratch)
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

fn stream_err(e: io::Error) -> Error {
    Error::io("<frame stream>", e)
}

pub struct FrameReader<R: BufRead> {
    inner: R,
    d: usize,
    buf: Vec<u8>,
    frames: u64,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(inner: R, d: usize) -> Self {
        FrameReader {
            inner,
            d,
            buf: vec![0; frame_len(d)],
            frames: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Next frame, `None` at a clean end of input. A partial trailing frame
    /// is an error.
    pub fn next_frame(&mut self) -> Result<Option<Frame>> {
        if self.inner.fill_buf().map_err(stream_err)?.is_empty() {
            return Ok(None);
        }
        let mut filled = 0;
        while filled < self.buf.len() {
            match self.inner.read(&mut self.buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Format(format!(
                        "truncated frame {} ({filled} of {} bytes)",
                        self.frames,
                        self.buf.len()
                    )))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(stream_err(e)),
            }
        }
        let kind = kind_of(self.buf[0])?;
        let index = u32::from_le_bytes(self.buf[1..5].try_into().expect("4 bytes"));
        let row = self.buf[5..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.frames += 1;
        Ok(Some(Frame { kind, index, row }))
    }
}

impl<R: BufRead> Iterator for FrameReader<R> {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let mut out = Vec::new();
        encode_frame(RowKind::K, 258, &[1.0, -2.5], &mut out);
        assert_eq!(out.len(), frame_len(2));
        assert_eq!(out[0], b'K');
        assert_eq!(&out[1..5], &[2, 1, 0, 0]);
        assert_eq!(&out[5..13], &1.0f64.to_le_bytes());
        assert_eq!(&out[13..21], &(-2.5f64).to_le_bytes());
    }

    #[test]
    fn round_trip_all_kinds() {
        let kinds = [RowKind::V, RowKind::K, RowKind::Q, RowKind::X2, RowKind::X1];
        let mut w = FrameWriter::new(Vec::new(), 3);
        for (i, &kind) in kinds.iter().enumerate() {
            w.write(kind, i as u32, &[i as f64, 0.5, -1e-300]).unwrap();
        }
        assert!(w.write(RowKind::V, 0, &[1.0]).is_err());
        let bytes = w.into_inner().unwrap();
        let frames: Vec<Frame> = FrameReader::new(&bytes[..], 3).collect::<Result<_>>().unwrap();
        assert_eq!(frames.len(), 5);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.kind, kinds[i]);
            assert_eq!(f.index, i as u32);
            assert_eq!(f.row, vec![i as f64, 0.5, -1e-300]);
        }
    }

    #[test]
    fn truncated_and_unknown_tag() {
        let mut bytes = Vec::new();
        encode_frame(RowKind::V, 0, &[1.0], &mut bytes);
        let cut = &bytes[..bytes.len() - 1];
        let mut r = FrameReader::new(cut, 1);
        assert!(matches!(r.next_frame(), Err(Error::Format(_))));
        bytes[0] = b'Z';
        let mut r = FrameReader::new(&bytes[..], 1);
        assert!(matches!(r.next_frame(), Err(Error::Format(_))));
        let mut empty = FrameReader::new(&[][..], 1);
        assert!(empty.next_frame().unwrap().is_none());
    }
}
