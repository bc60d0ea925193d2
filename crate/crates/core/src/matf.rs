//! MATF binary matrix files.
//!
//! Layout: the 8 magic bytes `MATF0001`, `rows` and `cols` as little-endian
//! `u32`, then `rows × cols` little-endian `f64` values in row-major order.
//! There is no padding, so a file is exactly `16 + 8·rows·cols` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"MATF0001";
pub const HEADER_LEN: usize = 16;

pub fn encode(m: &DenseMatrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Format(format!("{} rows do not fit in u32", m.rows())))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Format(format!("{} cols do not fit in u32", m.cols())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn parse_header(header: &[u8]) -> Result<(usize, usize)> {
    if header.len() < HEADER_LEN {
        return Err(Error::Format(format!("truncated header: {} of {HEADER_LEN} bytes", header.len())));
    }
    if &header[..8] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&header[..8]))));
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    Ok((rows, cols))
}

fn decode_value(bytes: &[u8], index: usize, cols: usize) -> Result<f64> {
    let v = f64::from_le_bytes(bytes.try_into().unwrap());
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            row: index / cols.max(1),
            col: index % cols.max(1),
            offset: HEADER_LEN + 8 * index,
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<DenseMatrix> {
    let (rows, cols) = parse_header(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format("declared dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload length mismatch: header declares {rows}x{cols} ({expected} bytes), found {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .enumerate()
        .map(|(i, b)| decode_value(b, i, cols))
        .collect::<Result<Vec<_>>>()?;
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn mat_store(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(m)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn mat_load(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a MATF file one row at a time without holding the whole matrix.
pub struct MatfRowReader {
    path: PathBuf,
    reader: BufReader<File>,
    rows: usize,
    cols: usize,
    next_row: usize,
    buf: Vec<u8>,
}

impl MatfRowReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut reader = BufReader::new(file);
        let mut header = [0u8; HEADER_LEN];
        reader.read_exact(&mut header).map_err(|e| Error::io(&path, e))?;
        let (rows, cols) = parse_header(&header)?;
        let expected = HEADER_LEN as u64 + 8 * rows as u64 * cols as u64;
        if len != expected {
            return Err(Error::Format(format!(
                "payload length mismatch: header declares {rows}x{cols}, file holds {} payload bytes",
                len.saturating_sub(HEADER_LEN as u64)
            )));
        }
        Ok(MatfRowReader {
            path,
            reader,
            rows,
            cols,
            next_row: 0,
            buf: vec![0u8; 8 * cols],
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Next row, or `None` once every row has been read.
    pub fn next_row(&mut self) -> Option<Result<Vec<f64>>> {
        if self.next_row == self.rows {
            return None;
        }
        if let Err(e) = self.reader.read_exact(&mut self.buf) {
            return Some(Err(Error::io(&self.path, e)));
        }
        let base = self.next_row * self.cols;
        self.next_row += 1;
        Some(
            self.buf
                .chunks_exact(8)
                .enumerate()
                .map(|(c, b)| decode_value(b, base + c, self.cols))
                .collect(),
        )
    }
}

impl Iterator for MatfRowReader {
    type Item = Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_row()
    }
}

/// Streams rows into a MATF file whose dimensions are fixed up front.
pub struct MatfRowWriter {
    path: PathBuf,
    writer: BufWriter<File>,
    cols: usize,
    remaining: usize,
}

impl MatfRowWriter {
    pub fn create(path: impl AsRef<Path>, rows: usize, cols: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = BufWriter::new(file);
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&(rows as u32).to_le_bytes());
        header.extend_from_slice(&(cols as u32).to_le_bytes());
        writer.write_all(&header).map_err(|e| Error::io(&path, e))?;
        Ok(MatfRowWriter {
            path,
            writer,
            cols,
            remaining: rows,
        })
    }

    pub fn write_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch {
                what: "MATF row length",
                expected: self.cols,
                found: row.len(),
            });
        }
        if self.remaining == 0 {
            return Err(Error::Format("more rows written than declared".into()));
        }
        self.remaining -= 1;
        for v in row {
            self.writer.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.remaining != 0 {
            return Err(Error::Format(format!("{} declared rows never written", self.remaining)));
        }
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}
