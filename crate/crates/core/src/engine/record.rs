//! Records, on-disk codecs and byte-exact readers/writers.
//!
//! Three codecs share one record model:
//!
//! * `Text`: `key<TAB>v1,v2,...,vn\n` with 17 significant digits per float.
//! * `Rows { cols }`: little-endian `u32` key length, key bytes, then `8 * cols` value bytes.
//! * `Framed`: `u32` key length, key, `u32` value length, value. Used for
//!   intermediate files whose values are arbitrary bytes (serialized blocks).
//!
//! Every reader and writer tallies key, value and framing bytes separately.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::EngineError;
use crate::dense::DenseMatrix;

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Record {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl Record {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        Record { key: key.into(), value: value.into() }
    }

    pub fn from_row(key: impl Into<Vec<u8>>, row: &[f64]) -> Self {
        Record { key: key.into(), value: encode_row(row) }
    }

    pub fn row(&self) -> Result<Vec<f64>, EngineError> {
        decode_row(&self.value)
    }
}

impl fmt::Debug for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Record({:?}, {} bytes)", String::from_utf8_lossy(&self.key), self.value.len())
    }
}

pub fn encode_row(row: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(row.len() * 8);
    for v in row {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_row(bytes: &[u8]) -> Result<Vec<f64>, EngineError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(EngineError::Corrupt {
            path: PathBuf::new(),
            detail: format!("float row of {} bytes is not a multiple of 8", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Render a float so that parsing it back yields the same bits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Bytes crossing the disk boundary, split by role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ByteCount {
    pub key: u64,
    pub value: u64,
    /// Separators, length prefixes and block headers.
    pub framing: u64,
}

impl ByteCount {
    pub fn total(&self) -> u64 {
        self.key + self.value + self.framing
    }

    pub fn add(&mut self, other: ByteCount) {
        self.key += other.key;
        self.value += other.value;
        self.framing += other.framing;
    }
}

impl std::ops::Add for ByteCount {
    type Output = ByteCount;
    fn add(mut self, rhs: ByteCount) -> ByteCount {
        ByteCount::add(&mut self, rhs);
        self
    }
}

impl std::iter::Sum for ByteCount {
    fn sum<I: Iterator<Item = ByteCount>>(iter: I) -> ByteCount {
        iter.fold(ByteCount::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Text,
    Rows { cols: usize },
    Framed,
}

impl Codec {
    pub fn name(&self) -> &'static str {
        match self {
            Codec::Text => "text",
            Codec::Rows { .. } => "binary",
            Codec::Framed => "framed",
        }
    }

    /// Parse `text`, `binary` or `framed`; `binary` needs the row width.
    pub fn parse(name: &str, cols: usize) -> Result<Codec, EngineError> {
        match name {
            "text" => Ok(Codec::Text),
            "binary" => Ok(Codec::Rows { cols }),
            "framed" => Ok(Codec::Framed),
            other => Err(EngineError::Config(format!("unknown record format {other:?}"))),
        }
    }

    /// Byte composition of one record as this codec lays it out on disk.
    pub fn measure(&self, key: &[u8], value: &[u8]) -> ByteCount {
        match self {
            Codec::Text => ByteCount {
                key: key.len() as u64,
                value: text_value_len(value),
                framing: 2,
            },
            Codec::Rows { .. } => ByteCount { key: key.len() as u64, value: value.len() as u64, framing: 4 },
            Codec::Framed => {
                let inner = Block::composition(value);
                ByteCount {
                    key: key.len() as u64 + inner.key,
                    value: inner.value,
                    framing: 8 + inner.framing,
                }
            }
        }
    }
}

fn text_value_len(value: &[u8]) -> u64 {
    let n = value.len() / 8;
    value
        .chunks_exact(8)
        .map(|c| format_float(f64::from_le_bytes(c.try_into().unwrap())).len() as u64)
        .sum::<u64>()
        + n.saturating_sub(1) as u64
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A file of records in a known codec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordFile {
    pub path: PathBuf,
    pub codec: Codec,
}

impl RecordFile {
    pub fn new(path: impl Into<PathBuf>, codec: Codec) -> Self {
        RecordFile { path: path.into(), codec }
    }

    pub fn reader(&self) -> Result<RecordReader, EngineError> {
        RecordReader::open(self)
    }

    pub fn read_all(&self) -> Result<Vec<Record>, EngineError> {
        self.reader()?.collect()
    }
}

pub struct RecordReader {
    inner: BufReader<File>,
    path: PathBuf,
    codec: Codec,
    counts: ByteCount,
    records: u64,
    line: String,
}

impl RecordReader {
    pub fn open(file: &RecordFile) -> Result<Self, EngineError> {
        let f = File::open(&file.path).map_err(|e| EngineError::io(&file.path, e))?;
        Ok(RecordReader {
            inner: BufReader::with_capacity(1 << 16, f),
            path: file.path.clone(),
            codec: file.codec,
            counts: ByteCount::default(),
            records: 0,
            line: String::new(),
        })
    }

    pub fn counts(&self) -> ByteCount {
        self.counts
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    fn corrupt(&self, detail: impl Into<String>) -> EngineError {
        EngineError::Corrupt { path: self.path.clone(), detail: detail.into() }
    }

    fn read_u32(&mut self) -> Result<Option<u32>, EngineError> {
        let mut buf = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = self.inner.read(&mut buf[got..]).map_err(|e| EngineError::io(&self.path, e))?;
            if n == 0 {
                return if got == 0 { Ok(None) } else { Err(self.corrupt("truncated length prefix")) };
            }
            got += n;
        }
        Ok(Some(u32::from_le_bytes(buf)))
    }

    fn read_exact_vec(&mut self, len: usize) -> Result<Vec<u8>, EngineError> {
        let mut v = vec![0u8; len];
        self.inner.read_exact(&mut v).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.corrupt("truncated record")
            } else {
                EngineError::io(&self.path, e)
            }
        })?;
        Ok(v)
    }

    fn next_record(&mut self) -> Result<Option<Record>, EngineError> {
        let rec = match self.codec {
            Codec::Text => {
                self.line.clear();
                let n = self.inner.read_line(&mut self.line).map_err(|e| EngineError::io(&self.path, e))?;
                if n == 0 {
                    return Ok(None);
                }
                let line = self.line.strip_suffix('\n').unwrap_or(&self.line);
                let (key, vals) = line
                    .split_once('\t')
                    .ok_or_else(|| EngineError::Corrupt { path: self.path.clone(), detail: format!("line {} has no tab", self.records + 1) })?;
                let mut value = Vec::new();
                if !vals.is_empty() {
                    for tok in vals.split(',') {
                        let v = f64::from_str(tok.trim()).map_err(|_| EngineError::Corrupt {
                            path: self.path.clone(),
                            detail: format!("bad float {tok:?} on line {}", self.records + 1),
                        })?;
                        value.extend_from_slice(&v.to_le_bytes());
                    }
                }
                self.counts.add(ByteCount {
                    key: key.len() as u64,
                    value: vals.len() as u64,
                    framing: (n - key.len() - vals.len()) as u64,
                });
                Record { key: key.as_bytes().to_vec(), value }
            }
            Codec::Rows { cols } => {
                let Some(klen) = self.read_u32()? else { return Ok(None) };
                let key = self.read_exact_vec(klen as usize)?;
                let value = self.read_exact_vec(8 * cols)?;
                self.counts.add(Codec::Rows { cols }.measure(&key, &value));
                Record { key, value }
            }
            Codec::Framed => {
                let Some(klen) = self.read_u32()? else { return Ok(None) };
                let key = self.read_exact_vec(klen as usize)?;
                let vlen = self.read_u32()?.ok_or_else(|| self.corrupt("missing value length"))?;
                let value = self.read_exact_vec(vlen as usize)?;
                self.counts.add(Codec::Framed.measure(&key, &value));
                Record { key, value }
            }
        };
        self.records += 1;
        Ok(Some(rec))
    }
}

impl Iterator for RecordReader {
    type Item = Result<Record, EngineError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

pub struct RecordWriter {
    inner: BufWriter<File>,
    path: PathBuf,
    codec: Codec,
    counts: ByteCount,
    records: u64,
}

impl RecordWriter {
    pub fn create(path: impl AsRef<Path>, codec: Codec) -> Result<Self, EngineError> {
        let path = path.as_ref().to_path_buf();
        let f = File::create(&path).map_err(|e| EngineError::io(&path, e))?;
        Ok(RecordWriter { inner: BufWriter::with_capacity(1 << 16, f), path, codec, counts: ByteCount::default(), records: 0 })
    }

    pub fn write(&mut self, key: &[u8], value: &[u8]) -> Result<(), EngineError> {
        if key.is_empty() {
            return Err(EngineError::Corrupt { path: self.path.clone(), detail: "empty record key".into() });
        }
        let io = |e| EngineError::io(&self.path, e);
        match self.codec {
            Codec::Text => {
                if key.contains(&b'\t') || key.contains(&b'\n') {
                    return Err(EngineError::Corrupt {
                        path: self.path.clone(),
                        detail: "text records cannot have tabs or newlines in keys".into(),
                    });
                }
                let row = decode_row(value)?;
                let mut line = Vec::with_capacity(key.len() + 24 * row.len() + 2);
                line.extend_from_slice(key);
                line.push(b'\t');
                for (i, v) in row.iter().enumerate() {
                    if i > 0 {
                        line.push(b',');
                    }
                    line.extend_from_slice(format_float(*v).as_bytes());
                }
                line.push(b'\n');
                self.inner.write_all(&line).map_err(|e| EngineError::io(&self.path, e))?;
            }
            Codec::Rows { cols } => {
                if value.len() != 8 * cols {
                    return Err(EngineError::Corrupt {
                        path: self.path.clone(),
                        detail: format!("row of {} bytes in a {cols}-column file", value.len()),
                    });
                }
                self.inner.write_all(&(key.len() as u32).to_le_bytes()).map_err(io)?;
                self.inner.write_all(key).map_err(|e| EngineError::io(&self.path, e))?;
                self.inner.write_all(value).map_err(|e| EngineError::io(&self.path, e))?;
            }
            Codec::Framed => {
                self.inner.write_all(&(key.len() as u32).to_le_bytes()).map_err(io)?;
                self.inner.write_all(key).map_err(|e| EngineError::io(&self.path, e))?;
                self.inner.write_all(&(value.len() as u32).to_le_bytes()).map_err(|e| EngineError::io(&self.path, e))?;
                self.inner.write_all(value).map_err(|e| EngineError::io(&self.path, e))?;
            }
        }
        self.counts.add(self.codec.measure(key, value));
        self.records += 1;
        Ok(())
    }

    pub fn write_record(&mut self, r: &Record) -> Result<(), EngineError> {
        self.write(&r.key, &r.value)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn counts(&self) -> ByteCount {
        self.counts
    }

    /// Flush and return the byte tally and record count.
    pub fn finish(mut self) -> Result<(ByteCount, u64), EngineError> {
        self.inner.flush().map_err(|e| EngineError::io(&self.path, e))?;
        Ok((self.counts, self.records))
    }
}

const BLOCK_MAGIC: &[u8; 8] = b"TSQRBLK1";
const BLOCK_HEADER: usize = 8 + 4 + 4 + 1;

/// A dense block serialized into a single record value, optionally carrying one key per row.
///
/// Layout: magic, `u32` rows, `u32` cols, `u8` has-keys flag, then per row a
/// `u16` key length and key bytes (when keyed), then the row-major floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub keys: Option<Vec<Vec<u8>>>,
    pub matrix: DenseMatrix,
}

impl Block {
    pub fn new(matrix: DenseMatrix) -> Self {
        Block { keys: None, matrix }
    }

    pub fn with_keys(keys: Vec<Vec<u8>>, matrix: DenseMatrix) -> Self {
        debug_assert_eq!(keys.len(), matrix.rows());
        Block { keys: Some(keys), matrix }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (rows, cols) = self.matrix.shape();
        let key_bytes: usize = self.keys.iter().flatten().map(|k| 2 + k.len()).sum();
        let mut out = Vec::with_capacity(BLOCK_HEADER + key_bytes + 8 * rows * cols);
        out.extend_from_slice(BLOCK_MAGIC);
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        out.push(self.keys.is_some() as u8);
        for k in self.keys.iter().flatten() {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k);
        }
        for v in self.matrix.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Block, EngineError> {
        let bad = |d: &str| EngineError::Corrupt { path: PathBuf::new(), detail: format!("block: {d}") };
        if bytes.len() < BLOCK_HEADER || &bytes[..8] != BLOCK_MAGIC {
            return Err(bad("missing header"));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let keyed = bytes[16] != 0;
        let mut pos = BLOCK_HEADER;
        let keys = if keyed {
            let mut keys = Vec::with_capacity(rows);
            for _ in 0..rows {
                if pos + 2 > bytes.len() {
                    return Err(bad("truncated key"));
                }
                let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
                pos += 2;
                if pos + len > bytes.len() {
                    return Err(bad("truncated key"));
                }
                keys.push(bytes[pos..pos + len].to_vec());
                pos += len;
            }
            Some(keys)
        } else {
            None
        };
        if bytes.len() - pos != 8 * rows * cols {
            return Err(bad("payload length does not match shape"));
        }
        let data = decode_row(&bytes[pos..])?;
        let matrix = DenseMatrix::from_vec(rows, cols, data).map_err(|e| bad(&e.to_string()))?;
        Ok(Block { keys, matrix })
    }

    /// Key/value/framing split of an encoded value; non-block values count entirely as value bytes.
    pub fn composition(bytes: &[u8]) -> ByteCount {
        let plain = ByteCount { key: 0, value: bytes.len() as u64, framing: 0 };
        if bytes.len() < BLOCK_HEADER || &bytes[..8] != BLOCK_MAGIC {
            return plain;
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
        let mut key = 0u64;
        let mut framing = BLOCK_HEADER as u64;
        if bytes[16] != 0 {
            let mut pos = BLOCK_HEADER;
            for _ in 0..rows {
                if pos + 2 > bytes.len() {
                    return plain;
                }
                let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
                pos += 2 + len;
                key += len as u64;
                framing += 2;
            }
        }
        ByteCount { key, value: 8 * rows as u64 * cols, framing }
    }
}
