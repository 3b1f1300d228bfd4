//! Row-keyed matrices stored as an ordered list of record files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dense::DenseMatrix;
use crate::engine::{encode_row, ChannelOutput, Codec, EngineError, InputSplit, RecordFile, RecordWriter};

/// Bytes in a generated row key.
pub const ROW_KEY_BYTES: usize = 32;

/// Fixed-width decimal row key, `ROW_KEY_BYTES` long.
pub fn row_key(i: u64) -> Vec<u8> {
    format!("{i:0width$}", width = ROW_KEY_BYTES).into_bytes()
}

const META_FILE: &str = "matrix.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub file: RecordFile,
    pub rows: u64,
}

/// An `m x n` matrix whose rows are records spread over ordered partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedMatrix {
    partitions: Vec<Partition>,
    rows: u64,
    cols: usize,
    codec: Codec,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    rows: u64,
    cols: usize,
    format: String,
    partitions: Vec<PartMeta>,
}

#[derive(Serialize, Deserialize)]
struct PartMeta {
    file: String,
    rows: u64,
}

impl PartitionedMatrix {
    /// Write `a` under `dir` with generated row keys, `rows_per_partition` rows per file.
    pub fn write(dir: &Path, a: &DenseMatrix, rows_per_partition: usize, codec: Codec) -> Result<Self, EngineError> {
        let rows = (0..a.rows()).map(|i| (row_key(i as u64), a.row(i).to_vec()));
        Self::write_rows(dir, a.cols(), rows_per_partition, codec, rows)
    }

    /// Write keyed rows under `dir`, starting a new partition every `rows_per_partition` rows.
    pub fn write_rows(
        dir: &Path,
        cols: usize,
        rows_per_partition: usize,
        codec: Codec,
        rows: impl IntoIterator<Item = (Vec<u8>, Vec<f64>)>,
    ) -> Result<Self, EngineError> {
        if rows_per_partition == 0 || cols == 0 {
            return Err(EngineError::Config("rows_per_partition and cols must be positive".into()));
        }
        let codec = match codec {
            Codec::Rows { .. } => Codec::Rows { cols },
            c => c,
        };
        fs::create_dir_all(dir).map_err(|e| EngineError::io(dir, e))?;
        let mut partitions = Vec::new();
        let mut writer: Option<(RecordWriter, PathBuf)> = None;
        let mut in_part = 0;
        let mut total = 0u64;
        for (key, row) in rows {
            if row.len() != cols {
                return Err(EngineError::Config(format!("row {total} has {} values, expected {cols}", row.len())));
            }
            if writer.is_none() {
                let path = dir.join(format!("part-{:05}.rec", partitions.len()));
                writer = Some((RecordWriter::create(&path, codec)?, path));
            }
            let (w, _) = writer.as_mut().unwrap();
            w.write(&key, &encode_row(&row))?;
            in_part += 1;
            total += 1;
            if in_part == rows_per_partition {
                let (w, path) = writer.take().unwrap();
                w.finish()?;
                partitions.push(Partition { file: RecordFile::new(path, codec), rows: in_part as u64 });
                in_part = 0;
            }
        }
        if let Some((w, path)) = writer.take() {
            w.finish()?;
            partitions.push(Partition { file: RecordFile::new(path, codec), rows: in_part as u64 });
        }
        let m = PartitionedMatrix { partitions, rows: total, cols, codec };
        m.write_meta(dir)?;
        Ok(m)
    }

    /// Load a matrix previously written to `dir`.
    pub fn open(dir: &Path) -> Result<Self, EngineError> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| EngineError::io(&path, e))?;
        let meta: Meta = toml::from_str(&text)
            .map_err(|e| EngineError::Corrupt { path: path.clone(), detail: e.to_string() })?;
        let codec = Codec::parse(&meta.format, meta.cols)?;
        let partitions: Vec<Partition> = meta
            .partitions
            .iter()
            .map(|p| Partition { file: RecordFile::new(dir.join(&p.file), codec), rows: p.rows })
            .collect();
        let counted: u64 = partitions.iter().map(|p| p.rows).sum();
        if counted != meta.rows {
            return Err(EngineError::Corrupt { path, detail: format!("partitions hold {counted} rows, header says {}", meta.rows) });
        }
        Ok(PartitionedMatrix { partitions, rows: meta.rows, cols: meta.cols, codec })
    }

    /// Wrap an engine output channel holding one row per record.
    ///
    /// Per-file counts recorded by the engine are trusted; otherwise files are scanned.
    pub fn from_channel(channel: &ChannelOutput, cols: usize) -> Result<Self, EngineError> {
        if channel.file_records.len() == channel.files.len() {
            let partitions = channel
                .files
                .iter()
                .zip(&channel.file_records)
                .map(|(f, &rows)| Partition { file: f.clone(), rows })
                .collect();
            return Ok(PartitionedMatrix { partitions, rows: channel.records, cols, codec: channel.codec });
        }
        Self::scan_channel(channel, cols)
    }

    /// Wrap a channel, counting and width-checking every row.
    pub fn scan_channel(channel: &ChannelOutput, cols: usize) -> Result<Self, EngineError> {
        let mut partitions = Vec::with_capacity(channel.files.len());
        let mut total = 0;
        for f in &channel.files {
            let mut n = 0u64;
            for r in f.reader()? {
                let r = r?;
                if r.value.len() != 8 * cols {
                    return Err(EngineError::Corrupt {
                        path: f.path.clone(),
                        detail: format!("row value has {} bytes, expected {}", r.value.len(), 8 * cols),
                    });
                }
                n += 1;
            }
            total += n;
            partitions.push(Partition { file: f.clone(), rows: n });
        }
        Ok(PartitionedMatrix { partitions, rows: total, cols, codec: channel.codec })
    }

    fn write_meta(&self, dir: &Path) -> Result<(), EngineError> {
        let mut parts = Vec::with_capacity(self.partitions.len());
        for p in &self.partitions {
            let rel = p.file.path.strip_prefix(dir).map_err(|_| {
                EngineError::Config(format!("partition {} is outside {}", p.file.path.display(), dir.display()))
            })?;
            parts.push(PartMeta { file: rel.to_string_lossy().into_owned(), rows: p.rows });
        }
        let meta = Meta { rows: self.rows, cols: self.cols, format: self.codec.name().to_string(), partitions: parts };
        let text = toml::to_string(&meta).map_err(|e| EngineError::Config(e.to_string()))?;
        let path = dir.join(META_FILE);
        fs::write(&path, text).map_err(|e| EngineError::io(&path, e))
    }

    /// Copy all partitions into `dir` and return the copy.
    pub fn copy_to(&self, dir: &Path) -> Result<Self, EngineError> {
        fs::create_dir_all(dir).map_err(|e| EngineError::io(dir, e))?;
        let mut partitions = Vec::with_capacity(self.partitions.len());
        for (i, p) in self.partitions.iter().enumerate() {
            let dst = dir.join(format!("part-{i:05}.rec"));
            fs::copy(&p.file.path, &dst).map_err(|e| EngineError::io(&dst, e))?;
            partitions.push(Partition { file: RecordFile::new(dst, self.codec), rows: p.rows });
        }
        let m = PartitionedMatrix { partitions, ..self.clone() };
        m.write_meta(dir)?;
        Ok(m)
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn channel(&self) -> ChannelOutput {
        ChannelOutput::with_file_records(
            self.codec,
            self.partitions.iter().map(|p| p.file.clone()).collect(),
            self.partitions.iter().map(|p| p.rows).collect(),
        )
    }

    /// One map split per partition.
    pub fn splits(&self) -> Vec<InputSplit> {
        self.partitions.iter().map(|p| InputSplit { files: vec![p.file.clone()] }).collect()
    }

    /// Splits of consecutive partitions merged until each holds at least `min_rows` rows.
    ///
    /// Empty partitions are dropped. A short tail joins the preceding split.
    pub fn coalesced_splits(&self, min_rows: u64) -> Vec<InputSplit> {
        let mut splits: Vec<(InputSplit, u64)> = Vec::new();
        let mut cur = InputSplit::default();
        let mut cur_rows = 0;
        for p in self.partitions.iter().filter(|p| p.rows > 0) {
            cur.files.push(p.file.clone());
            cur_rows += p.rows;
            if cur_rows >= min_rows {
                splits.push((std::mem::take(&mut cur), cur_rows));
                cur_rows = 0;
            }
        }
        if !cur.files.is_empty() {
            match splits.last_mut() {
                Some((last, n)) => {
                    last.files.append(&mut cur.files);
                    *n += cur_rows;
                }
                None => splits.push((cur, cur_rows)),
            }
        }
        splits.into_iter().map(|(s, _)| s).collect()
    }

    /// Read every row into memory, in partition order.
    pub fn gather(&self) -> Result<(Vec<Vec<u8>>, DenseMatrix), EngineError> {
        let mut keys = Vec::with_capacity(self.rows as usize);
        let mut data = Vec::with_capacity(self.rows as usize * self.cols);
        for p in &self.partitions {
            for r in p.file.reader()? {
                let r = r?;
                let row = r.row()?;
                if row.len() != self.cols {
                    return Err(EngineError::Corrupt {
                        path: p.file.path.clone(),
                        detail: format!("row has {} values, expected {}", row.len(), self.cols),
                    });
                }
                keys.push(r.key);
                data.extend_from_slice(&row);
            }
        }
        let m = keys.len();
        let dense = DenseMatrix::from_vec(m, self.cols, data).map_err(|e| EngineError::Config(e.to_string()))?;
        Ok((keys, dense))
    }

    pub fn to_dense(&self) -> Result<DenseMatrix, EngineError> {
        Ok(self.gather()?.1)
    }

    pub fn keys(&self) -> Result<Vec<Vec<u8>>, EngineError> {
        let mut keys = Vec::with_capacity(self.rows as usize);
        for p in &self.partitions {
            for r in p.file.reader()? {
                keys.push(r?.key);
            }
        }
        Ok(keys)
    }

    pub fn remove_files(&self) -> Result<(), EngineError> {
        self.channel().remove_files()
    }
}
