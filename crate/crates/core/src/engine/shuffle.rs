//! Map-side partitioning into sorted runs and reduce-side k-way merging into key groups.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::{Path, PathBuf};

use super::record::{ByteCount, Codec, Record, RecordFile, RecordReader, RecordWriter};
use super::EngineError;

/// One key with all of its values.
pub type Grouped = (Vec<u8>, Vec<Vec<u8>>);

/// Reducer owning `key`: FNV-1a of the key bytes modulo the reducer count.
pub fn partition_for(key: &[u8], num_reducers: usize) -> usize {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % num_reducers as u64) as usize
}

/// Buffers map output per reducer and spills stably sorted runs when the buffer exceeds its budget.
pub struct ShuffleWriter {
    dir: PathBuf,
    budget: usize,
    buffers: Vec<Vec<Record>>,
    buffered: usize,
    runs: Vec<Vec<RecordFile>>,
    written: ByteCount,
    records: u64,
}

pub(crate) struct ShuffleOutput {
    /// Sorted runs per reducer, in spill order.
    pub runs: Vec<Vec<RecordFile>>,
    pub written: ByteCount,
    pub records: u64,
}

impl ShuffleWriter {
    pub(crate) fn new(dir: &Path, num_reducers: usize, budget: usize) -> Self {
        ShuffleWriter {
            dir: dir.to_path_buf(),
            budget: budget.max(1),
            buffers: vec![Vec::new(); num_reducers],
            buffered: 0,
            runs: vec![Vec::new(); num_reducers],
            written: ByteCount::default(),
            records: 0,
        }
    }

    pub(crate) fn push(&mut self, key: &[u8], value: &[u8]) -> Result<(), EngineError> {
        if key.is_empty() {
            return Err(EngineError::Corrupt { path: self.dir.clone(), detail: "empty record key".into() });
        }
        let r = partition_for(key, self.buffers.len());
        self.buffered += key.len() + value.len() + 64;
        self.buffers[r].push(Record::new(key, value));
        if self.buffered > self.budget {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<(), EngineError> {
        for (r, buf) in self.buffers.iter_mut().enumerate() {
            if buf.is_empty() {
                continue;
            }
            // stable: equal keys keep emission order
            buf.sort_by(|a, b| a.key.cmp(&b.key));
            let path = self.dir.join(format!("shuffle-r{r:05}-{:04}.rec", self.runs[r].len()));
            let mut w = RecordWriter::create(&path, Codec::Framed)?;
            for rec in buf.drain(..) {
                w.write_record(&rec)?;
            }
            let (bytes, n) = w.finish()?;
            self.written.add(bytes);
            self.records += n;
            self.runs[r].push(RecordFile::new(path, Codec::Framed));
        }
        self.buffered = 0;
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<ShuffleOutput, EngineError> {
        self.spill()?;
        Ok(ShuffleOutput { runs: self.runs, written: self.written, records: self.records })
    }
}

/// Key groups delivered to one reduce task in ascending key-byte order.
///
/// Within a group, values arrive in (map task, emission) order.
pub struct Groups {
    readers: Vec<RecordReader>,
    heads: Vec<Option<Record>>,
    heap: BinaryHeap<Reverse<(Vec<u8>, usize)>>,
    spill_dir: PathBuf,
    budget: usize,
    distinct: u64,
    spill_bytes: u64,
}

impl Groups {
    pub(crate) fn open(runs: &[RecordFile], spill_dir: &Path, budget: usize) -> Result<Self, EngineError> {
        let mut g = Groups {
            readers: Vec::with_capacity(runs.len()),
            heads: Vec::with_capacity(runs.len()),
            heap: BinaryHeap::new(),
            spill_dir: spill_dir.to_path_buf(),
            budget: budget.max(1),
            distinct: 0,
            spill_bytes: 0,
        };
        for (i, run) in runs.iter().enumerate() {
            g.readers.push(run.reader()?);
            g.heads.push(None);
            g.advance(i)?;
        }
        Ok(g)
    }

    fn advance(&mut self, src: usize) -> Result<(), EngineError> {
        match self.readers[src].next().transpose()? {
            Some(rec) => {
                self.heap.push(Reverse((rec.key.clone(), src)));
                self.heads[src] = Some(rec);
            }
            None => self.heads[src] = None,
        }
        Ok(())
    }

    fn pop(&mut self) -> Result<Option<Record>, EngineError> {
        let Some(Reverse((_, src))) = self.heap.pop() else { return Ok(None) };
        let rec = self.heads[src].take().expect("heap entry without head record");
        self.advance(src)?;
        Ok(Some(rec))
    }

    fn peek_key(&self) -> Option<&[u8]> {
        self.heap.peek().map(|Reverse((k, _))| k.as_slice())
    }

    pub fn next_group(&mut self) -> Result<Option<Group>, EngineError> {
        let Some(first) = self.pop()? else { return Ok(None) };
        self.distinct += 1;
        let key = first.key;
        let mut held = first.value.len();
        let mut values = vec![first.value];
        let mut spill: Option<(RecordWriter, tempfile::TempPath)> = None;
        while self.peek_key() == Some(key.as_slice()) {
            let rec = self.pop()?.expect("peeked record");
            if let Some((w, _)) = spill.as_mut() {
                w.write(b"v", &rec.value)?;
                continue;
            }
            held += rec.value.len();
            values.push(rec.value);
            if held > self.budget {
                let tmp = tempfile::Builder::new()
                    .prefix("group-spill-")
                    .tempfile_in(&self.spill_dir)
                    .map_err(|e| EngineError::io(&self.spill_dir, e))?
                    .into_temp_path();
                let mut w = RecordWriter::create(&tmp, Codec::Framed)?;
                for v in values.drain(..) {
                    w.write(b"v", &v)?;
                }
                spill = Some((w, tmp));
            }
        }
        let values = match spill {
            None => GroupValues::Memory(values.into_iter()),
            Some((w, path)) => {
                let (bytes, _) = w.finish()?;
                self.spill_bytes += bytes.total();
                let reader = RecordFile::new(path.to_path_buf(), Codec::Framed).reader()?;
                GroupValues::Spilled { reader, _path: path }
            }
        };
        Ok(Some(Group { key, values }))
    }

    /// Consume whatever the reduce function left unread so byte counters cover the whole input.
    pub(crate) fn drain(&mut self) -> Result<(), EngineError> {
        while self.next_group()?.is_some() {}
        Ok(())
    }

    pub(crate) fn read_counts(&self) -> (ByteCount, u64) {
        let bytes = self.readers.iter().map(|r| r.counts()).sum();
        let recs = self.readers.iter().map(|r| r.records()).sum();
        (bytes, recs)
    }

    pub(crate) fn distinct_keys(&self) -> u64 {
        self.distinct
    }

    pub(crate) fn spill_bytes(&self) -> u64 {
        self.spill_bytes
    }
}

impl Iterator for Groups {
    type Item = Result<Group, EngineError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_group().transpose()
    }
}

pub struct Group {
    pub key: Vec<u8>,
    values: GroupValues,
}

enum GroupValues {
    Memory(std::vec::IntoIter<Vec<u8>>),
    Spilled { reader: RecordReader, _path: tempfile::TempPath },
}

impl Group {
    pub fn is_spilled(&self) -> bool {
        matches!(self.values, GroupValues::Spilled { .. })
    }

    pub fn values(self) -> GroupValueIter {
        GroupValueIter(self.values)
    }

    pub fn collect_values(self) -> Result<Vec<Vec<u8>>, EngineError> {
        self.values().collect()
    }
}

pub struct GroupValueIter(GroupValues);

impl Iterator for GroupValueIter {
    type Item = Result<Vec<u8>, EngineError>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.0 {
            GroupValues::Memory(it) => it.next().map(Ok),
            GroupValues::Spilled { reader, .. } => reader.next().map(|r| r.map(|rec| rec.value)),
        }
    }
}

/// Partition `records` across `num_reducers`, spilling through `scratch`, and return each
/// reducer's `(key, values)` groups in delivery order.
pub fn shuffle(
    records: impl IntoIterator<Item = Record>,
    num_reducers: usize,
    scratch: &Path,
    memory_budget: usize,
) -> Result<Vec<Vec<Grouped>>, EngineError> {
    if num_reducers == 0 {
        return Err(EngineError::Config("shuffle needs at least one reducer".into()));
    }
    let mut w = ShuffleWriter::new(scratch, num_reducers, memory_budget);
    for r in records {
        w.push(&r.key, &r.value)?;
    }
    let out = w.finish()?;
    let mut result = Vec::with_capacity(num_reducers);
    for runs in &out.runs {
        let mut groups = Groups::open(runs, scratch, memory_budget)?;
        let mut mine = Vec::new();
        while let Some(g) = groups.next_group()? {
            let key = g.key.clone();
            mine.push((key, g.collect_values()?));
        }
        result.push(mine);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_lands_on_one_reducer() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![Record::new("a", "1"), Record::new("b", "2"), Record::new("a", "3"), Record::new("b", "4")];
        let out = shuffle(recs, 2, dir.path(), 1 << 20).unwrap();
        let groups: Vec<_> = out.iter().flatten().collect();
        assert_eq!(groups.len(), 2);
        for (k, vals) in groups {
            assert_eq!(vals.len(), 2);
            let owners = out.iter().filter(|r| r.iter().any(|(kk, _)| kk == k)).count();
            assert_eq!(owners, 1);
        }
        let a = out.iter().flatten().find(|(k, _)| k == b"a").unwrap();
        assert_eq!(a.1, vec![b"1".to_vec(), b"3".to_vec()]);
    }

    #[test]
    fn keys_sorted_and_values_stable_across_spills() {
        let dir = tempfile::tempdir().unwrap();
        // tiny budget forces one run per record
        let recs: Vec<Record> = (0..50u32)
            .map(|i| Record::new(vec![b'k', b'0' + (i % 5) as u8], i.to_be_bytes().to_vec()))
            .collect();
        let out = shuffle(recs, 1, dir.path(), 1).unwrap();
        let keys: Vec<_> = out[0].iter().map(|(k, _)| k.clone()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for (k, vals) in &out[0] {
            let idx: Vec<u32> = vals.iter().map(|v| u32::from_be_bytes(v[..].try_into().unwrap())).collect();
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx.iter().all(|i| (i % 5) as u8 == k[1] - b'0'));
        }
    }

    #[test]
    fn oversized_group_spills_but_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ShuffleWriter::new(dir.path(), 1, 1 << 20);
        for i in 0..100u32 {
            w.push(b"same", &i.to_be_bytes()).unwrap();
        }
        let out = w.finish().unwrap();
        let mut groups = Groups::open(&out.runs[0], dir.path(), 40).unwrap();
        let g = groups.next_group().unwrap().unwrap();
        assert!(g.is_spilled());
        let vals: Vec<u32> = g.values().map(|v| u32::from_be_bytes(v.unwrap()[..].try_into().unwrap())).collect();
        assert_eq!(vals, (0..100).collect::<Vec<_>>());
        assert!(groups.next_group().unwrap().is_none());
        assert!(groups.spill_bytes() > 0);
    }

    #[test]
    fn more_reducers_than_keys_leaves_some_idle() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<Record> = (0..3u64).flat_map(|k| (0..4).map(move |_| Record::new(k.to_be_bytes().to_vec(), "x"))).collect();
        let out = shuffle(recs, 16, dir.path(), 1 << 20).unwrap();
        let busy = out.iter().filter(|r| !r.is_empty()).count();
        assert!(busy <= 3);
        assert_eq!(out.iter().map(Vec::len).sum::<usize>(), 3);
    }

    #[test]
    fn empty_input_yields_empty_reducers() {
        let dir = tempfile::tempdir().unwrap();
        let out = shuffle(Vec::new(), 3, dir.path(), 1 << 20).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(Vec::is_empty));
    }
}
