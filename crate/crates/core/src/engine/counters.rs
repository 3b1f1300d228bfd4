use super::record::ByteCount;

/// Per-phase tallies for one stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhaseCounters {
    /// Tasks launched (`m_j` or `r_j`).
    pub tasks: u64,
    pub bytes_read: ByteCount,
    pub bytes_written: ByteCount,
    pub records_read: u64,
    pub records_written: u64,
}

impl PhaseCounters {
    pub(crate) fn absorb(&mut self, read: ByteCount, written: ByteCount, records_read: u64, records_written: u64) {
        self.bytes_read.add(read);
        self.bytes_written.add(written);
        self.records_read += records_read;
        self.records_written += records_written;
    }
}

/// Byte and task counters for one stage, summed over successful task attempts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskCounters {
    pub stage: String,
    pub map: PhaseCounters,
    pub reduce: PhaseCounters,
    /// Distinct keys delivered to reducers (`k_j`).
    pub distinct_reduce_keys: u64,
    /// Attempts that crashed and were re-executed.
    pub failed_attempts: u64,
    /// Bytes spilled by reducers holding oversized groups. Not part of the read/write model.
    pub spill_bytes: u64,
}

impl TaskCounters {
    pub fn has_reduce(&self) -> bool {
        self.reduce.tasks > 0
    }

    pub fn total_read(&self) -> u64 {
        self.map.bytes_read.total() + self.reduce.bytes_read.total()
    }

    pub fn total_written(&self) -> u64 {
        self.map.bytes_written.total() + self.reduce.bytes_written.total()
    }
}
