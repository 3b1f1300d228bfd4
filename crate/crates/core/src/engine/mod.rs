//! A local map/shuffle/reduce engine over record files.
//!
//! Each stage runs one map task per input split, optionally shuffles the map
//! output by key into `num_reducers` reduce tasks, and writes every output
//! channel as one record file per task. Tasks run on up to `workers` threads
//! and communicate only through files under a job-scoped scratch directory.

mod counters;
mod fault;
mod pipeline;
mod record;
mod shuffle;
mod stage;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use counters::{PhaseCounters, TaskCounters};
pub use fault::FaultPolicy;
pub use pipeline::PipelineOutput;
pub use record::{
    decode_row, encode_row, format_float, Block, ByteCount, Codec, Record, RecordFile, RecordReader, RecordWriter,
};
pub use shuffle::{partition_for, shuffle, Group, GroupValueIter, Groups};
pub use stage::{
    ChannelSpec, Emitter, MapFn, Phase, RecordStream, ReduceFn, StageSpec, TaskContext, TaskId, PIPELINE_INPUT,
};

use shuffle::ShuffleWriter;
use stage::MainSink;

/// Error type returned by map and reduce functions.
pub type TaskError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record data in {}: {detail}", path.display())]
    Corrupt { path: PathBuf, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage:?}, task {task}: {source}")]
    TaskFailed {
        stage: String,
        task: TaskId,
        #[source]
        source: TaskError,
    },
    #[error("stage {stage:?}, task {task}: crashed on all {attempts} attempts")]
    RetriesExhausted { stage: String, task: TaskId, attempts: u32 },
}

impl EngineError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        EngineError::Io { path: path.as_ref().to_path_buf(), source }
    }

    /// The failing task's own error, if this is a task failure.
    pub fn task_source(&self) -> Option<&(dyn std::error::Error + Send + Sync + 'static)> {
        match self {
            EngineError::TaskFailed { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Maximum concurrently running tasks.
    pub workers: usize,
    pub faults: FaultPolicy,
    /// Map-side shuffle buffer per task before a sorted run is spilled.
    pub shuffle_buffer_bytes: usize,
    /// Values held in memory for one reduce group before it spills to disk.
    pub group_memory_bytes: usize,
    /// Keep shuffle runs, intermediate channels and the job directory.
    pub keep_intermediates: bool,
    /// Parent of the job directory. Falls back to `TSQR_TMPDIR`, then the system temp dir.
    pub scratch_root: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            faults: FaultPolicy::none(),
            shuffle_buffer_bytes: 64 << 20,
            group_memory_bytes: 256 << 20,
            keep_intermediates: false,
            scratch_root: None,
        }
    }
}

impl EngineConfig {
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_faults(mut self, faults: FaultPolicy) -> Self {
        self.faults = faults;
        self
    }

    pub fn with_scratch_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.scratch_root = Some(root.into());
        self
    }

    fn resolved_scratch_root(&self) -> PathBuf {
        self.scratch_root
            .clone()
            .or_else(|| std::env::var_os("TSQR_TMPDIR").map(PathBuf::from))
            .unwrap_or_else(std::env::temp_dir)
    }
}

/// One map task's input: records are read from the files in order.
#[derive(Debug, Clone, Default)]
pub struct InputSplit {
    pub files: Vec<RecordFile>,
}

#[derive(Debug, Clone, Default)]
pub struct StageInput {
    pub splits: Vec<InputSplit>,
    pub broadcast: BTreeMap<String, ChannelOutput>,
}

impl StageInput {
    /// One split per file of `channel`.
    pub fn from_channel(channel: &ChannelOutput) -> Self {
        StageInput { splits: channel.splits(), broadcast: BTreeMap::new() }
    }

    pub fn with_broadcast(mut self, name: impl Into<String>, channel: ChannelOutput) -> Self {
        self.broadcast.insert(name.into(), channel);
        self
    }
}

/// All files of one output channel, ordered by producing task.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelOutput {
    pub codec: Codec,
    pub files: Vec<RecordFile>,
    pub records: u64,
    /// Records per file, when known. Empty otherwise.
    pub file_records: Vec<u64>,
}

impl ChannelOutput {
    pub fn new(codec: Codec, files: Vec<RecordFile>, records: u64) -> Self {
        ChannelOutput { codec, files, records, file_records: Vec::new() }
    }

    pub fn with_file_records(codec: Codec, files: Vec<RecordFile>, file_records: Vec<u64>) -> Self {
        ChannelOutput { codec, files, records: file_records.iter().sum(), file_records }
    }

    /// One map split per file.
    pub fn splits(&self) -> Vec<InputSplit> {
        self.files.iter().map(|f| InputSplit { files: vec![f.clone()] }).collect()
    }

    pub fn read_all(&self) -> Result<Vec<Record>, EngineError> {
        let mut out = Vec::with_capacity(self.records as usize);
        for f in &self.files {
            for r in f.reader()? {
                out.push(r?);
            }
        }
        Ok(out)
    }

    pub fn remove_files(&self) -> Result<(), EngineError> {
        for f in &self.files {
            match fs::remove_file(&f.path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(EngineError::io(&f.path, e)),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub channels: BTreeMap<String, ChannelOutput>,
    pub counters: TaskCounters,
}

impl StageOutput {
    pub fn channel(&self, name: &str) -> Result<&ChannelOutput, EngineError> {
        self.channels
            .get(name)
            .ok_or_else(|| EngineError::Config(format!("stage {:?} has no channel {name:?}", self.counters.stage)))
    }
}

pub struct Engine {
    config: EngineConfig,
    job_dir: PathBuf,
    _guard: Option<tempfile::TempDir>,
    stage_seq: AtomicU64,
    active: AtomicUsize,
    peak: AtomicUsize,
}

struct TaskResult {
    channels: BTreeMap<String, (RecordFile, u64)>,
    shuffle_runs: Vec<Vec<RecordFile>>,
    read: ByteCount,
    records_read: u64,
    written: ByteCount,
    records_written: u64,
    failed_attempts: u64,
    distinct_keys: u64,
    spill_bytes: u64,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        if config.workers == 0 {
            return Err(EngineError::Config("workers must be at least 1".into()));
        }
        config.faults.validate().map_err(EngineError::Config)?;
        let root = config.resolved_scratch_root();
        fs::create_dir_all(&root).map_err(|e| EngineError::io(&root, e))?;
        let dir = tempfile::Builder::new().prefix("tsqr-job-").tempdir_in(&root).map_err(|e| EngineError::io(&root, e))?;
        let (job_dir, guard) = if config.keep_intermediates {
            (dir.keep(), None)
        } else {
            (dir.path().to_path_buf(), Some(dir))
        };
        log::debug!("job directory {}", job_dir.display());
        Ok(Engine {
            config,
            job_dir,
            _guard: guard,
            stage_seq: AtomicU64::new(0),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn job_dir(&self) -> &Path {
        &self.job_dir
    }

    /// Highest number of tasks observed running at once since the engine was created.
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Fresh directory under the job directory for caller-owned files.
    pub fn scratch_dir(&self, name: &str) -> Result<PathBuf, EngineError> {
        let seq = self.stage_seq.fetch_add(1, Ordering::SeqCst);
        let dir = self.job_dir.join(format!("{seq:04}-{name}"));
        fs::create_dir_all(&dir).map_err(|e| EngineError::io(&dir, e))?;
        Ok(dir)
    }

    pub fn run_stage(&self, spec: &StageSpec, input: &StageInput) -> Result<StageOutput, EngineError> {
        spec.validate()?;
        let seq = self.stage_seq.fetch_add(1, Ordering::SeqCst);
        let stage_dir = self.job_dir.join(format!("{seq:04}-{}", spec.name));
        fs::create_dir_all(&stage_dir).map_err(|e| EngineError::io(&stage_dir, e))?;

        let mut broadcast = BTreeMap::new();
        let mut broadcast_bytes = ByteCount::default();
        let mut broadcast_records = 0;
        for name in &spec.broadcast {
            let ch = input
                .broadcast
                .get(name)
                .ok_or_else(|| EngineError::Config(format!("stage {:?}: broadcast channel {name:?} not supplied", spec.name)))?;
            let mut recs = Vec::new();
            for f in &ch.files {
                let mut rd = f.reader()?;
                for r in rd.by_ref() {
                    recs.push(r?);
                }
                broadcast_bytes.add(rd.counts());
                broadcast_records += rd.records();
            }
            broadcast.insert(name.clone(), recs);
        }
        let broadcast = Arc::new(broadcast);

        let mut counters = TaskCounters { stage: spec.name.clone(), ..Default::default() };
        let num_maps = input.splits.len();
        let map_results = self.run_pool(num_maps, |i| {
            let task = TaskId { phase: Phase::Map, index: i };
            self.run_task(spec, seq, task, num_maps, &stage_dir, |ctx, dir| {
                let mut ctx = ctx;
                ctx.broadcast = Arc::clone(&broadcast);
                self.map_attempt(spec, &ctx, dir, &input.splits[i])
            })
        })?;

        let mut channels: BTreeMap<String, ChannelOutput> = BTreeMap::new();
        for c in spec.channels() {
            channels.insert(c.name.clone(), ChannelOutput::new(c.codec, Vec::new(), 0));
        }
        counters.map.tasks = num_maps as u64;
        for r in &map_results {
            let mut read = r.read;
            read.add(broadcast_bytes);
            counters.map.absorb(read, r.written, r.records_read + broadcast_records, r.records_written);
            counters.failed_attempts += r.failed_attempts;
        }
        append_channels(&mut channels, &map_results);

        if spec.reduce.is_some() {
            let nred = spec.num_reducers;
            let runs: Vec<Vec<RecordFile>> = (0..nred)
                .map(|p| map_results.iter().flat_map(|r| r.shuffle_runs[p].iter().cloned()).collect())
                .collect();
            let reduce_results = self.run_pool(nred, |p| {
                let task = TaskId { phase: Phase::Reduce, index: p };
                self.run_task(spec, seq, task, nred, &stage_dir, |ctx, dir| self.reduce_attempt(spec, &ctx, dir, &runs[p]))
            })?;
            counters.reduce.tasks = nred as u64;
            for r in &reduce_results {
                counters.reduce.absorb(r.read, r.written, r.records_read, r.records_written);
                counters.failed_attempts += r.failed_attempts;
                counters.distinct_reduce_keys += r.distinct_keys;
                counters.spill_bytes += r.spill_bytes;
            }
            append_channels(&mut channels, &reduce_results);
            if !self.config.keep_intermediates {
                for f in runs.iter().flatten() {
                    let _ = fs::remove_file(&f.path);
                }
            }
        }

        log::debug!(
            "stage {} ({}): {} map / {} reduce tasks, read {} B, wrote {} B",
            spec.name,
            seq,
            counters.map.tasks,
            counters.reduce.tasks,
            counters.total_read(),
            counters.total_written()
        );
        Ok(StageOutput { channels, counters })
    }

    /// Run `f(i)` for `i in 0..n` on at most `workers` threads; report the lowest-index error.
    fn run_pool<T: Send>(
        &self,
        n: usize,
        f: impl Fn(usize) -> Result<T, EngineError> + Sync,
    ) -> Result<Vec<T>, EngineError> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<T, EngineError>>>> = Mutex::new((0..n).map(|_| None).collect());
        let threads = self.config.workers.min(n);
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
                    self.peak.fetch_max(now, Ordering::SeqCst);
                    let r = f(i);
                    self.active.fetch_sub(1, Ordering::SeqCst);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every task slot is filled"))
            .collect()
    }

    /// Retry loop around one task: fault draws at task start, per-attempt directory, commit by rename.
    fn run_task(
        &self,
        spec: &StageSpec,
        seq: u64,
        task: TaskId,
        num_tasks: usize,
        stage_dir: &Path,
        attempt_fn: impl Fn(TaskContext, &Path) -> Result<TaskResult, EngineError>,
    ) -> Result<TaskResult, EngineError> {
        let faults = &self.config.faults;
        let attempts = faults.max_retries + 1;
        let final_dir = stage_dir.join(task.to_string());
        for attempt in 0..attempts {
            if faults.crashes(seq, task.phase == Phase::Reduce, task.index as u64, attempt) {
                log::debug!("stage {} {task} attempt {attempt}: injected crash", spec.name);
                continue;
            }
            let dir = stage_dir.join(format!("{task}.attempt-{attempt}"));
            fs::create_dir_all(&dir).map_err(|e| EngineError::io(&dir, e))?;
            let ctx = TaskContext {
                stage: spec.name.clone(),
                stage_seq: seq,
                task,
                num_tasks,
                attempt,
                broadcast: Arc::default(),
            };
            let mut res = attempt_fn(ctx, &dir)?;
            fs::rename(&dir, &final_dir).map_err(|e| EngineError::io(&final_dir, e))?;
            rebase(&mut res, &dir, &final_dir);
            res.failed_attempts = attempt as u64;
            return Ok(res);
        }
        Err(EngineError::RetriesExhausted { stage: spec.name.clone(), task, attempts })
    }

    fn map_attempt(&self, spec: &StageSpec, ctx: &TaskContext, dir: &Path, split: &InputSplit) -> Result<TaskResult, EngineError> {
        let main = match spec.reduce {
            Some(_) => MainSink::Shuffle(ShuffleWriter::new(dir, spec.num_reducers, self.config.shuffle_buffer_bytes)),
            None => MainSink::Channel(RecordWriter::create(dir.join(channel_file(&spec.output.name)), spec.output.codec)?),
        };
        let mut emitter = open_emitter(spec, Phase::Map, dir, main)?;

        let mut readers = Vec::with_capacity(split.files.len());
        for f in &split.files {
            readers.push(f.reader()?);
        }
        let mut stream = readers.iter_mut().flat_map(|r| r.by_ref());
        (spec.map)(ctx, &mut stream, &mut emitter).map_err(|source| task_failed(spec, ctx, source))?;
        // unread input still counts as read by this task
        for r in stream {
            r?;
        }
        let read = readers.iter().map(|r| r.counts()).sum();
        let records_read = readers.iter().map(|r| r.records()).sum();
        let mut res = close_emitter(spec, Phase::Map, dir, emitter)?;
        res.read = read;
        res.records_read = records_read;
        Ok(res)
    }

    fn reduce_attempt(&self, spec: &StageSpec, ctx: &TaskContext, dir: &Path, runs: &[RecordFile]) -> Result<TaskResult, EngineError> {
        let main = MainSink::Channel(RecordWriter::create(dir.join(channel_file(&spec.output.name)), spec.output.codec)?);
        let mut emitter = open_emitter(spec, Phase::Reduce, dir, main)?;
        let mut groups = Groups::open(runs, dir, self.config.group_memory_bytes)?;
        let reduce = spec.reduce.as_ref().expect("reduce stage");
        reduce(ctx, &mut groups, &mut emitter).map_err(|source| task_failed(spec, ctx, source))?;
        groups.drain()?;
        let (read, records_read) = groups.read_counts();
        let mut res = close_emitter(spec, Phase::Reduce, dir, emitter)?;
        res.read = read;
        res.records_read = records_read;
        res.distinct_keys = groups.distinct_keys();
        res.spill_bytes = groups.spill_bytes();
        Ok(res)
    }
}

fn task_failed(spec: &StageSpec, ctx: &TaskContext, source: TaskError) -> EngineError {
    // engine errors raised through the emitter keep their identity
    match source.downcast::<EngineError>() {
        Ok(e) if !matches!(*e, EngineError::TaskFailed { .. }) => *e,
        Ok(e) => EngineError::TaskFailed { stage: spec.name.clone(), task: ctx.task, source: e },
        Err(source) => EngineError::TaskFailed { stage: spec.name.clone(), task: ctx.task, source },
    }
}

fn channel_file(name: &str) -> String {
    format!("{name}.rec")
}

fn open_emitter(spec: &StageSpec, phase: Phase, dir: &Path, main: MainSink) -> Result<Emitter, EngineError> {
    let mut side = BTreeMap::new();
    for c in spec.side_channels.iter().filter(|c| c.phase == phase) {
        side.insert(c.name.clone(), RecordWriter::create(dir.join(channel_file(&c.name)), c.codec)?);
    }
    Ok(Emitter { main_name: spec.output.name.clone(), main, side })
}

fn close_emitter(spec: &StageSpec, phase: Phase, dir: &Path, emitter: Emitter) -> Result<TaskResult, EngineError> {
    let mut res = TaskResult {
        channels: BTreeMap::new(),
        shuffle_runs: Vec::new(),
        read: ByteCount::default(),
        records_read: 0,
        written: ByteCount::default(),
        records_written: 0,
        failed_attempts: 0,
        distinct_keys: 0,
        spill_bytes: 0,
    };
    match emitter.main {
        MainSink::Channel(w) => {
            let (bytes, n) = w.finish()?;
            res.written.add(bytes);
            res.records_written += n;
            res.channels.insert(spec.output.name.clone(), (RecordFile::new(dir.join(channel_file(&spec.output.name)), spec.output.codec), n));
        }
        MainSink::Shuffle(s) => {
            let out = s.finish()?;
            res.written.add(out.written);
            res.records_written += out.records;
            res.shuffle_runs = out.runs;
        }
    }
    for (name, w) in emitter.side {
        let (bytes, n) = w.finish()?;
        res.written.add(bytes);
        res.records_written += n;
        let codec = spec.side_channels.iter().find(|c| c.name == name && c.phase == phase).expect("declared").codec;
        res.channels.insert(name.clone(), (RecordFile::new(dir.join(channel_file(&name)), codec), n));
    }
    Ok(res)
}

fn rebase(res: &mut TaskResult, from: &Path, to: &Path) {
    let fix = |f: &mut RecordFile| {
        if let Ok(rel) = f.path.strip_prefix(from) {
            f.path = to.join(rel);
        }
    };
    for (f, _) in res.channels.values_mut() {
        fix(f);
    }
    for f in res.shuffle_runs.iter_mut().flatten() {
        fix(f);
    }
}

fn append_channels(channels: &mut BTreeMap<String, ChannelOutput>, results: &[TaskResult]) {
    for r in results {
        for (name, (file, n)) in &r.channels {
            let ch = channels.get_mut(name).expect("declared channel");
            ch.files.push(file.clone());
            ch.file_records.push(*n);
            ch.records += n;
        }
    }
}
