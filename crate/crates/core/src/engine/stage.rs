use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::record::{Codec, Record, RecordWriter};
use super::shuffle::{Groups, ShuffleWriter};
use super::{EngineError, TaskError};

/// Which side of a stage a task runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Map,
    Reduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskId {
    pub phase: Phase,
    pub index: usize,
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.phase {
            Phase::Map => write!(f, "map-{}", self.index),
            Phase::Reduce => write!(f, "reduce-{}", self.index),
        }
    }
}

pub type RecordStream<'a> = dyn Iterator<Item = Result<Record, EngineError>> + 'a;

pub type MapFn = Arc<dyn Fn(&TaskContext, &mut RecordStream<'_>, &mut Emitter) -> Result<(), TaskError> + Send + Sync>;

pub type ReduceFn = Arc<dyn Fn(&TaskContext, &mut Groups, &mut Emitter) -> Result<(), TaskError> + Send + Sync>;

/// A named output stream of a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub name: String,
    pub codec: Codec,
    /// Tasks of this phase write the channel.
    pub phase: Phase,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, codec: Codec) -> Self {
        ChannelSpec { name: name.into(), codec, phase: Phase::Map }
    }

    pub fn written_by(mut self, phase: Phase) -> Self {
        self.phase = phase;
        self
    }
}

/// One map (and optional shuffle + reduce) round.
#[derive(Clone)]
pub struct StageSpec {
    pub name: String,
    /// Channel consumed by the map tasks when run inside a pipeline.
    pub input: String,
    pub map: MapFn,
    pub reduce: Option<ReduceFn>,
    pub num_reducers: usize,
    /// Main output: written by reducers if there is a reduce, else by mappers.
    pub output: ChannelSpec,
    pub side_channels: Vec<ChannelSpec>,
    /// Channels delivered read-only to every map task.
    pub broadcast: Vec<String>,
}

impl fmt::Debug for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageSpec")
            .field("name", &self.name)
            .field("input", &self.input)
            .field("reduce", &self.reduce.is_some())
            .field("num_reducers", &self.num_reducers)
            .field("output", &self.output)
            .field("side_channels", &self.side_channels)
            .field("broadcast", &self.broadcast)
            .finish()
    }
}

pub const PIPELINE_INPUT: &str = "input";

impl StageSpec {
    pub fn map_only<F>(name: impl Into<String>, map: F) -> Self
    where
        F: Fn(&TaskContext, &mut RecordStream<'_>, &mut Emitter) -> Result<(), TaskError> + Send + Sync + 'static,
    {
        StageSpec {
            name: name.into(),
            input: PIPELINE_INPUT.to_string(),
            map: Arc::new(map),
            reduce: None,
            num_reducers: 0,
            output: ChannelSpec::new("out", Codec::Framed),
            side_channels: Vec::new(),
            broadcast: Vec::new(),
        }
    }

    pub fn with_reduce<F>(mut self, num_reducers: usize, reduce: F) -> Self
    where
        F: Fn(&TaskContext, &mut Groups, &mut Emitter) -> Result<(), TaskError> + Send + Sync + 'static,
    {
        self.reduce = Some(Arc::new(reduce));
        self.num_reducers = num_reducers;
        self.output.phase = Phase::Reduce;
        self
    }

    pub fn input(mut self, channel: impl Into<String>) -> Self {
        self.input = channel.into();
        self
    }

    pub fn output(mut self, name: impl Into<String>, codec: Codec) -> Self {
        let phase = if self.reduce.is_some() { Phase::Reduce } else { Phase::Map };
        self.output = ChannelSpec { name: name.into(), codec, phase };
        self
    }

    pub fn side_channel(mut self, channel: ChannelSpec) -> Self {
        self.side_channels.push(channel);
        self
    }

    pub fn broadcast(mut self, channel: impl Into<String>) -> Self {
        self.broadcast.push(channel.into());
        self
    }

    pub fn is_map_only(&self) -> bool {
        self.reduce.is_none()
    }

    /// Every channel this stage produces, main output first.
    pub fn channels(&self) -> impl Iterator<Item = &ChannelSpec> {
        std::iter::once(&self.output).chain(self.side_channels.iter())
    }

    pub(crate) fn validate(&self) -> Result<(), EngineError> {
        let cfg = |m: String| Err(EngineError::Config(format!("stage {:?}: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return cfg("stage names must be non-empty and free of path separators".into());
        }
        if self.reduce.is_some() && self.num_reducers == 0 {
            return cfg("a reduce stage needs at least one reducer".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in self.channels() {
            if !seen.insert(c.name.as_str()) {
                return cfg(format!("channel {:?} declared twice", c.name));
            }
            if c.phase == Phase::Reduce && self.reduce.is_none() {
                return cfg(format!("channel {:?} is written by reducers but the stage has no reduce", c.name));
            }
        }
        if self.reduce.is_some() && self.output.phase != Phase::Reduce {
            return cfg("the main output of a reduce stage is written by reducers".into());
        }
        Ok(())
    }
}

/// What a running task knows about itself.
pub struct TaskContext {
    pub stage: String,
    pub stage_seq: u64,
    pub task: TaskId,
    /// Number of tasks in this phase.
    pub num_tasks: usize,
    pub attempt: u32,
    pub(crate) broadcast: Arc<BTreeMap<String, Vec<Record>>>,
}

impl TaskContext {
    pub fn broadcast(&self, channel: &str) -> Result<&[Record], TaskError> {
        self.broadcast
            .get(channel)
            .map(Vec::as_slice)
            .ok_or_else(|| format!("no broadcast channel {channel:?} in stage {:?}", self.stage).into())
    }
}

pub(crate) enum MainSink {
    Channel(RecordWriter),
    Shuffle(ShuffleWriter),
}

/// Output handle passed to map and reduce functions.
pub struct Emitter {
    pub(crate) main_name: String,
    pub(crate) main: MainSink,
    pub(crate) side: BTreeMap<String, RecordWriter>,
}

impl Emitter {
    /// Emit to the main output (the shuffle, for map tasks of a reduce stage).
    pub fn emit(&mut self, key: &[u8], value: &[u8]) -> Result<(), EngineError> {
        match &mut self.main {
            MainSink::Channel(w) => w.write(key, value),
            MainSink::Shuffle(s) => s.push(key, value),
        }
    }

    pub fn emit_record(&mut self, record: &Record) -> Result<(), EngineError> {
        self.emit(&record.key, &record.value)
    }

    /// Emit to a named side channel. The main output can also be addressed by name.
    pub fn emit_to(&mut self, channel: &str, key: &[u8], value: &[u8]) -> Result<(), EngineError> {
        if channel == self.main_name {
            return self.emit(key, value);
        }
        match self.side.get_mut(channel) {
            Some(w) => w.write(key, value),
            None => Err(EngineError::Config(format!("channel {channel:?} is not declared for this phase"))),
        }
    }
}
