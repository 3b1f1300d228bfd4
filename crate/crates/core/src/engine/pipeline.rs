use std::collections::{BTreeMap, BTreeSet};

use super::{ChannelOutput, Engine, EngineError, InputSplit, StageInput, StageSpec, TaskCounters, PIPELINE_INPUT};

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Retained channels by name.
    pub channels: BTreeMap<String, ChannelOutput>,
    /// One entry per stage, in execution order.
    pub counters: Vec<TaskCounters>,
}

impl PipelineOutput {
    pub fn channel(&self, name: &str) -> Result<&ChannelOutput, EngineError> {
        self.channels.get(name).ok_or_else(|| EngineError::Config(format!("pipeline has no retained channel {name:?}")))
    }
}

impl Engine {
    /// Run `stages` in order, wiring each stage's input and broadcast channels by name.
    ///
    /// Stages reading the pipeline input get `input` as their map splits. Channels
    /// produced by the last stage are retained; everything else produced along the
    /// way is deleted unless intermediates are kept.
    pub fn run_pipeline(&self, stages: &[StageSpec], input: &[InputSplit]) -> Result<PipelineOutput, EngineError> {
        let last: Vec<String> = stages.last().map(|s| s.channels().map(|c| c.name.clone()).collect()).unwrap_or_default();
        let retain: Vec<&str> = last.iter().map(String::as_str).collect();
        self.run_pipeline_retaining(stages, input, &retain)
    }

    pub fn run_pipeline_retaining(
        &self,
        stages: &[StageSpec],
        input: &[InputSplit],
        retain: &[&str],
    ) -> Result<PipelineOutput, EngineError> {
        validate_pipeline(stages, retain)?;
        let mut live: BTreeMap<String, ChannelOutput> = BTreeMap::new();
        let input_files: Vec<_> = input.iter().flat_map(|s| s.files.iter().cloned()).collect();
        let codec = input_files.first().map(|f| f.codec).unwrap_or(super::Codec::Framed);
        live.insert(PIPELINE_INPUT.to_string(), ChannelOutput::new(codec, input_files, 0));
        let mut counters = Vec::with_capacity(stages.len());
        for spec in stages {
            let mut stage_input = if spec.input == PIPELINE_INPUT {
                StageInput { splits: input.to_vec(), broadcast: BTreeMap::new() }
            } else {
                StageInput::from_channel(&live[&spec.input])
            };
            for b in &spec.broadcast {
                stage_input.broadcast.insert(b.clone(), live[b].clone());
            }
            let out = self.run_stage(spec, &stage_input)?;
            counters.push(out.counters);
            live.extend(out.channels);
        }
        live.remove(PIPELINE_INPUT);
        let mut channels = BTreeMap::new();
        for (name, ch) in live {
            if retain.contains(&name.as_str()) {
                channels.insert(name, ch);
            } else if !self.config().keep_intermediates {
                ch.remove_files()?;
            }
        }
        Ok(PipelineOutput { channels, counters })
    }
}

fn validate_pipeline(stages: &[StageSpec], retain: &[&str]) -> Result<(), EngineError> {
    if stages.is_empty() {
        return Err(EngineError::Config("pipeline has no stages".into()));
    }
    let mut known: BTreeSet<&str> = BTreeSet::from([PIPELINE_INPUT]);
    for s in stages {
        s.validate()?;
        if !known.contains(s.input.as_str()) {
            return Err(EngineError::Config(format!("stage {:?} reads unknown channel {:?}", s.name, s.input)));
        }
        for b in &s.broadcast {
            if !known.contains(b.as_str()) {
                return Err(EngineError::Config(format!("stage {:?} broadcasts unknown channel {b:?}", s.name)));
            }
        }
        for c in s.channels() {
            if !known.insert(c.name.as_str()) {
                return Err(EngineError::Config(format!("channel {:?} produced twice in pipeline", c.name)));
            }
        }
    }
    for r in retain {
        if *r == PIPELINE_INPUT || !known.contains(r) {
            return Err(EngineError::Config(format!("cannot retain unknown channel {r:?}")));
        }
    }
    Ok(())
}
