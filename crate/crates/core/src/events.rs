//! Append-only JSONL event log and state reconstruction from it.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionResult, Role};
use crate::model::{apply_mode, ActionDirection, DirectionGroup, ModeMapping, UserAction, VelocityProfile};
use crate::sim::{step, SessionClock, SimConfig, TaskKind, WorldState};
use crate::switcher::{LastExecuted, ProvenanceRecord, StrategyKind};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported log version {0}")]
    Version(u32),
    #[error("log does not start with trial_start")]
    MissingStart,
    #[error("events out of order at seq {0}")]
    OutOfOrder(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStart {
    pub task: TaskKind,
    pub strategy: StrategyKind,
    pub run_id: String,
    pub trial_index: u32,
    pub layout_seed: u64,
    pub shuffle_seed: u64,
    pub velocity: VelocityProfile,
    pub sim: SimConfig,
    pub clock: SessionClock,
    pub world: WorldState,
    pub mode: ModeMapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Completed,
    Timeout,
    Stopped,
    /// The host went away mid-trial; written on recovery.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    TrialStart(Box<TrialStart>),
    Input {
        lateral: f64,
        longitudinal: f64,
    },
    AutoSwitch(Box<ProvenanceRecord>),
    ManualSwitch {
        slot: DirectionGroup,
        old: Option<ActionDirection>,
        new: ActionDirection,
    },
    GroupedCycle {
        from: u8,
        to: u8,
        mapping: ModeMapping,
    },
    LlmRequest {
        call_index: u64,
        role: Role,
        shuffle_seed: u64,
        prompt: String,
        world: Box<WorldState>,
        last_executed: LastExecuted,
    },
    LlmResponse {
        call_index: u64,
        role: Role,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        completion: Option<CompletionResult>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        rules_added: Vec<String>,
    },
    Stage {
        index: usize,
        name: String,
    },
    /// A settled manual correction appended to the example store.
    Example {
        slot: DirectionGroup,
        original: Option<ActionDirection>,
        direction: ActionDirection,
        presses: u32,
        first_tick: u64,
    },
    Error {
        message: String,
    },
    TrialEnd {
        reason: EndReason,
        manual_switch_count: u32,
        stages_reached: usize,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::TrialStart(_) => "trial_start",
            Event::Input { .. } => "input",
            Event::AutoSwitch(_) => "auto_switch",
            Event::ManualSwitch { .. } => "manual_switch",
            Event::GroupedCycle { .. } => "grouped_cycle",
            Event::LlmRequest { .. } => "llm_request",
            Event::LlmResponse { .. } => "llm_response",
            Event::Stage { .. } => "stage",
            Event::Example { .. } => "example",
            Event::Error { .. } => "error",
            Event::TrialEnd { .. } => "trial_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub v: u32,
    pub seq: u64,
    pub tick: u64,
    pub time_s: f64,
    #[serde(flatten)]
    pub event: Event,
}

/// In-memory log with an optional JSONL sink. A failing sink is dropped and
/// its error kept for the caller to collect.
pub struct EventLog {
    records: Vec<EventRecord>,
    sink: Option<Box<dyn Write + Send>>,
    sink_error: Option<io::Error>,
    tick_duration: f64,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("records", &self.records.len())
            .field("has_sink", &self.sink.is_some())
            .finish()
    }
}

impl EventLog {
    pub fn new(tick_duration: f64, sink: Option<Box<dyn Write + Send>>) -> Self {
        Self {
            records: Vec::new(),
            sink,
            sink_error: None,
            tick_duration,
        }
    }

    pub fn push(&mut self, tick: u64, event: Event) -> &EventRecord {
        let record = EventRecord {
            v: LOG_VERSION,
            seq: self.records.len() as u64,
            tick,
            time_s: tick as f64 * self.tick_duration,
            event,
        };
        if let Some(sink) = self.sink.as_mut() {
            let res = serde_json::to_writer(&mut *sink, &record)
                .map_err(io::Error::from)
                .and_then(|_| sink.write_all(b"\n"))
                .and_then(|_| sink.flush());
            if let Err(e) = res {
                tracing::error!(error = %e, "event sink failed; continuing in memory");
                self.sink = None;
                self.sink_error = Some(e);
            }
        }
        self.records.push(record);
        self.records.last().expect("just pushed")
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EventRecord> {
        self.records
    }

    pub fn take_sink_error(&mut self) -> Option<io::Error> {
        self.sink_error.take()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }
}

pub fn to_jsonl(records: &[EventRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("event serializes"));
        s.push('\n');
    }
    s
}

pub fn read_log(reader: impl BufRead) -> Result<Vec<EventRecord>, EventError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EventRecord = serde_json::from_str(&line).map_err(|source| EventError::Parse { line: i + 1, source })?;
        if r.v != LOG_VERSION {
            return Err(EventError::Version(r.v));
        }
        out.push(r);
    }
    Ok(out)
}

/// Session state rebuilt from a log.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub start: TrialStart,
    pub world: WorldState,
    pub mode: ModeMapping,
    pub input: UserAction,
    pub manual_switch_count: u32,
    pub stages_reached: usize,
    pub end: Option<EndReason>,
}

/// Replays inputs and mapping changes through the simulator. Events stamped
/// with tick `t` take effect before the motion step that leaves tick `t`.
/// With `until`, stops once the world reaches that tick, stepping past the
/// last record if needed; without it, stops at the last record's tick.
pub fn reconstruct(records: &[EventRecord], until: Option<u64>) -> Result<Replay, EventError> {
    let Some(Event::TrialStart(start)) = records.first().map(|r| &r.event) else {
        return Err(EventError::MissingStart);
    };
    let start = (**start).clone();
    let mut r = Replay {
        world: start.world.clone(),
        mode: start.mode,
        input: UserAction::ZERO,
        manual_switch_count: 0,
        stages_reached: 0,
        end: None,
        start,
    };
    let last_tick = records.last().map(|r| r.tick).unwrap_or(0);
    let target = until.unwrap_or(last_tick);
    let mut prev_seq = None;
    let mut idx = 1;
    loop {
        while let Some(rec) = records.get(idx).filter(|rec| rec.tick <= r.world.tick) {
            if prev_seq.is_some_and(|p| rec.seq <= p) || rec.tick < r.world.tick {
                return Err(EventError::OutOfOrder(rec.seq));
            }
            prev_seq = Some(rec.seq);
            apply(&mut r, &rec.event);
            idx += 1;
        }
        if r.world.tick >= target {
            break;
        }
        let a_r = apply_mode(&r.mode, &r.input, &r.start.velocity);
        r.world = step(&r.world, &a_r, &r.start.sim);
    }
    Ok(r)
}

fn apply(r: &mut Replay, event: &Event) {
    match event {
        Event::Input { lateral, longitudinal } => r.input = UserAction::new(*lateral, *longitudinal),
        Event::AutoSwitch(p) => r.mode = p.mapping,
        Event::ManualSwitch { slot, new, .. } => {
            r.mode.set(*slot, *new).expect("logged switch is valid");
            r.manual_switch_count += 1;
        }
        Event::GroupedCycle { mapping, .. } => {
            r.mode = *mapping;
            r.manual_switch_count += 1;
        }
        Event::Stage { index, .. } => r.stages_reached = r.stages_reached.max(index + 1),
        Event::TrialEnd { reason, .. } => r.end = Some(*reason),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::initial_world;

    fn start() -> Event {
        Event::TrialStart(Box::new(TrialStart {
            task: TaskKind::WaterPouring,
            strategy: StrategyKind::Lams,
            run_id: "r".into(),
            trial_index: 0,
            layout_seed: 4,
            shuffle_seed: 5,
            velocity: VelocityProfile::default(),
            sim: SimConfig::default(),
            clock: SessionClock::default(),
            world: initial_world(TaskKind::WaterPouring, 4),
            mode: ModeMapping::default(),
        }))
    }

    #[test]
    fn jsonl_round_trip() {
        let mut log = EventLog::new(0.1, None);
        log.push(0, start());
        log.push(0, Event::Input { lateral: 0.0, longitudinal: 1.0 });
        log.push(3, Event::ManualSwitch { slot: DirectionGroup::Up, old: Some(ActionDirection::MoveForward), new: ActionDirection::MoveUp });
        log.push(9, Event::TrialEnd { reason: EndReason::Stopped, manual_switch_count: 1, stages_reached: 0 });
        let text = log.to_jsonl();
        let first: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(first["kind"], "input");
        assert_eq!(first["v"], 1);
        assert_eq!(first["payload"]["longitudinal"], 1.0);
        let back = read_log(text.as_bytes()).unwrap();
        assert_eq!(back, log.records());
        assert!((back[2].time_s - 0.3).abs() < 1e-12);
    }

    #[test]
    fn replay_applies_events_before_motion() {
        let mut log = EventLog::new(0.1, None);
        log.push(0, start());
        log.push(0, Event::Input { lateral: 0.0, longitudinal: 1.0 });
        log.push(3, Event::ManualSwitch { slot: DirectionGroup::Up, old: Some(ActionDirection::MoveForward), new: ActionDirection::MoveUp });
        log.push(5, Event::Input { lateral: 0.0, longitudinal: 0.0 });
        log.push(8, Event::TrialEnd { reason: EndReason::Stopped, manual_switch_count: 1, stages_reached: 0 });
        let r = reconstruct(log.records(), None).unwrap();
        let w0 = initial_world(TaskKind::WaterPouring, 4);
        assert_eq!(r.world.tick, 8);
        // three ticks forward, two ticks up
        assert!((r.world.ee_pose.x - (w0.ee_pose.x + 0.03)).abs() < 1e-9);
        assert!((r.world.ee_pose.z - (w0.ee_pose.z + 0.02)).abs() < 1e-9);
        assert_eq!(r.manual_switch_count, 1);
        assert_eq!(r.end, Some(EndReason::Stopped));

        let mid = reconstruct(log.records(), Some(2)).unwrap();
        assert_eq!(mid.world.tick, 2);
        assert_eq!(mid.mode, ModeMapping::default());
    }

    #[test]
    fn replay_needs_start() {
        let mut log = EventLog::new(0.1, None);
        log.push(0, Event::Error { message: "x".into() });
        assert!(matches!(reconstruct(log.records(), None), Err(EventError::MissingStart)));
    }

    #[test]
    fn failing_sink_is_dropped() {
        struct Broken;
        impl Write for Broken {
            fn write(&mut self, _: &[u8]) -> io::Result<usize> {
                Err(io::Error::other("disk full"))
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let mut log = EventLog::new(0.1, Some(Box::new(Broken)));
        log.push(0, start());
        log.push(1, Event::Error { message: "x".into() });
        assert_eq!(log.records().len(), 2);
        assert!(log.take_sink_error().is_some());
    }
}
