//! One trial: the tick loop, manual and automatic switches, correction
//! capture and the asynchronous LLM call protocol. Drivers (the batch
//! harness and the HTTP service) feed inputs and complete calls.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EndReason, Event, EventLog, EventRecord, TrialStart};
use crate::gateway::{CompletionRequest, CompletionResult, Gateway, GatewayError, Role};
use crate::grounding::{describe_world, PromptMode};
use crate::learning::{Debouncer, LearningStores, PendingCorrection};
use crate::model::{
    apply_mode, engaged_directions, label_of, ActionDirection, DirectionGroup, ModeMapping, UserAction,
    VelocityProfile,
};
use crate::sim::{
    initial_world, step, GripperState, ObjectKind, SessionClock, SimConfig, SimError, StageTracker, TaskKind,
    TaskSpec, WorldState,
};
use crate::switcher::{
    prepare_switch, resolve_switch, GroupedState, HeuristicPhaseTable, HeuristicState, LastExecuted,
    PreparedSwitch, ProvenanceRecord, StrategyKind, SwitchSource, FALLBACK_THRESHOLD,
};

pub const DEFAULT_DEBOUNCE_TICKS: u64 = 20;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("trial has ended")]
    Finished,
    #[error("{op} is not available for strategy {strategy}")]
    WrongStrategy { op: &'static str, strategy: StrategyKind },
    #[error("no call {0} in flight")]
    NoSuchCall(u64),
    #[error("learning stores belong to {stores}, trial runs {trial}")]
    TaskMismatch { stores: TaskKind, trial: TaskKind },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub task: TaskKind,
    pub strategy: StrategyKind,
    pub run_id: String,
    pub trial_index: u32,
    pub layout_seed: u64,
    /// Base for per-call prompt shuffle seeds.
    pub shuffle_seed: u64,
    pub velocity: VelocityProfile,
    pub sim: SimConfig,
    pub clock: SessionClock,
    pub threshold: f64,
    pub debounce_ticks: u64,
    /// Ends the trial with [`EndReason::Timeout`] at this tick.
    pub max_ticks: Option<u64>,
}

impl EpisodeConfig {
    pub fn new(task: TaskKind, strategy: StrategyKind) -> Self {
        Self {
            task,
            strategy,
            run_id: "default".into(),
            trial_index: 0,
            layout_seed: 0,
            shuffle_seed: 0,
            velocity: VelocityProfile::default(),
            sim: SimConfig::default(),
            clock: SessionClock::default(),
            threshold: FALLBACK_THRESHOLD,
            debounce_ticks: DEFAULT_DEBOUNCE_TICKS,
            max_ticks: None,
        }
    }
}

/// Seed for the `index`-th call of a trial (splitmix64 over the base).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Highlight {
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotView {
    pub slot: DirectionGroup,
    pub direction: Option<ActionDirection>,
    /// e.g. "B: Move up"; empty for an unmapped slot
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highlight: Option<Highlight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageView {
    pub reached: usize,
    pub total: usize,
    /// Next stage to reach; `None` once complete.
    pub next: Option<String>,
}

/// Snapshot pushed to display clients after every tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub tick: u64,
    pub time_s: f64,
    pub task: TaskKind,
    pub strategy: StrategyKind,
    pub slots: Vec<SlotView>,
    pub world: WorldState,
    pub gripper: GripperState,
    pub held_object: Option<ObjectKind>,
    pub stage: StageView,
    pub manual_switch_count: u32,
    pub llm_pending: bool,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouped_group: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heuristic_phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended: Option<EndReason>,
    /// Records logged before this frame. Replaying that prefix up to `tick`
    /// reproduces the frame.
    pub log_len: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleGenCall {
    pub call_index: u64,
    pub shuffle_seed: u64,
    pub request: CompletionRequest,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickReport {
    pub stages: Vec<usize>,
    pub pause: bool,
    pub ended: Option<EndReason>,
}

#[derive(Debug)]
struct InFlight {
    prepared: PreparedSwitch,
    manual_slots: BTreeSet<DirectionGroup>,
}

#[derive(Debug)]
pub struct Episode {
    cfg: EpisodeConfig,
    spec: TaskSpec,
    world: WorldState,
    mode: ModeMapping,
    last_executed: LastExecuted,
    pause: crate::sim::PauseDetector,
    debouncer: Debouncer,
    grouped: Option<GroupedState>,
    heuristic: Option<HeuristicState>,
    stores: LearningStores,
    switch_due: bool,
    in_flight: Option<InFlight>,
    rulegen_due: bool,
    rulegen_in_flight: Option<u64>,
    calls: u64,
    manual_count: u32,
    degraded: bool,
    tracker: StageTracker,
    log: EventLog,
    input: UserAction,
    highlights: BTreeMap<DirectionGroup, Highlight>,
    ended: Option<EndReason>,
    last_provenance: Option<ProvenanceRecord>,
}

impl Episode {
    /// Starts a trial. LLM strategies begin with a switch request pending.
    pub fn new(
        cfg: EpisodeConfig,
        stores: LearningStores,
        sink: Option<Box<dyn Write + Send>>,
    ) -> Result<Self, EpisodeError> {
        if stores.task != cfg.task {
            return Err(EpisodeError::TaskMismatch {
                stores: stores.task,
                trial: cfg.task,
            });
        }
        let window = cfg.clock.window()?;
        let world = initial_world(cfg.task, cfg.layout_seed);
        let grouped = (cfg.strategy == StrategyKind::GroupedMapping).then(GroupedState::default);
        let heuristic = (cfg.strategy == StrategyKind::Heuristic)
            .then(|| HeuristicState::new(HeuristicPhaseTable::builtin(cfg.task)));
        let mode = match (&grouped, &heuristic) {
            (Some(g), _) => g.mapping(),
            (_, Some(h)) => h.current().mapping,
            _ => ModeMapping::default(),
        };
        let mut log = EventLog::new(cfg.clock.tick_duration, sink);
        log.push(
            0,
            Event::TrialStart(Box::new(TrialStart {
                task: cfg.task,
                strategy: cfg.strategy,
                run_id: cfg.run_id.clone(),
                trial_index: cfg.trial_index,
                layout_seed: cfg.layout_seed,
                shuffle_seed: cfg.shuffle_seed,
                velocity: cfg.velocity,
                sim: cfg.sim,
                clock: cfg.clock,
                world: world.clone(),
                mode,
            })),
        );
        Ok(Self {
            spec: TaskSpec::new(cfg.task),
            world,
            mode,
            last_executed: LastExecuted::new(),
            pause: crate::sim::PauseDetector::new(window),
            debouncer: Debouncer::new(cfg.debounce_ticks),
            grouped,
            heuristic,
            stores,
            switch_due: cfg.strategy.uses_llm(),
            in_flight: None,
            rulegen_due: false,
            rulegen_in_flight: None,
            calls: 0,
            manual_count: 0,
            degraded: false,
            tracker: StageTracker::default(),
            log,
            input: UserAction::ZERO,
            highlights: BTreeMap::new(),
            ended: None,
            last_provenance: None,
            cfg,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn mode(&self) -> &ModeMapping {
        &self.mode
    }

    pub fn stores(&self) -> &LearningStores {
        &self.stores
    }

    pub fn into_parts(self) -> (LearningStores, EventLog) {
        (self.stores, self.log)
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn records(&self) -> &[EventRecord] {
        self.log.records()
    }

    pub fn manual_switch_count(&self) -> u32 {
        self.manual_count
    }

    pub fn stages_reached(&self) -> usize {
        self.tracker.reached
    }

    pub fn ended(&self) -> Option<EndReason> {
        self.ended
    }

    pub fn degraded(&self) -> bool {
        self.degraded
    }

    pub fn grouped_state(&self) -> Option<GroupedState> {
        self.grouped
    }

    pub fn last_executed(&self) -> &LastExecuted {
        &self.last_executed
    }

    pub fn last_provenance(&self) -> Option<&ProvenanceRecord> {
        self.last_provenance.as_ref()
    }

    pub fn switch_in_flight(&self) -> bool {
        self.in_flight.is_some()
    }

    fn ensure_running(&self) -> Result<(), EpisodeError> {
        match self.ended {
            Some(_) => Err(EpisodeError::Finished),
            None => Ok(()),
        }
    }

    fn numeric_pose(&self) -> bool {
        self.cfg.strategy.prompt_mode() == Some(PromptMode::NumState)
    }

    fn next_call(&mut self) -> (u64, u64) {
        let index = self.calls;
        self.calls += 1;
        (index, derive_seed(self.cfg.shuffle_seed, index))
    }

    /// Takes the due mode-switch call, if any. The driver must answer it
    /// with [`Episode::complete_switch`].
    pub fn take_switch_request(&mut self) -> Option<PreparedSwitch> {
        if !self.switch_due || self.in_flight.is_some() || self.ended.is_some() {
            return None;
        }
        self.switch_due = false;
        let (index, seed) = self.next_call();
        let prepared = prepare_switch(self.cfg.strategy, &self.world, self.cfg.task, &self.stores, index, seed)?;
        self.log.push(
            self.world.tick,
            Event::LlmRequest {
                call_index: index,
                role: Role::ModeSwitch,
                shuffle_seed: seed,
                prompt: prepared.request.prompt.clone(),
                world: Box::new(self.world.clone()),
                last_executed: self.last_executed.clone(),
            },
        );
        self.in_flight = Some(InFlight {
            prepared: prepared.clone(),
            manual_slots: BTreeSet::new(),
        });
        Some(prepared)
    }

    /// Applies a mode-switch result. Slots the user changed while the call
    /// was in flight keep the user's choice.
    pub fn complete_switch(
        &mut self,
        call_index: u64,
        result: Result<CompletionResult, GatewayError>,
    ) -> Result<&ProvenanceRecord, EpisodeError> {
        match &self.in_flight {
            Some(f) if f.prepared.call_index == call_index => {}
            _ => return Err(EpisodeError::NoSuchCall(call_index)),
        }
        let flight = self.in_flight.take().expect("checked");
        if self.ended.is_some() {
            return Err(EpisodeError::Finished);
        }
        self.log.push(
            self.world.tick,
            Event::LlmResponse {
                call_index,
                role: Role::ModeSwitch,
                completion: result.as_ref().ok().cloned(),
                error: result.as_ref().err().map(|e| e.to_string()),
                rules_added: Vec::new(),
            },
        );
        let mut record = resolve_switch(&flight.prepared, result, &self.mode, &self.last_executed, self.cfg.threshold);
        for slot in &flight.manual_slots {
            if let Some(d) = self.mode.get(*slot) {
                record.mapping.set(*slot, d).expect("current slot content is valid");
                record.kept_manual.push(*slot);
            }
        }
        record.changed = record.mapping.changed_slots(&self.mode);
        if let Some(e) = &record.error {
            self.log.push(self.world.tick, Event::Error { message: format!("mode switch failed: {e}") });
        }
        self.degraded = record.degraded;
        self.apply_auto(record);
        self.last_executed.clear();
        Ok(self.last_provenance.as_ref().expect("just set"))
    }

    fn apply_auto(&mut self, record: ProvenanceRecord) {
        for slot in &record.changed {
            self.highlights.insert(*slot, Highlight::Auto);
        }
        self.mode = record.mapping;
        let mut logged = record.clone();
        // the prompt text is already in the matching llm_request
        logged.prompt = None;
        self.log.push(self.world.tick, Event::AutoSwitch(Box::new(logged)));
        self.last_provenance = Some(record);
    }

    pub fn take_rulegen_request(&mut self) -> Option<RuleGenCall> {
        if !self.rulegen_due || self.rulegen_in_flight.is_some() {
            return None;
        }
        self.rulegen_due = false;
        let (index, seed) = self.next_call();
        let prompt = self.stores.rule_gen_prompt(seed)?;
        self.log.push(
            self.world.tick,
            Event::LlmRequest {
                call_index: index,
                role: Role::RuleGen,
                shuffle_seed: seed,
                prompt: prompt.clone(),
                world: Box::new(self.world.clone()),
                last_executed: self.last_executed.clone(),
            },
        );
        self.rulegen_in_flight = Some(index);
        Some(RuleGenCall {
            call_index: index,
            shuffle_seed: seed,
            request: CompletionRequest::rule_gen(prompt),
        })
    }

    /// Appends the synthesized rules. Accepted after the trial has ended so
    /// that late results still reach the stores. Returns the count added.
    pub fn complete_rulegen(
        &mut self,
        call_index: u64,
        result: Result<CompletionResult, GatewayError>,
    ) -> Result<usize, EpisodeError> {
        if self.rulegen_in_flight != Some(call_index) {
            return Err(EpisodeError::NoSuchCall(call_index));
        }
        self.rulegen_in_flight = None;
        let (added, error) = match &result {
            Ok(c) => {
                let n = self.stores.apply_rule_response(&c.text);
                let start = self.stores.rules.len() - n;
                (self.stores.rules[start..].iter().map(|r| r.text.clone()).collect::<Vec<_>>(), None)
            }
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        let n = added.len();
        self.log.push(
            self.world.tick,
            Event::LlmResponse {
                call_index,
                role: Role::RuleGen,
                completion: result.ok(),
                error: error.clone(),
                rules_added: added,
            },
        );
        if let Some(e) = error {
            self.log.push(self.world.tick, Event::Error { message: format!("rule generation failed: {e}") });
        }
        Ok(n)
    }

    /// Answers every due call synchronously.
    pub fn run_pending_calls(&mut self, gateway: &dyn Gateway) {
        loop {
            if let Some(p) = self.take_switch_request() {
                let r = gateway.complete(&p.request);
                self.complete_switch(p.call_index, r).ok();
            } else if let Some(c) = self.take_rulegen_request() {
                let r = gateway.complete(&c.request);
                self.complete_rulegen(c.call_index, r).expect("call is in flight");
            } else {
                break;
            }
        }
    }

    fn settle(&mut self, pc: PendingCorrection) {
        if !pc.changed() || !self.cfg.strategy.learns() {
            return;
        }
        let event = pc.event();
        if self.stores.record_manual_switch(&event, pc.pose).is_ok() {
            self.log.push(
                self.world.tick,
                Event::Example {
                    slot: event.slot,
                    original: event.old,
                    direction: event.new,
                    presses: event.press_count,
                    first_tick: event.tick,
                },
            );
            if self.cfg.strategy.synthesizes_rules() {
                self.rulegen_due = true;
            }
        }
    }

    /// One D-pad press: advances `slot` to the next direction of its group.
    pub fn manual_switch(&mut self, slot: DirectionGroup) -> Result<ActionDirection, EpisodeError> {
        self.ensure_running()?;
        if self.grouped.is_some() {
            return Err(EpisodeError::WrongStrategy {
                op: "manual switch",
                strategy: self.cfg.strategy,
            });
        }
        let old = self.mode.get(slot);
        let new = self.mode.cycle(slot);
        self.manual_count += 1;
        self.highlights.insert(slot, Highlight::Manual);
        self.pause.reset();
        if let Some(f) = self.in_flight.as_mut() {
            f.manual_slots.insert(slot);
        }
        self.log.push(self.world.tick, Event::ManualSwitch { slot, old, new });
        let (world, task, numeric) = (&self.world, self.cfg.task, self.numeric_pose());
        if let Some(pc) = self
            .debouncer
            .press(world.tick, slot, old, new, || describe_world(world, task, numeric))
        {
            self.settle(pc);
        }
        Ok(new)
    }

    /// Grouped-mapping baseline: one press of the cycle button.
    pub fn grouped_cycle(&mut self) -> Result<ModeMapping, EpisodeError> {
        self.ensure_running()?;
        let Some(g) = self.grouped.as_mut() else {
            return Err(EpisodeError::WrongStrategy {
                op: "grouped cycle",
                strategy: self.cfg.strategy,
            });
        };
        let from = g.group;
        let mapping = g.cycle();
        let to = g.group;
        for slot in mapping.changed_slots(&self.mode) {
            self.highlights.insert(slot, Highlight::Manual);
        }
        self.mode = mapping;
        self.manual_count += 1;
        self.pause.reset();
        self.log.push(self.world.tick, Event::GroupedCycle { from, to, mapping });
        Ok(mapping)
    }

    /// Advances the world by one tick under `input`.
    pub fn tick(&mut self, input: UserAction) -> Result<TickReport, EpisodeError> {
        self.ensure_running()?;
        let mut report = TickReport::default();
        if input != self.input {
            self.log.push(
                self.world.tick,
                Event::Input {
                    lateral: input.lateral,
                    longitudinal: input.longitudinal,
                },
            );
            self.input = input;
        }
        if let Some(pc) = self.debouncer.tick(self.world.tick, !input.is_zero()) {
            self.settle(pc);
        }
        for (g, d, _) in engaged_directions(&self.mode, &input) {
            self.last_executed.insert(g, d);
        }
        let a_r = apply_mode(&self.mode, &input, &self.cfg.velocity);
        self.world = step(&self.world, &a_r, &self.cfg.sim);

        report.stages = self.tracker.update(&self.world, &self.spec);
        for &i in &report.stages {
            self.log.push(
                self.world.tick,
                Event::Stage {
                    index: i,
                    name: self.spec.stages[i].name.to_string(),
                },
            );
        }

        if let Some(h) = self.heuristic.as_mut() {
            if let Some(phase) = h.step(&self.world) {
                let phase = phase.clone();
                let record = ProvenanceRecord {
                    strategy: self.cfg.strategy,
                    source: SwitchSource::Heuristic,
                    call_index: 0,
                    shuffle_seed: None,
                    prompt: None,
                    completion: None,
                    distributions: None,
                    last_executed: self.last_executed.clone(),
                    previous: self.mode,
                    mapping: phase.mapping,
                    changed: phase.mapping.changed_slots(&self.mode),
                    kept_manual: Vec::new(),
                    degraded: false,
                    error: None,
                    phase: Some(phase.name),
                };
                self.apply_auto(record);
                self.last_executed.clear();
            }
        }

        report.pause = self.pause.observe(&input);
        if report.pause && self.cfg.strategy.uses_llm() && self.in_flight.is_none() {
            self.switch_due = true;
        }

        if self.tracker.completed(&self.spec) {
            self.finish(EndReason::Completed);
        } else if self.cfg.max_ticks.is_some_and(|m| self.world.tick >= m) {
            self.finish(EndReason::Timeout);
        }
        report.ended = self.ended;
        Ok(report)
    }

    /// Ends the trial. A pending correction is settled so it still counts as
    /// an example. Idempotent.
    pub fn finish(&mut self, reason: EndReason) {
        if self.ended.is_some() {
            return;
        }
        if let Some(pc) = self.debouncer.flush() {
            self.settle(pc);
        }
        self.ended = Some(reason);
        self.switch_due = false;
        self.log.push(
            self.world.tick,
            Event::TrialEnd {
                reason,
                manual_switch_count: self.manual_count,
                stages_reached: self.tracker.reached,
            },
        );
    }

    /// Current display snapshot; highlight markers are reported once.
    pub fn frame(&mut self) -> StateFrame {
        let highlights = std::mem::take(&mut self.highlights);
        self.peek_frame_with(highlights)
    }

    /// Snapshot without consuming highlight markers.
    pub fn peek_frame(&self) -> StateFrame {
        self.peek_frame_with(self.highlights.clone())
    }

    fn peek_frame_with(&self, highlights: BTreeMap<DirectionGroup, Highlight>) -> StateFrame {
        let slots = self
            .mode
            .slots()
            .into_iter()
            .map(|(slot, d)| SlotView {
                slot,
                direction: d,
                label: d
                    .map(|d| format!("{}: {}", label_of(d).letter.as_char(), d.display_name()))
                    .unwrap_or_default(),
                highlight: highlights.get(&slot).copied(),
            })
            .collect();
        let total = self.spec.stages.len();
        StateFrame {
            tick: self.world.tick,
            time_s: self.world.tick as f64 * self.cfg.clock.tick_duration,
            task: self.cfg.task,
            strategy: self.cfg.strategy,
            slots,
            world: self.world.clone(),
            gripper: self.world.gripper_state(),
            held_object: self.world.held_object().map(|o| o.kind),
            stage: StageView {
                reached: self.tracker.reached,
                total,
                next: self.spec.stages.get(self.tracker.reached).map(|s| s.name.to_string()),
            },
            manual_switch_count: self.manual_count,
            llm_pending: self.in_flight.is_some(),
            degraded: self.degraded,
            grouped_group: self.grouped.map(|g| g.group),
            heuristic_phase: self.heuristic.as_ref().map(|h| h.current().name.clone()),
            ended: self.ended,
            log_len: self.log.records().len() as u64,
        }
    }
}
