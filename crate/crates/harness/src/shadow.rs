//! Offline replay of recorded trials under another strategy. The recorded
//! user behavior is fixed; at each switch point the variant proposes a
//! mapping, and every time the user then drives a direction the variant's
//! mapping does not expose, the presses needed to reach it are counted and
//! fed back into the variant's own learning stores.

use lams_core::episode::derive_seed;
use lams_core::events::{Event, EventRecord, TrialStart};
use lams_core::gateway::{CompletionRequest, Gateway, Role};
use lams_core::grounding::{describe_world, PromptMode};
use lams_core::learning::{LearningStores, ManualSwitchEvent};
use lams_core::model::{apply_mode, cycle_distance, engaged_directions, ModeMapping, UserAction};
use lams_core::sim::{step, PauseDetector, WorldState};
use lams_core::switcher::{
    prepare_switch, resolve_switch, GroupedState, HeuristicPhaseTable, HeuristicState, LastExecuted, StrategyKind,
    FALLBACK_THRESHOLD,
};
use serde::{Deserialize, Serialize};

use crate::trial::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowTrial {
    pub run_id: String,
    pub trial_index: u32,
    pub recorded_strategy: StrategyKind,
    pub variant: StrategyKind,
    pub recorded_switches: u32,
    pub simulated_switches: u32,
    pub switch_points: u32,
}

struct Variant<'a> {
    kind: StrategyKind,
    gateway: Option<&'a dyn Gateway>,
    stores: LearningStores,
    calls: u64,
}

impl Variant<'_> {
    fn numeric(&self) -> bool {
        self.kind.prompt_mode() == Some(PromptMode::NumState)
    }

    fn predict(
        &mut self,
        start: &TrialStart,
        world: &WorldState,
        current: &ModeMapping,
        last: &LastExecuted,
        shuffle_seed: u64,
    ) -> Result<ModeMapping, HarnessError> {
        let gateway = self
            .gateway
            .ok_or_else(|| HarnessError::IncompleteLog("an LLM variant needs a gateway".into()))?;
        let p = prepare_switch(self.kind, world, start.task, &self.stores, self.calls, shuffle_seed)
            .expect("LLM variant has a prompt mode");
        self.calls += 1;
        let result = gateway.complete(&p.request);
        Ok(resolve_switch(&p, result, current, last, FALLBACK_THRESHOLD).mapping)
    }

    fn learn(&mut self, start: &TrialStart, world: &WorldState, event: ManualSwitchEvent) {
        if !self.kind.learns() {
            return;
        }
        let pose = describe_world(world, start.task, self.numeric());
        if self.stores.record_manual_switch(&event, pose).is_err() || !self.kind.synthesizes_rules() {
            return;
        }
        let seed = derive_seed(start.shuffle_seed ^ 0x5ad0, self.calls);
        self.calls += 1;
        if let (Some(g), Some(prompt)) = (self.gateway, self.stores.rule_gen_prompt(seed)) {
            if let Ok(r) = g.complete(&CompletionRequest::rule_gen(prompt)) {
                self.stores.apply_rule_response(&r.text);
            }
        }
    }
}

/// Replays the trials of one run in order. Variant stores carry across the
/// trials when the variant learns and the task stays the same.
pub fn shadow_replay(
    trials: &[Vec<EventRecord>],
    variant: StrategyKind,
    gateway: Option<&dyn Gateway>,
) -> Result<Vec<ShadowTrial>, HarnessError> {
    let mut out = Vec::new();
    let mut v: Option<Variant> = None;
    for records in trials {
        if records.is_empty() {
            continue;
        }
        let Some(Event::TrialStart(start)) = records.first().map(|r| &r.event) else {
            return Err(HarnessError::IncompleteLog("log does not start with trial_start".into()));
        };
        if !records.iter().any(|r| matches!(r.event, Event::TrialEnd { .. })) {
            return Err(HarnessError::IncompleteLog(format!(
                "trial {} of {} has no trial_end",
                start.trial_index, start.run_id
            )));
        }
        let fresh = v
            .as_ref()
            .is_none_or(|v| v.stores.task != start.task || !variant.learns());
        if fresh {
            v = Some(Variant {
                kind: variant,
                gateway,
                stores: LearningStores::new(start.task, format!("shadow-{}", start.run_id)),
                calls: 0,
            });
        }
        let v = v.as_mut().expect("set above");
        out.push(replay_one(records, start, v)?);
    }
    Ok(out)
}

fn replay_one(records: &[EventRecord], start: &TrialStart, v: &mut Variant) -> Result<ShadowTrial, HarnessError> {
    let recorded_llm = start.strategy.uses_llm();
    let end_tick = records.last().map(|r| r.tick).unwrap_or(0);
    let mut world = start.world.clone();
    let mut rec_mode = start.mode;
    let mut input = UserAction::ZERO;
    let mut recorded = 0u32;
    let mut simulated = 0u32;
    let mut points = 0u32;
    let mut own_last = LastExecuted::new();
    let mut pause = PauseDetector::new(start.clock.window()?);

    let mut grouped = (v.kind == StrategyKind::GroupedMapping).then(GroupedState::default);
    let mut heuristic =
        (v.kind == StrategyKind::Heuristic).then(|| HeuristicState::new(HeuristicPhaseTable::builtin(start.task)));
    let mut sim = match (&grouped, &heuristic) {
        (Some(g), _) => g.mapping(),
        (_, Some(h)) => h.current().mapping,
        _ => ModeMapping::default(),
    };
    // a synthetic switch point for logs that never asked a model
    let mut pending_point = (v.kind.uses_llm() && !recorded_llm).then_some(0u64);

    let mut i = 1;
    loop {
        while let Some(rec) = records.get(i).filter(|r| r.tick <= world.tick) {
            match &rec.event {
                Event::Input { lateral, longitudinal } => input = UserAction::new(*lateral, *longitudinal),
                Event::AutoSwitch(p) => rec_mode = p.mapping,
                Event::ManualSwitch { slot, new, .. } => {
                    rec_mode.set(*slot, *new).expect("logged switch is valid");
                    recorded += 1;
                    pause.reset();
                }
                Event::GroupedCycle { mapping, .. } => {
                    rec_mode = *mapping;
                    recorded += 1;
                    pause.reset();
                }
                Event::LlmRequest {
                    role: Role::ModeSwitch,
                    shuffle_seed,
                    world: snapshot,
                    last_executed,
                    ..
                } if recorded_llm && v.kind.uses_llm() => {
                    points += 1;
                    sim = v.predict(start, snapshot, &sim, last_executed, *shuffle_seed)?;
                }
                _ => {}
            }
            i += 1;
        }
        if pending_point == Some(world.tick) {
            pending_point = None;
            points += 1;
            let seed = derive_seed(start.shuffle_seed, points as u64);
            sim = v.predict(start, &world, &sim, &own_last, seed)?;
            own_last.clear();
        }
        if world.tick >= end_tick {
            break;
        }

        for (slot, d, _) in engaged_directions(&rec_mode, &input) {
            own_last.insert(slot, d);
            if sim.get(slot) == Some(d) {
                continue;
            }
            let presses = match grouped.as_mut() {
                Some(g) => {
                    let k = g.presses_to(d).expect("every direction is in some group") as u32;
                    for _ in 0..k {
                        g.cycle();
                    }
                    sim = g.mapping();
                    k
                }
                None => {
                    let old = sim.get(slot);
                    let k = cycle_distance(old, d) as u32;
                    sim.set(slot, d).expect("engaged direction belongs to its slot");
                    v.learn(
                        start,
                        &world,
                        ManualSwitchEvent {
                            tick: world.tick,
                            slot,
                            old,
                            new: d,
                            press_count: k,
                        },
                    );
                    k
                }
            };
            simulated += presses;
        }

        let a_r = apply_mode(&rec_mode, &input, &start.velocity);
        world = step(&world, &a_r, &start.sim);
        if let Some(h) = heuristic.as_mut() {
            if let Some(p) = h.step(&world) {
                sim = p.mapping;
            }
        }
        if pause.observe(&input) && v.kind.uses_llm() && !recorded_llm {
            pending_point = Some(world.tick);
        }
    }
    Ok(ShadowTrial {
        run_id: start.run_id.clone(),
        trial_index: start.trial_index,
        recorded_strategy: start.strategy,
        variant: v.kind,
        recorded_switches: recorded,
        simulated_switches: simulated,
        switch_points: points,
    })
}
