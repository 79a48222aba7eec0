//! Trial metrics computed from an event log alone.

use std::collections::BTreeMap;

use lams_core::events::{EndReason, Event, EventRecord};
use lams_core::model::{Component, DirectionGroup, ModeMapping, UserAction};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u32,
    pub required: u32,
}

impl Tally {
    pub fn ratio(&self) -> Option<f64> {
        (self.required > 0).then(|| self.correct as f64 / self.required as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationTallies {
    pub pitch: Tally,
    pub roll: Tally,
    pub yaw: Tally,
}

impl RotationTallies {
    fn get_mut(&mut self, c: Component) -> Option<&mut Tally> {
        match c {
            Component::Pitch => Some(&mut self.pitch),
            Component::Roll => Some(&mut self.roll),
            Component::Yaw => Some(&mut self.yaw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub up: u32,
    pub down: u32,
    pub left: u32,
    pub right: u32,
    /// grouped-mapping cycle presses
    pub cycle: u32,
}

impl SlotCounts {
    pub fn total(&self) -> u32 {
        self.up + self.down + self.left + self.right + self.cycle
    }

    fn bump(&mut self, slot: DirectionGroup) {
        match slot {
            DirectionGroup::Up => self.up += 1,
            DirectionGroup::Down => self.down += 1,
            DirectionGroup::Left => self.left += 1,
            DirectionGroup::Right => self.right += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, Default)]
struct SlotState {
    origin: Option<Origin>,
    counted: bool,
    gripper_pending: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogMetrics {
    pub manual_switch_count: u32,
    pub per_slot: SlotCounts,
    pub false_gripper_mapping_count: u32,
    pub rotation: RotationTallies,
    pub stages_reached: usize,
    pub end: Option<EndReason>,
    pub completion_tick: Option<u64>,
    pub final_tick: u64,
}

/// Walks the log once. A slot counts as driven when, after the events of
/// some tick are applied, the held input engages it and a motion step follows.
pub fn log_metrics(records: &[EventRecord]) -> LogMetrics {
    let mut m = LogMetrics::default();
    let end_tick = records.last().map(|r| r.tick).unwrap_or(0);
    let mut mode = ModeMapping::default();
    let mut input = UserAction::ZERO;
    let mut slots: BTreeMap<DirectionGroup, SlotState> =
        DirectionGroup::ALL.iter().map(|g| (*g, SlotState::default())).collect();

    let mut i = 0;
    while i < records.len() {
        let tick = records[i].tick;
        while i < records.len() && records[i].tick == tick {
            match &records[i].event {
                Event::TrialStart(s) => mode = s.mode,
                Event::Input { lateral, longitudinal } => input = UserAction::new(*lateral, *longitudinal),
                Event::AutoSwitch(p) => {
                    mode = p.mapping;
                    for (slot, st) in slots.iter_mut() {
                        st.origin = Some(Origin::Auto);
                        st.counted = false;
                        st.gripper_pending = matches!(slot, DirectionGroup::Up | DirectionGroup::Down)
                            && mode.get(*slot).is_some_and(|d| d.is_gripper());
                    }
                }
                Event::ManualSwitch { slot, new, .. } => {
                    mode.set(*slot, *new).expect("logged switch is valid");
                    m.manual_switch_count += 1;
                    m.per_slot.bump(*slot);
                    let st = slots.get_mut(slot).expect("all slots present");
                    if st.gripper_pending {
                        m.false_gripper_mapping_count += 1;
                        st.gripper_pending = false;
                    }
                    st.origin = Some(Origin::Manual);
                    st.counted = false;
                }
                Event::GroupedCycle { mapping, .. } => {
                    mode = *mapping;
                    m.manual_switch_count += 1;
                    m.per_slot.cycle += 1;
                    for st in slots.values_mut() {
                        *st = SlotState {
                            origin: Some(Origin::Manual),
                            ..SlotState::default()
                        };
                    }
                }
                Event::Stage { index, .. } => {
                    m.stages_reached = m.stages_reached.max(index + 1);
                }
                Event::TrialEnd { reason, .. } => {
                    m.end = Some(*reason);
                    if *reason == EndReason::Completed {
                        m.completion_tick = Some(records[i].tick);
                    }
                }
                _ => {}
            }
            i += 1;
        }
        if tick < end_tick {
            for (slot, _) in input.engaged_slots() {
                let st = slots.get_mut(&slot).expect("all slots present");
                st.gripper_pending = false;
                let Some(d) = mode.get(slot) else { continue };
                if !d.is_rotation() || st.counted {
                    continue;
                }
                let Some(origin) = st.origin else { continue };
                st.counted = true;
                let tally = m.rotation.get_mut(d.effect().0).expect("rotation component");
                tally.required += 1;
                if origin == Origin::Auto {
                    tally.correct += 1;
                }
            }
        }
    }
    m.final_tick = end_tick;
    m
}

pub fn count_false_gripper_mappings(records: &[EventRecord]) -> u32 {
    log_metrics(records).false_gripper_mapping_count
}

pub fn rotation_accuracy(records: &[EventRecord]) -> RotationTallies {
    log_metrics(records).rotation
}

#[cfg(test)]
mod tests {
    use super::*;
    use lams_core::events::{EventLog, TrialStart};
    use lams_core::model::{ActionDirection, VelocityProfile};
    use lams_core::sim::{initial_world, SessionClock, SimConfig, TaskKind};
    use lams_core::switcher::{ProvenanceRecord, StrategyKind, SwitchSource};

    fn start(log: &mut EventLog) {
        log.push(
            0,
            Event::TrialStart(Box::new(TrialStart {
                task: TaskKind::WaterPouring,
                strategy: StrategyKind::Lams,
                run_id: "r".into(),
                trial_index: 1,
                layout_seed: 0,
                shuffle_seed: 0,
                velocity: VelocityProfile::default(),
                sim: SimConfig::default(),
                clock: SessionClock::default(),
                world: initial_world(TaskKind::WaterPouring, 0),
                mode: ModeMapping::default(),
            })),
        );
    }

    fn auto(log: &mut EventLog, tick: u64, up: ActionDirection, left: ActionDirection) {
        let mut mapping = ModeMapping::default();
        mapping.set(DirectionGroup::Up, up).unwrap();
        mapping.set(DirectionGroup::Left, left).unwrap();
        log.push(
            tick,
            Event::AutoSwitch(Box::new(ProvenanceRecord {
                strategy: StrategyKind::Lams,
                source: SwitchSource::Llm,
                call_index: 0,
                shuffle_seed: None,
                prompt: None,
                completion: None,
                distributions: None,
                last_executed: Default::default(),
                previous: ModeMapping::default(),
                mapping,
                changed: vec![],
                kept_manual: vec![],
                degraded: false,
                error: None,
                phase: None,
            })),
        );
    }

    fn drive(log: &mut EventLog, tick: u64, slot: DirectionGroup) {
        let a = UserAction::along(slot, 1.0);
        log.push(tick, Event::Input { lateral: a.lateral, longitudinal: a.longitudinal });
        log.push(tick + 1, Event::Input { lateral: 0.0, longitudinal: 0.0 });
    }

    fn end(log: &mut EventLog, tick: u64) {
        log.push(tick, Event::TrialEnd { reason: EndReason::Stopped, manual_switch_count: 0, stages_reached: 0 });
    }

    #[test]
    fn driven_gripper_is_not_false() {
        let mut log = EventLog::new(0.1, None);
        start(&mut log);
        auto(&mut log, 0, ActionDirection::OpenGripper, ActionDirection::MoveLeft);
        drive(&mut log, 2, DirectionGroup::Up);
        log.push(5, Event::ManualSwitch { slot: DirectionGroup::Up, old: Some(ActionDirection::OpenGripper), new: ActionDirection::MoveForward });
        end(&mut log, 9);
        assert_eq!(count_false_gripper_mappings(log.records()), 0);
    }

    #[test]
    fn switched_away_gripper_is_false() {
        let mut log = EventLog::new(0.1, None);
        start(&mut log);
        auto(&mut log, 0, ActionDirection::OpenGripper, ActionDirection::MoveLeft);
        log.push(3, Event::ManualSwitch { slot: DirectionGroup::Up, old: Some(ActionDirection::OpenGripper), new: ActionDirection::MoveForward });
        end(&mut log, 9);
        let m = log_metrics(log.records());
        assert_eq!(m.false_gripper_mapping_count, 1);
        assert_eq!(m.manual_switch_count, 1);
        assert_eq!(m.per_slot.up, 1);
    }

    #[test]
    fn offered_pitch_driven_counts_correct() {
        let mut log = EventLog::new(0.1, None);
        start(&mut log);
        auto(&mut log, 0, ActionDirection::PitchUp, ActionDirection::MoveLeft);
        drive(&mut log, 1, DirectionGroup::Up);
        end(&mut log, 9);
        let r = rotation_accuracy(log.records());
        assert_eq!(r.pitch, Tally { correct: 1, required: 1 });
        assert_eq!(r.yaw, Tally::default());
    }

    #[test]
    fn manual_yaw_counts_required_only() {
        let mut log = EventLog::new(0.1, None);
        start(&mut log);
        auto(&mut log, 0, ActionDirection::MoveUp, ActionDirection::MoveLeft);
        log.push(1, Event::ManualSwitch { slot: DirectionGroup::Left, old: Some(ActionDirection::MoveLeft), new: ActionDirection::RollLeft });
        log.push(2, Event::ManualSwitch { slot: DirectionGroup::Left, old: Some(ActionDirection::RollLeft), new: ActionDirection::YawLeft });
        drive(&mut log, 3, DirectionGroup::Left);
        end(&mut log, 9);
        let r = rotation_accuracy(log.records());
        assert_eq!(r.yaw, Tally { correct: 0, required: 1 });
        // the roll it passed through was never driven
        assert_eq!(r.roll, Tally::default());
    }

    #[test]
    fn empty_log() {
        let m = log_metrics(&[]);
        assert_eq!(m.rotation, RotationTallies::default());
        assert_eq!(m.false_gripper_mapping_count, 0);
        assert_eq!(m.manual_switch_count, 0);
    }
}
