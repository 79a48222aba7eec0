//! Mode-switch strategies: LLM-driven selection with the fallback rule,
//! the grouped-mapping baseline and the phase-table heuristic.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::extract::{extract_group_distributions, written_letters, GroupDistribution};
use crate::gateway::{CompletionRequest, CompletionResult, Gateway, GatewayError};
use crate::grounding::{assemble_prompt, PromptBundle, PromptMode};
use crate::learning::LearningStores;
use crate::model::{direction_of, ActionDirection, DirectionGroup, ModeMapping};
use crate::sim::{ObjectKind, TaskKind, WorldState};

/// Second-best probability above which a repeat of the last executed
/// direction is replaced by the runner-up.
pub const FALLBACK_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SwitchError {
    #[error("distribution for {0} is empty")]
    EmptyDistribution(DirectionGroup),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("heuristic table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Lams,
    StaticLlm,
    TopAction,
    DirectExamples,
    NumState,
    GroupedMapping,
    Heuristic,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Lams,
        StrategyKind::StaticLlm,
        StrategyKind::TopAction,
        StrategyKind::DirectExamples,
        StrategyKind::NumState,
        StrategyKind::GroupedMapping,
        StrategyKind::Heuristic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Lams => "lams",
            StrategyKind::StaticLlm => "static_llm",
            StrategyKind::TopAction => "top_action",
            StrategyKind::DirectExamples => "direct_examples",
            StrategyKind::NumState => "num_state",
            StrategyKind::GroupedMapping => "grouped_mapping",
            StrategyKind::Heuristic => "heuristic",
        }
    }

    pub fn uses_llm(self) -> bool {
        self.prompt_mode().is_some()
    }

    pub fn prompt_mode(self) -> Option<PromptMode> {
        match self {
            StrategyKind::Lams | StrategyKind::TopAction => Some(PromptMode::Lams),
            StrategyKind::StaticLlm => Some(PromptMode::Static),
            StrategyKind::NumState => Some(PromptMode::NumState),
            StrategyKind::DirectExamples => Some(PromptMode::DirectExamples),
            StrategyKind::GroupedMapping | StrategyKind::Heuristic => None,
        }
    }

    /// Whether manual corrections feed the example store (and, except for
    /// direct examples, rule synthesis). Stores of learning strategies are
    /// carried across trials of a run.
    pub fn learns(self) -> bool {
        matches!(
            self,
            StrategyKind::Lams | StrategyKind::TopAction | StrategyKind::DirectExamples | StrategyKind::NumState
        )
    }

    pub fn synthesizes_rules(self) -> bool {
        self.learns() && self != StrategyKind::DirectExamples
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = SwitchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| SwitchError::UnknownStrategy(s.to_string()))
    }
}

/// Per-group most recently driven direction since the last completed switch.
pub type LastExecuted = BTreeMap<DirectionGroup, ActionDirection>;

/// Argmax of the group distribution, except when the argmax repeats the
/// last executed direction of that group and the runner-up has probability
/// strictly above `threshold`; then the runner-up.
pub fn select_direction(
    dist: &GroupDistribution,
    last_executed: Option<ActionDirection>,
    threshold: f64,
) -> Result<ActionDirection, SwitchError> {
    let ranked = dist.ranked();
    let (best, _) = *ranked.first().ok_or(SwitchError::EmptyDistribution(dist.group))?;
    match ranked.get(1) {
        Some(&(second, p)) if Some(best) == last_executed && p > threshold => Ok(second),
        _ => Ok(best),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchSource {
    Llm,
    Heuristic,
}

/// Everything needed to explain one automatic switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub strategy: StrategyKind,
    pub source: SwitchSource,
    pub call_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<Vec<GroupDistribution>>,
    pub last_executed: LastExecuted,
    pub previous: ModeMapping,
    pub mapping: ModeMapping,
    pub changed: Vec<DirectionGroup>,
    /// Slots left as they were because the user changed them while the
    /// call was in flight.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kept_manual: Vec<DirectionGroup>,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
}

/// A mode-switch call ready to send.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSwitch {
    pub strategy: StrategyKind,
    pub call_index: u64,
    pub shuffle_seed: u64,
    pub bundle: PromptBundle,
    pub request: CompletionRequest,
}

/// Builds the prompt for an LLM strategy; `None` for the others.
pub fn prepare_switch(
    strategy: StrategyKind,
    world: &WorldState,
    task: TaskKind,
    stores: &LearningStores,
    call_index: u64,
    shuffle_seed: u64,
) -> Option<PreparedSwitch> {
    let mode = strategy.prompt_mode()?;
    let bundle = assemble_prompt(stores, world, task, mode, shuffle_seed);
    let request = CompletionRequest::mode_switch(bundle.text());
    Some(PreparedSwitch {
        strategy,
        call_index,
        shuffle_seed,
        bundle,
        request,
    })
}

/// Turns a completion (or failure) into the next mapping. On any error the
/// current mapping stays and the record is flagged degraded.
pub fn resolve_switch(
    prepared: &PreparedSwitch,
    result: Result<CompletionResult, GatewayError>,
    current: &ModeMapping,
    last_executed: &LastExecuted,
    threshold: f64,
) -> ProvenanceRecord {
    let mut record = ProvenanceRecord {
        strategy: prepared.strategy,
        source: SwitchSource::Llm,
        call_index: prepared.call_index,
        shuffle_seed: Some(prepared.shuffle_seed),
        prompt: Some(prepared.bundle.clone()),
        completion: None,
        distributions: None,
        last_executed: last_executed.clone(),
        previous: *current,
        mapping: *current,
        changed: Vec::new(),
        kept_manual: Vec::new(),
        degraded: false,
        error: None,
        phase: None,
    };
    let completion = match result {
        Ok(c) => c,
        Err(e) => {
            record.degraded = true;
            record.error = Some(e.to_string());
            return record;
        }
    };
    let dists = extract_group_distributions(&completion);
    let next = if prepared.strategy == StrategyKind::TopAction {
        written_letters(&completion.text)
            .map_err(|e| e.to_string())
            .and_then(|letters| mapping_from(|g| direction_of(g, letters[g.index()]).map_err(|e| e.to_string())))
    } else {
        match &dists {
            Ok(d) => mapping_from(|g| {
                select_direction(&d[g.index()], last_executed.get(&g).copied(), threshold).map_err(|e| e.to_string())
            }),
            Err(e) => Err(e.to_string()),
        }
    };
    record.distributions = dists.ok().map(|d| d.to_vec());
    record.completion = Some(completion);
    match next {
        Ok(m) => {
            record.changed = m.changed_slots(current);
            record.mapping = m;
        }
        Err(e) => {
            record.degraded = true;
            record.error = Some(e);
        }
    }
    record
}

fn mapping_from(
    mut pick: impl FnMut(DirectionGroup) -> Result<ActionDirection, String>,
) -> Result<ModeMapping, String> {
    let mut m = ModeMapping::default();
    for g in DirectionGroup::ALL {
        m.set(g, pick(g)?).map_err(|e| e.to_string())?;
    }
    Ok(m)
}

/// Synchronous prepare, call and resolve.
pub fn switch_modes(
    prepared: &PreparedSwitch,
    gateway: &dyn Gateway,
    current: &ModeMapping,
    last_executed: &LastExecuted,
    threshold: f64,
) -> ProvenanceRecord {
    let result = gateway.complete(&prepared.request);
    resolve_switch(prepared, result, current, last_executed, threshold)
}

/// The four fixed groups of the grouped-mapping baseline, 1-based.
pub fn grouped_mapping(group: u8) -> ModeMapping {
    use ActionDirection::*;
    let (up, down, lateral) = match group {
        1 => (MoveForward, MoveBackward, Some((MoveLeft, MoveRight))),
        2 => (MoveUp, MoveDown, Some((RollLeft, RollRight))),
        3 => (PitchUp, PitchDown, Some((YawLeft, YawRight))),
        4 => (OpenGripper, CloseGripper, None),
        _ => panic!("grouped mapping index must be 1..=4, got {group}"),
    };
    let mut m = ModeMapping::longitudinal_only(up, down).expect("table slots are valid");
    if let Some((l, r)) = lateral {
        m.set(DirectionGroup::Left, l).expect("table slots are valid");
        m.set(DirectionGroup::Right, r).expect("table slots are valid");
    }
    m
}

pub const GROUPED_COUNT: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedState {
    /// 1-based
    pub group: u8,
}

impl Default for GroupedState {
    fn default() -> Self {
        Self { group: 1 }
    }
}

impl GroupedState {
    pub fn mapping(&self) -> ModeMapping {
        grouped_mapping(self.group)
    }

    pub fn cycle(&mut self) -> ModeMapping {
        self.group = self.group % GROUPED_COUNT + 1;
        self.mapping()
    }

    /// Cycle presses to reach the group exposing `d` (first match from the
    /// current group).
    pub fn presses_to(&self, d: ActionDirection) -> Option<u8> {
        (0..GROUPED_COUNT).find(|k| grouped_mapping((self.group - 1 + k) % GROUPED_COUNT + 1).exposes(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Trigger {
    Always,
    Holding { object: ObjectKind },
    /// Held and raised at least `height_m` above its starting height.
    Lifted { object: ObjectKind, height_m: f64 },
    Dropped { object: ObjectKind },
    /// Held with horizontal distance to `target` at most `lateral_m`.
    HeldNear {
        object: ObjectKind,
        target: ObjectKind,
        lateral_m: f64,
    },
}

impl Trigger {
    pub fn fires(&self, world: &WorldState) -> bool {
        match self {
            Trigger::Always => true,
            Trigger::Holding { object } => world.object(*object).is_some_and(|o| o.held),
            Trigger::Lifted { object, height_m } => world
                .object(*object)
                .is_some_and(|o| o.held && o.pose.z >= o.initial_pose.z + height_m),
            Trigger::Dropped { object } => world.object(*object).is_some_and(|o| o.dropped),
            Trigger::HeldNear {
                object,
                target,
                lateral_m,
            } => match (world.object(*object), world.object(*target)) {
                (Some(o), Some(t)) if o.held => {
                    (o.pose.x - t.pose.x).hypot(o.pose.y - t.pose.y) <= *lateral_m
                }
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub trigger: Trigger,
    pub mapping: ModeMapping,
}

/// Ordered phases; the first must trigger unconditionally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicPhaseTable {
    pub task: TaskKind,
    pub phases: Vec<Phase>,
}

const WATER_TABLE: &str = include_str!("../assets/heuristic/water_pouring.json");
const BOOK_TABLE: &str = include_str!("../assets/heuristic/book_storage.json");

impl HeuristicPhaseTable {
    pub fn builtin(task: TaskKind) -> Self {
        let text = match task {
            TaskKind::WaterPouring => WATER_TABLE,
            TaskKind::BookStorage => BOOK_TABLE,
        };
        Self::from_json(text).expect("builtin heuristic table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, SwitchError> {
        let t: Self = serde_json::from_str(text).map_err(|e| SwitchError::Table(e.to_string()))?;
        match t.phases.first() {
            Some(p) if p.trigger == Trigger::Always => Ok(t),
            _ => Err(SwitchError::Table("first phase must trigger always".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicState {
    pub table: HeuristicPhaseTable,
    pub phase: usize,
}

impl HeuristicState {
    pub fn new(table: HeuristicPhaseTable) -> Self {
        Self { table, phase: 0 }
    }

    pub fn current(&self) -> &Phase {
        &self.table.phases[self.phase]
    }

    /// Advances through every following phase whose trigger fires and
    /// returns the new phase, if any. Phases never go backwards.
    pub fn step(&mut self, world: &WorldState) -> Option<&Phase> {
        let start = self.phase;
        while self.phase + 1 < self.table.phases.len() && self.table.phases[self.phase + 1].trigger.fires(world) {
            self.phase += 1;
        }
        (self.phase != start).then(|| self.current())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::completion_from_letters;
    use crate::gateway::mock::LetterWeights;
    use crate::model::Letter;
    use crate::sim::initial_world;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn dist(group: DirectionGroup, weights: &[(Letter, f64)]) -> GroupDistribution {
        GroupDistribution::from_letters(group, &weights.iter().copied().collect()).unwrap()
    }

    #[test]
    fn argmax_without_history() {
        let d = dist(DirectionGroup::Up, &[(Letter::A, 0.5), (Letter::B, 0.3), (Letter::C, 0.2)]);
        assert_eq!(select_direction(&d, None, FALLBACK_THRESHOLD).unwrap(), ActionDirection::MoveForward);
    }

    #[test]
    fn fallback_when_repeating_and_runner_up_strong() {
        let d = dist(DirectionGroup::Up, &[(Letter::A, 0.5), (Letter::B, 0.3), (Letter::C, 0.2)]);
        let got = select_direction(&d, Some(ActionDirection::MoveForward), FALLBACK_THRESHOLD).unwrap();
        assert_eq!(got, ActionDirection::MoveUp);
    }

    #[test]
    fn runner_up_at_threshold_is_not_enough() {
        let d = dist(DirectionGroup::Up, &[(Letter::A, 0.8), (Letter::B, 0.2)]);
        let got = select_direction(&d, Some(ActionDirection::MoveForward), FALLBACK_THRESHOLD).unwrap();
        assert_eq!(got, ActionDirection::MoveForward);
    }

    #[test]
    fn single_candidate_never_falls_back() {
        let d = dist(DirectionGroup::Left, &[(Letter::B, 1.0)]);
        let got = select_direction(&d, Some(ActionDirection::RollLeft), FALLBACK_THRESHOLD).unwrap();
        assert_eq!(got, ActionDirection::RollLeft);
    }

    proptest! {
        #[test]
        fn selection_is_argmax_or_runner_up(
            ws in prop::collection::vec(0.01f64..1.0, 4),
            last in prop::option::of(0usize..4),
            group_ix in 0usize..4,
        ) {
            let group = DirectionGroup::ALL[group_ix];
            let weights: BTreeMap<Letter, f64> = group.letters().iter().zip(&ws).map(|(l, w)| (*l, *w)).collect();
            let d = GroupDistribution::from_letters(group, &weights).unwrap();
            let last = last.and_then(|i| group.members().get(i).copied());
            let got = select_direction(&d, last, FALLBACK_THRESHOLD).unwrap();
            let ranked = d.ranked();
            prop_assert!(got == ranked[0].0 || got == ranked[1].0);
            if got != ranked[0].0 {
                prop_assert_eq!(Some(ranked[0].0), last);
                prop_assert!(ranked[1].1 > FALLBACK_THRESHOLD);
            }
            prop_assert!(group.contains(got));
        }
    }

    fn weights(letters: [(Letter, f64); 2]) -> LetterWeights {
        letters.into_iter().collect()
    }

    fn prepared(strategy: StrategyKind) -> PreparedSwitch {
        let world = initial_world(TaskKind::WaterPouring, 3);
        let stores = LearningStores::new(TaskKind::WaterPouring, "t");
        prepare_switch(strategy, &world, TaskKind::WaterPouring, &stores, 0, 9).unwrap()
    }

    fn completion() -> CompletionResult {
        completion_from_letters(&[
            weights([(Letter::A, 0.6), (Letter::D, 0.4)]),
            weights([(Letter::B, 0.9), (Letter::A, 0.1)]),
            weights([(Letter::A, 0.7), (Letter::C, 0.3)]),
            weights([(Letter::C, 0.55), (Letter::A, 0.45)]),
        ])
    }

    #[test]
    fn resolve_uses_fallback_per_group() {
        let mut last = LastExecuted::new();
        last.insert(DirectionGroup::Up, ActionDirection::MoveForward);
        let r = resolve_switch(&prepared(StrategyKind::Lams), Ok(completion()), &ModeMapping::default(), &last, 0.2);
        assert!(!r.degraded);
        assert_eq!(r.mapping.get(DirectionGroup::Up), Some(ActionDirection::OpenGripper));
        assert_eq!(r.mapping.get(DirectionGroup::Down), Some(ActionDirection::MoveDown));
        assert_eq!(r.mapping.get(DirectionGroup::Left), Some(ActionDirection::MoveLeft));
        assert_eq!(r.mapping.get(DirectionGroup::Right), Some(ActionDirection::YawRight));
        let changed: BTreeSet<_> = r.changed.iter().copied().collect();
        assert_eq!(
            changed,
            [DirectionGroup::Up, DirectionGroup::Down, DirectionGroup::Right].into_iter().collect()
        );
    }

    #[test]
    fn top_action_ignores_history() {
        let mut last = LastExecuted::new();
        last.insert(DirectionGroup::Up, ActionDirection::MoveForward);
        let r = resolve_switch(&prepared(StrategyKind::TopAction), Ok(completion()), &ModeMapping::default(), &last, 0.2);
        assert_eq!(r.mapping.get(DirectionGroup::Up), Some(ActionDirection::MoveForward));
    }

    #[test]
    fn errors_keep_mapping_and_flag_degraded() {
        let current = grouped_mapping(2);
        let r = resolve_switch(
            &prepared(StrategyKind::Lams),
            Err(GatewayError::Timeout),
            &current,
            &LastExecuted::new(),
            0.2,
        );
        assert!(r.degraded);
        assert_eq!(r.mapping, current);
        assert!(r.changed.is_empty());

        let r = resolve_switch(
            &prepared(StrategyKind::Lams),
            Ok(CompletionResult::text_only("I am not sure")),
            &current,
            &LastExecuted::new(),
            0.2,
        );
        assert!(r.degraded);
        assert_eq!(r.mapping, current);
    }

    #[test]
    fn non_llm_strategies_have_no_prompt() {
        let world = initial_world(TaskKind::BookStorage, 1);
        let stores = LearningStores::new(TaskKind::BookStorage, "t");
        for s in [StrategyKind::GroupedMapping, StrategyKind::Heuristic] {
            assert!(prepare_switch(s, &world, TaskKind::BookStorage, &stores, 0, 0).is_none());
        }
        let p = prepare_switch(StrategyKind::StaticLlm, &world, TaskKind::BookStorage, &stores, 0, 0).unwrap();
        assert!(p.bundle.rules_section.is_empty());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in StrategyKind::ALL {
            assert_eq!(s.name().parse::<StrategyKind>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert_eq!("Static-LLM".parse::<StrategyKind>().unwrap(), StrategyKind::StaticLlm);
        assert!("bogus".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn grouped_table_covers_every_direction_once() {
        let mut seen = BTreeMap::new();
        for g in 1..=GROUPED_COUNT {
            for (_, d) in grouped_mapping(g).slots() {
                if let Some(d) = d {
                    assert!(seen.insert(d, g).is_none(), "{d} appears twice");
                }
            }
        }
        assert_eq!(seen.len(), ActionDirection::ALL.len());
        assert_eq!(grouped_mapping(4).get(DirectionGroup::Left), None);
    }

    #[test]
    fn grouped_cycle_wraps() {
        let mut s = GroupedState::default();
        let order: Vec<u8> = (0..5).map(|_| { s.cycle(); s.group }).collect();
        assert_eq!(order, vec![2, 3, 4, 1, 2]);
        let s = GroupedState { group: 3 };
        assert_eq!(s.presses_to(ActionDirection::YawLeft), Some(0));
        assert_eq!(s.presses_to(ActionDirection::CloseGripper), Some(1));
        assert_eq!(s.presses_to(ActionDirection::MoveForward), Some(2));
    }

    #[test]
    fn builtin_tables_load() {
        for task in TaskKind::ALL {
            let t = HeuristicPhaseTable::builtin(task);
            assert_eq!(t.task, task);
            assert!(t.phases.len() >= 3);
        }
        assert!(HeuristicPhaseTable::from_json(r#"{"task":"book_storage","phases":[]}"#).is_err());
    }

    #[test]
    fn heuristic_follows_holding() {
        let mut world = initial_world(TaskKind::WaterPouring, 2);
        let mut h = HeuristicState::new(HeuristicPhaseTable::builtin(TaskKind::WaterPouring));
        assert!(h.step(&world).is_none());
        let cap = world.objects.iter_mut().find(|o| o.kind == ObjectKind::BottleCap).unwrap();
        cap.held = true;
        let p = h.step(&world).unwrap();
        assert_eq!(p.name, "lift_cap");
        // phases are monotone even if the trigger stops firing
        world.objects.iter_mut().for_each(|o| o.held = false);
        assert!(h.step(&world).is_none());
        assert_eq!(h.current().name, "lift_cap");
    }
}
