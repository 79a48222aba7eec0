//! Runs scripted-user trials and multi-trial experiments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lams_core::episode::{derive_seed, Episode, EpisodeConfig, EpisodeError};
use lams_core::events::{EndReason, EventRecord};
use lams_core::gateway::Gateway;
use lams_core::learning::LearningStores;
use lams_core::model::{UserAction, VelocityProfile};
use lams_core::sim::{TaskKind, TaskSpec};
use lams_core::switcher::StrategyKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doubles::{hint_for, HintBoard};
use crate::metrics::{log_metrics, RotationTallies, SlotCounts};
use crate::user::{Decision, ScriptedUser, UserConfig};

pub const DEFAULT_BUDGET_TICKS: u64 = 20_000;
pub const DEFAULT_STUCK_TICKS: u64 = 3_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("event log: {0}")]
    Events(#[from] lams_core::events::EventError),
    #[error("incomplete log: {0}")]
    IncompleteLog(String),
    #[error("gateway: {0}")]
    Gateway(#[from] lams_core::gateway::GatewayError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Learning(#[from] lams_core::learning::LearningError),
    #[error(transparent)]
    Sim(#[from] lams_core::sim::SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub task: TaskKind,
    pub strategy: StrategyKind,
    pub run_id: String,
    /// 1-based position within the experiment
    pub trial_index: u32,
    pub layout_seed: u64,
    pub rng_seed: u64,
    pub budget_ticks: u64,
    /// Ticks without stage progress before the trial is declared stuck.
    pub stuck_ticks: u64,
    pub user: UserConfig,
    pub velocity: VelocityProfile,
}

impl TrialConfig {
    pub fn new(task: TaskKind, strategy: StrategyKind, layout_seed: u64) -> Self {
        Self {
            task,
            strategy,
            run_id: "run".into(),
            trial_index: 1,
            layout_seed,
            rng_seed: layout_seed,
            budget_ticks: DEFAULT_BUDGET_TICKS,
            stuck_ticks: DEFAULT_STUCK_TICKS,
            user: UserConfig::default(),
            velocity: VelocityProfile::default(),
        }
    }

    fn episode_config(&self) -> EpisodeConfig {
        let mut c = EpisodeConfig::new(self.task, self.strategy);
        c.run_id = self.run_id.clone();
        c.trial_index = self.trial_index;
        c.layout_seed = self.layout_seed;
        c.shuffle_seed = self.rng_seed;
        c.velocity = self.velocity;
        c.max_ticks = Some(self.budget_ticks);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task: TaskKind,
    pub strategy: StrategyKind,
    pub run_id: String,
    pub trial_index: u32,
    pub layout_seed: u64,
    pub completed: bool,
    pub end: Option<EndReason>,
    pub completion_tick: Option<u64>,
    pub final_tick: u64,
    pub stages_reached: usize,
    pub manual_switch_count: u32,
    pub per_slot: SlotCounts,
    pub false_gripper_mapping_count: u32,
    pub rotation: RotationTallies,
    /// Set when the scripted user made no progress for too long.
    pub plan_stuck: bool,
    pub log_path: Option<PathBuf>,
}

impl TrialResult {
    /// Rebuilds the result from a log; every metric comes from the log.
    pub fn from_log(records: &[EventRecord], log_path: Option<PathBuf>) -> Result<Self, HarnessError> {
        let Some(lams_core::events::Event::TrialStart(start)) = records.first().map(|r| &r.event) else {
            return Err(HarnessError::IncompleteLog("missing trial_start".into()));
        };
        let m = log_metrics(records);
        let plan_stuck = records.iter().any(|r| {
            matches!(&r.event, lams_core::events::Event::Error { message } if message.starts_with(PLAN_STUCK))
        });
        Ok(Self {
            task: start.task,
            strategy: start.strategy,
            run_id: start.run_id.clone(),
            trial_index: start.trial_index,
            layout_seed: start.layout_seed,
            completed: m.end == Some(EndReason::Completed),
            end: m.end,
            completion_tick: m.completion_tick,
            final_tick: m.final_tick,
            stages_reached: m.stages_reached,
            manual_switch_count: m.manual_switch_count,
            per_slot: m.per_slot,
            false_gripper_mapping_count: m.false_gripper_mapping_count,
            rotation: m.rotation,
            plan_stuck,
            log_path,
        })
    }
}

const PLAN_STUCK: &str = "plan stuck";

pub struct TrialOutput {
    pub result: TrialResult,
    pub stores: LearningStores,
    pub records: Vec<EventRecord>,
}

/// Runs one trial. `hints` is refreshed with the user's current need before
/// every batch of gateway calls; pass it when the gateway reads one.
pub fn run_trial(
    cfg: &TrialConfig,
    stores: LearningStores,
    gateway: Option<&dyn Gateway>,
    hints: Option<&HintBoard>,
    log_path: Option<&Path>,
) -> Result<TrialOutput, HarnessError> {
    let sink: Option<Box<dyn Write + Send>> = match log_path {
        Some(p) => Some(Box::new(BufWriter::new(File::create(p)?))),
        None => None,
    };
    let ecfg = cfg.episode_config();
    let window = ecfg.clock.window()? as u64;
    let mut ep = Episode::new(ecfg, stores, sink)?;
    let spec = TaskSpec::new(cfg.task);
    let total = spec.stages.len();
    let mut user = ScriptedUser::new(cfg.task, cfg.user, cfg.velocity, window);
    let llm = cfg.strategy.uses_llm();
    let mut last_progress = (0usize, 0u64);

    while ep.ended().is_none() {
        let stage = ep.stages_reached();
        if let Some(board) = hints {
            let need = user.need(ep.world(), stage).map(|n| n.direction);
            board.set(hint_for(ep.mode(), need));
        }
        if let Some(g) = gateway {
            ep.run_pending_calls(g);
        }
        let decision = user.decide(ep.world(), ep.mode(), stage, total, llm, ep.grouped_state());
        let input = match decision {
            Decision::Drive(a) => a,
            Decision::Pause | Decision::Idle => UserAction::ZERO,
            Decision::ManualSwitch(slot) => {
                ep.manual_switch(slot)?;
                UserAction::ZERO
            }
            Decision::GroupedCycle => {
                ep.grouped_cycle()?;
                UserAction::ZERO
            }
            Decision::Done => {
                ep.finish(EndReason::Completed);
                break;
            }
        };
        ep.tick(input)?;

        let tick = ep.world().tick;
        if ep.stages_reached() > last_progress.0 {
            last_progress = (ep.stages_reached(), tick);
        } else if ep.ended().is_none() && tick - last_progress.1 >= cfg.stuck_ticks {
            let message = format!("{PLAN_STUCK}: no stage progress for {} ticks", cfg.stuck_ticks);
            ep.log_mut()
                .push(tick, lams_core::events::Event::Error { message });
            ep.finish(EndReason::Timeout);
        }
    }
    // late rule generation still feeds the stores for the next trial
    if let Some(g) = gateway {
        ep.run_pending_calls(g);
    }
    let (stores, mut log) = ep.into_parts();
    if let Some(e) = log.take_sink_error() {
        return Err(e.into());
    }
    let records = log.into_records();
    let result = TrialResult::from_log(&records, log_path.map(Path::to_path_buf))?;
    Ok(TrialOutput { result, stores, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub strategy: StrategyKind,
    pub runs: u32,
    pub trials: u32,
    pub seed: u64,
    pub user: UserConfig,
    pub budget_ticks: u64,
}

impl ExperimentConfig {
    pub fn new(task: TaskKind, strategy: StrategyKind, runs: u32, trials: u32, seed: u64) -> Self {
        Self {
            task,
            strategy,
            runs,
            trials,
            seed,
            user: UserConfig::default(),
            budget_ticks: DEFAULT_BUDGET_TICKS,
        }
    }

    /// Layout seed of a trial; independent of the strategy so that
    /// strategies can be compared on identical layouts.
    pub fn layout_seed(&self, run: u32, trial: u32) -> u64 {
        derive_seed(self.seed ^ task_salt(self.task), (run as u64) << 16 | trial as u64)
    }

    pub fn run_id(&self, run: u32) -> String {
        format!("{}-{}-s{}-r{}", self.strategy, self.task, self.seed, run)
    }

    pub fn trial_config(&self, run: u32, trial: u32) -> TrialConfig {
        let layout_seed = self.layout_seed(run, trial);
        let mut c = TrialConfig::new(self.task, self.strategy, layout_seed);
        c.run_id = self.run_id(run);
        c.trial_index = trial;
        c.rng_seed = derive_seed(layout_seed, 0x5eed);
        c.user = self.user;
        c.budget_ticks = self.budget_ticks;
        c
    }
}

fn task_salt(task: TaskKind) -> u64 {
    match task {
        TaskKind::WaterPouring => 0x5741_5445_5200_0000,
        TaskKind::BookStorage => 0x424f_4f4b_0000_0000,
    }
}

/// Runs `runs` independent experiments of `trials` trials each. Learning
/// stores carry over between the trials of a run for learning strategies.
/// With `log_dir`, every trial log is written there.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    gateway: Option<&dyn Gateway>,
    hints: Option<&HintBoard>,
    log_dir: Option<&Path>,
) -> Result<Vec<TrialOutput>, HarnessError> {
    let mut out = Vec::new();
    for run in 0..cfg.runs {
        let mut stores = LearningStores::new(cfg.task, cfg.run_id(run));
        for trial in 1..=cfg.trials {
            let tc = cfg.trial_config(run, trial);
            if !cfg.strategy.learns() {
                stores = LearningStores::new(cfg.task, cfg.run_id(run));
            }
            let path = log_dir.map(|d| d.join(log_file_name(&tc)));
            let o = run_trial(&tc, stores, gateway, hints, path.as_deref())?;
            stores = o.stores.clone();
            out.push(o);
        }
        if let Some(d) = log_dir {
            stores.save(&d.join("stores"))?;
        }
    }
    Ok(out)
}

pub fn log_file_name(tc: &TrialConfig) -> String {
    format!("{}__t{}.jsonl", tc.run_id, tc.trial_index)
}

/// Mean manual-switch count per trial index (1-based positions).
pub fn mean_by_trial(results: &[TrialResult], trials: u32) -> Vec<f64> {
    (1..=trials)
        .map(|t| {
            let v: Vec<f64> = results
                .iter()
                .filter(|r| r.trial_index == t)
                .map(|r| r.manual_switch_count as f64)
                .collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doubles::HintedGateway;

    #[test]
    fn heuristic_trial_completes() {
        for task in TaskKind::ALL {
            let cfg = TrialConfig::new(task, StrategyKind::Heuristic, 3);
            let o = run_trial(&cfg, LearningStores::new(task, "t"), None, None, None).unwrap();
            assert!(o.result.completed, "{task}: {:?}", o.result);
            assert!(o.result.manual_switch_count > 0);
        }
    }

    #[test]
    fn hinted_lams_trial_needs_no_switches() {
        let g = HintedGateway::default();
        let cfg = TrialConfig::new(TaskKind::WaterPouring, StrategyKind::Lams, 8);
        let o = run_trial(&cfg, LearningStores::new(TaskKind::WaterPouring, "t"), Some(&g), Some(&g.board), None).unwrap();
        assert!(o.result.completed);
        assert_eq!(o.result.manual_switch_count, 0);
    }

    #[test]
    fn log_file_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrialConfig::new(TaskKind::BookStorage, StrategyKind::GroupedMapping, 1);
        let path = dir.path().join("t.jsonl");
        let o = run_trial(&cfg, LearningStores::new(TaskKind::BookStorage, "t"), None, None, Some(&path)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, lams_core::events::to_jsonl(&o.records));
        assert_eq!(o.result.log_path.as_deref(), Some(path.as_path()));
    }

    #[test]
    fn layout_seeds_vary_per_trial_not_strategy() {
        let a = ExperimentConfig::new(TaskKind::WaterPouring, StrategyKind::Lams, 2, 3, 1);
        let b = ExperimentConfig::new(TaskKind::WaterPouring, StrategyKind::StaticLlm, 2, 3, 1);
        assert_eq!(a.layout_seed(1, 2), b.layout_seed(1, 2));
        assert_ne!(a.layout_seed(0, 1), a.layout_seed(0, 2));
        assert_ne!(a.layout_seed(0, 1), a.layout_seed(1, 1));
    }
}
