//! Aggregate tables over a directory of trial logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use lams_core::events::read_log;
use lams_core::sim::TaskKind;
use lams_core::switcher::StrategyKind;
use serde::Serialize;

use crate::metrics::Tally;
use crate::trial::{HarnessError, TrialResult};

/// Reads every `*.jsonl` log under `dir` (not recursive), sorted by path.
pub fn load_results(dir: &Path) -> Result<Vec<TrialResult>, HarnessError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let records = read_log(BufReader::new(File::open(&p)?))?;
        out.push(TrialResult::from_log(&records, Some(p))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct CsvRow<'a> {
    task: TaskKind,
    strategy: StrategyKind,
    run_id: &'a str,
    trial_index: u32,
    layout_seed: u64,
    completed: bool,
    final_tick: u64,
    stages_reached: usize,
    manual_switch_count: u32,
    switches_up: u32,
    switches_down: u32,
    switches_left: u32,
    switches_right: u32,
    grouped_cycles: u32,
    false_gripper_mapping_count: u32,
    pitch_correct: u32,
    pitch_required: u32,
    roll_correct: u32,
    roll_required: u32,
    yaw_correct: u32,
    yaw_required: u32,
    plan_stuck: bool,
}

/// One CSV row per trial.
pub fn write_csv(results: &[TrialResult], w: impl std::io::Write) -> Result<(), HarnessError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in results {
        wr.serialize(CsvRow {
            task: r.task,
            strategy: r.strategy,
            run_id: &r.run_id,
            trial_index: r.trial_index,
            layout_seed: r.layout_seed,
            completed: r.completed,
            final_tick: r.final_tick,
            stages_reached: r.stages_reached,
            manual_switch_count: r.manual_switch_count,
            switches_up: r.per_slot.up,
            switches_down: r.per_slot.down,
            switches_left: r.per_slot.left,
            switches_right: r.per_slot.right,
            grouped_cycles: r.per_slot.cycle,
            false_gripper_mapping_count: r.false_gripper_mapping_count,
            pitch_correct: r.rotation.pitch.correct,
            pitch_required: r.rotation.pitch.required,
            roll_correct: r.rotation.roll.correct,
            roll_required: r.rotation.roll.required,
            yaw_correct: r.rotation.yaw.correct,
            yaw_required: r.rotation.yaw.required,
            plan_stuck: r.plan_stuck,
        })?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GroupSummary {
    pub trials: usize,
    pub completed: usize,
    /// mean manual switches at each trial index, 1-based
    pub mean_switches: Vec<f64>,
    pub false_gripper: u32,
    pub pitch: Tally,
    pub roll: Tally,
    pub yaw: Tally,
}

pub fn summarize(results: &[TrialResult]) -> BTreeMap<(TaskKind, StrategyKind), GroupSummary> {
    let mut groups: BTreeMap<(TaskKind, StrategyKind), Vec<&TrialResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.task, r.strategy)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let max_t = rs.iter().map(|r| r.trial_index).max().unwrap_or(0);
            let mean_switches = (1..=max_t)
                .map(|t| {
                    let v: Vec<u32> = rs.iter().filter(|r| r.trial_index == t).map(|r| r.manual_switch_count).collect();
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        v.iter().sum::<u32>() as f64 / v.len() as f64
                    }
                })
                .collect();
            let mut s = GroupSummary {
                trials: rs.len(),
                completed: rs.iter().filter(|r| r.completed).count(),
                mean_switches,
                ..Default::default()
            };
            for r in &rs {
                s.false_gripper += r.false_gripper_mapping_count;
                for (acc, t) in [
                    (&mut s.pitch, r.rotation.pitch),
                    (&mut s.roll, r.rotation.roll),
                    (&mut s.yaw, r.rotation.yaw),
                ] {
                    acc.correct += t.correct;
                    acc.required += t.required;
                }
            }
            (k, s)
        })
        .collect()
}

fn pct(t: Tally) -> String {
    t.ratio()
        .map(|r| format!("{:.0}% ({}/{})", r * 100.0, t.correct, t.required))
        .unwrap_or_else(|| "-".into())
}

pub fn markdown(results: &[TrialResult]) -> String {
    let summary = summarize(results);
    let max_t = summary.values().map(|s| s.mean_switches.len()).max().unwrap_or(0);
    let mut out = String::new();

    out.push_str("## Mean manual switches per trial\n\n| task | strategy |");
    for t in 1..=max_t {
        let _ = write!(out, " T{t} |");
    }
    out.push_str(" completed |\n|---|---|");
    out.push_str(&"---|".repeat(max_t + 1));
    out.push('\n');
    for ((task, strategy), s) in &summary {
        let _ = write!(out, "| {task} | {strategy} |");
        for t in 0..max_t {
            match s.mean_switches.get(t).filter(|v| !v.is_nan()) {
                Some(v) => {
                    let _ = write!(out, " {v:.2} |");
                }
                None => out.push_str(" - |"),
            }
        }
        let _ = writeln!(out, " {}/{} |", s.completed, s.trials);
    }

    out.push_str("\n## Mapping quality\n\n| task | strategy | false gripper | pitch | roll | yaw |\n|---|---|---|---|---|---|\n");
    for ((task, strategy), s) in &summary {
        let _ = writeln!(
            out,
            "| {task} | {strategy} | {} | {} | {} | {} |",
            s.false_gripper,
            pct(s.pitch),
            pct(s.roll),
            pct(s.yaw)
        );
    }
    out
}
