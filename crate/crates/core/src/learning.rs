//! Correction examples, synthesized rules, and the debounce that turns
//! manual D-pad presses into examples.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::grounding::{PoseDescription, RULE_PREAMBLE};
use crate::model::{label_of, ActionDirection, DirectionGroup};
use crate::sim::TaskKind;

pub const RULE_GEN_PREFIX: &str = include_str!("../assets/rule_gen_prefix.txt");

/// Header placed above raw examples when they stand in for rules.
pub const EXAMPLES_PREAMBLE: &str = "Below are examples recorded from earlier in this task. Each one pairs a task description, the robot arm's state and the object information with the action the user selected for one group. Use them to predict the most likely actions out of the specified groups for the current situation.\n";

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("manual switch did not change the slot")]
    NoChange,
    #[error("{direction} is not in the {slot} group")]
    WrongGroup {
        slot: DirectionGroup,
        direction: ActionDirection,
    },
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualSwitchEvent {
    pub tick: u64,
    pub slot: DirectionGroup,
    pub old: Option<ActionDirection>,
    pub new: ActionDirection,
    pub press_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub tick: u64,
    pub pose: PoseDescription,
    pub slot: DirectionGroup,
    pub direction: ActionDirection,
}

impl ExampleRecord {
    /// `"Group 1": "C: Pitch up"`
    pub fn action_line(&self) -> String {
        let l = label_of(self.direction);
        format!(
            "\"Group {}\": \"{}: {}\"",
            l.group.number(),
            l.letter.as_char(),
            self.direction.display_name()
        )
    }

    pub fn render(&self, index: usize) -> String {
        format!(
            "**Example {index}:**   \n\n{}\n- **Most Likely Action(s):**  \n{{\n{}\n}}\n",
            self.pose.render_body(),
            self.action_line()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub text: String,
    /// Generation batch that produced the rule.
    pub origin: u64,
}

/// Splits a rule-generation completion into rules. Top-level numbered items
/// start rules; without any, column-0 bullets do. Indented lines and
/// sub-bullets stay with their item. Text before the first item and an
/// unindented paragraph after a blank line are dropped.
pub fn parse_rules<'a>(text: &'a str) -> Vec<String> {
    fn numbered(line: &str) -> Option<&str> {
        let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits == 0 {
            return None;
        }
        let rest = &line[digits..];
        let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
        rest.starts_with(char::is_whitespace).then(|| rest.trim_start())
    }
    fn bullet(line: &str) -> Option<&str> {
        let rest = line
            .strip_prefix("- ")
            .or_else(|| line.strip_prefix("* "))
            .or_else(|| line.strip_prefix("• "))?;
        Some(rest.trim_start())
    }
    let use_numbers = text.lines().any(|l| numbered(l).is_some());
    let start_of = |l: &'a str| if use_numbers { numbered(l) } else { bullet(l) };

    let mut rules: Vec<String> = Vec::new();
    let mut current: Option<String> = None;
    let mut after_blank = false;
    for line in text.lines() {
        if let Some(head) = start_of(line) {
            if let Some(r) = current.take() {
                rules.push(r);
            }
            current = Some(head.to_string());
            after_blank = false;
        } else if line.trim().is_empty() {
            after_blank = true;
        } else if let Some(r) = current.as_mut() {
            let indented = line.starts_with(char::is_whitespace);
            if after_blank && !indented {
                rules.push(current.take().expect("checked"));
            } else {
                r.push('\n');
                r.push_str(line.trim_end());
            }
            after_blank = false;
        }
    }
    rules.extend(current);
    rules
        .into_iter()
        .map(|r| r.trim().to_string())
        .filter(|r| !r.is_empty())
        .collect()
}

/// Examples (E) and rules (R) for one task and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningStores {
    pub task: TaskKind,
    pub run_id: String,
    pub examples: Vec<ExampleRecord>,
    pub rules: Vec<Rule>,
    pub next_batch: u64,
}

impl LearningStores {
    pub fn new(task: TaskKind, run_id: impl Into<String>) -> Self {
        Self {
            task,
            run_id: run_id.into(),
            examples: Vec::new(),
            rules: Vec::new(),
            next_batch: 0,
        }
    }

    pub fn record_manual_switch(
        &mut self,
        event: &ManualSwitchEvent,
        pose: PoseDescription,
    ) -> Result<&ExampleRecord, LearningError> {
        if event.old == Some(event.new) {
            return Err(LearningError::NoChange);
        }
        if !event.slot.contains(event.new) {
            return Err(LearningError::WrongGroup {
                slot: event.slot,
                direction: event.new,
            });
        }
        self.examples.push(ExampleRecord {
            tick: event.tick,
            pose,
            slot: event.slot,
            direction: event.new,
        });
        Ok(self.examples.last().expect("just pushed"))
    }

    fn shuffled<T>(items: &[T], seed: u64) -> Vec<&T> {
        let mut v: Vec<&T> = items.iter().collect();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        v
    }

    /// Rule-generation prompt over the examples in a seeded order; `None`
    /// when there are no examples.
    pub fn rule_gen_prompt(&self, seed: u64) -> Option<String> {
        if self.examples.is_empty() {
            return None;
        }
        let body: Vec<String> = Self::shuffled(&self.examples, seed)
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.render(i))
            .collect();
        Some(format!("{RULE_GEN_PREFIX}\n{}", body.join("\n")))
    }

    /// Parses a rule-generation completion and appends every rule as one
    /// batch. Returns the number appended.
    pub fn apply_rule_response(&mut self, text: &str) -> usize {
        let parsed = parse_rules(text);
        let batch = self.next_batch;
        self.next_batch += 1;
        let n = parsed.len();
        self.rules
            .extend(parsed.into_iter().map(|text| Rule { text, origin: batch }));
        n
    }

    /// One rule-generation call over the current examples.
    pub fn synthesize_rules(&mut self, gateway: &dyn Gateway, seed: u64) -> Result<usize, GatewayError> {
        let Some(prompt) = self.rule_gen_prompt(seed) else {
            return Ok(0);
        };
        let result = gateway.complete(&CompletionRequest::rule_gen(prompt))?;
        Ok(self.apply_rule_response(&result.text))
    }

    /// Rules under the preamble, renumbered in a seeded order. Empty when
    /// there are no rules.
    pub fn compose_rule_section(&self, seed: u64) -> String {
        if self.rules.is_empty() {
            return String::new();
        }
        let items: Vec<String> = Self::shuffled(&self.rules, seed)
            .into_iter()
            .enumerate()
            .map(|(i, r)| format!("{}. {}", i + 1, r.text))
            .collect();
        format!("{RULE_PREAMBLE}\n{}\n", items.join("\n\n"))
    }

    /// Raw examples in a seeded order, for the direct-examples ablation.
    pub fn compose_examples_section(&self, seed: u64) -> String {
        if self.examples.is_empty() {
            return String::new();
        }
        let items: Vec<String> = Self::shuffled(&self.examples, seed)
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.render(i))
            .collect();
        format!("{EXAMPLES_PREAMBLE}\n{}", items.join("\n"))
    }

    pub fn file_name(task: TaskKind, run_id: &str) -> String {
        format!("{}__{run_id}.json", task.name())
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(Self::file_name(self.task, &self.run_id))
    }

    /// Writes the stores atomically (temp file + rename).
    pub fn save(&self, dir: &Path) -> Result<PathBuf, LearningError> {
        std::fs::create_dir_all(dir)?;
        let path = self.path_in(dir);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(dir: &Path, task: TaskKind, run_id: &str) -> Result<Option<Self>, LearningError> {
        let path = dir.join(Self::file_name(task, run_id));
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Fresh stores for `task`. The current contents are archived under
    /// `archive_dir` first when there is anything to keep.
    pub fn reset_for_task(&self, task: TaskKind, archive_dir: &Path) -> Result<LearningStores, LearningError> {
        if !self.examples.is_empty() || !self.rules.is_empty() {
            std::fs::create_dir_all(archive_dir)?;
            let stem = format!("{}__{}", self.task.name(), self.run_id);
            let mut n = 0;
            let path = loop {
                let p = archive_dir.join(format!("{stem}__archive{n}.json"));
                if !p.exists() {
                    break p;
                }
                n += 1;
            };
            std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        }
        Ok(LearningStores::new(task, self.run_id.clone()))
    }
}

/// A correction in progress: same-slot presses coalesce until it settles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingCorrection {
    pub slot: DirectionGroup,
    pub original: Option<ActionDirection>,
    pub current: ActionDirection,
    pub presses: u32,
    pub first_tick: u64,
    pub last_tick: u64,
    pub pose: PoseDescription,
}

impl PendingCorrection {
    pub fn event(&self) -> ManualSwitchEvent {
        ManualSwitchEvent {
            tick: self.first_tick,
            slot: self.slot,
            old: self.original,
            new: self.current,
            press_count: self.presses,
        }
    }

    /// Whether the settled direction differs from where the slot started.
    pub fn changed(&self) -> bool {
        self.original != Some(self.current)
    }
}

/// Coalesces consecutive same-slot presses. A pending correction settles on
/// a nonzero joystick input, a press on another slot, an explicit flush, or
/// after `window_ticks` without further presses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Debouncer {
    pub window_ticks: u64,
    pending: Option<PendingCorrection>,
}

impl Debouncer {
    pub fn new(window_ticks: u64) -> Self {
        Self {
            window_ticks,
            pending: None,
        }
    }

    pub fn pending(&self) -> Option<&PendingCorrection> {
        self.pending.as_ref()
    }

    /// Registers a press that moved `slot` from `old` to `new`. `pose` is
    /// only evaluated when a new correction starts. Returns a correction
    /// settled by this press (one on a different slot).
    pub fn press(
        &mut self,
        tick: u64,
        slot: DirectionGroup,
        old: Option<ActionDirection>,
        new: ActionDirection,
        pose: impl FnOnce() -> PoseDescription,
    ) -> Option<PendingCorrection> {
        match self.pending.as_mut() {
            Some(p) if p.slot == slot => {
                p.current = new;
                p.presses += 1;
                p.last_tick = tick;
                None
            }
            _ => {
                let settled = self.pending.take();
                self.pending = Some(PendingCorrection {
                    slot,
                    original: old,
                    current: new,
                    presses: 1,
                    first_tick: tick,
                    last_tick: tick,
                    pose: pose(),
                });
                settled
            }
        }
    }

    /// Settles on nonzero input or an elapsed window.
    pub fn tick(&mut self, tick: u64, input_nonzero: bool) -> Option<PendingCorrection> {
        let due = match &self.pending {
            Some(p) => input_nonzero || tick.saturating_sub(p.last_tick) >= self.window_ticks,
            None => false,
        };
        if due {
            self.pending.take()
        } else {
            None
        }
    }

    pub fn flush(&mut self) -> Option<PendingCorrection> {
        self.pending.take()
    }
}
