//! Gateways that read the scripted user's current need from a shared board.
//! They stand in for a model in controlled experiments.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use lams_core::gateway::mock::{completion_from_letters, LetterWeights};
use lams_core::gateway::{CompletionRequest, CompletionResult, Gateway, GatewayError, Role};
use lams_core::model::{label_of, ActionDirection, DirectionGroup, Letter, ModeMapping};

/// What the user would like the next switch to produce.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Hint {
    pub desired: ModeMapping,
    pub need: Option<ActionDirection>,
}

#[derive(Debug, Clone, Default)]
pub struct HintBoard(Arc<Mutex<Hint>>);

impl HintBoard {
    pub fn set(&self, hint: Hint) {
        *self.0.lock().expect("hint board poisoned") = hint;
    }

    pub fn get(&self) -> Hint {
        *self.0.lock().expect("hint board poisoned")
    }
}

/// Desired mapping: the current one with the need's slot set to the need.
pub fn hint_for(mode: &ModeMapping, need: Option<ActionDirection>) -> Hint {
    let mut desired = *mode;
    if let Some(d) = need {
        desired.set(d.group(), d).expect("direction belongs to its own group");
    }
    Hint { desired, need }
}

/// Weights putting most mass on `main`, a little on the other letters.
fn peaked(group: DirectionGroup, main: Letter, runner_up: Option<Letter>) -> LetterWeights {
    group
        .letters()
        .iter()
        .map(|l| {
            let w = if *l == main {
                0.9
            } else if Some(*l) == runner_up {
                0.06
            } else {
                0.02
            };
            (*l, w)
        })
        .collect()
}

fn letter_for(slot: DirectionGroup, mapping: &ModeMapping) -> Letter {
    mapping
        .get(slot)
        .map(|d| label_of(d).letter)
        .unwrap_or(Letter::A)
}

/// Always offers the desired mapping. Rule generation yields nothing.
#[derive(Debug, Clone, Default)]
pub struct HintedGateway {
    pub board: HintBoard,
}

impl Gateway for HintedGateway {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        match request.role {
            Role::RuleGen => Ok(CompletionResult::text_only("")),
            Role::ModeSwitch => {
                let hint = self.board.get();
                let weights = DirectionGroup::ALL.map(|g| peaked(g, letter_for(g, &hint.desired), None));
                Ok(completion_from_letters(&weights))
            }
        }
    }
}

/// Examples of a direction needed before a rule for it is synthesized.
pub const DEFAULT_CORROBORATION: usize = 1;

/// Rule text that makes [`StagedGateway`] predict `d` correctly.
pub fn staged_rule(d: ActionDirection) -> String {
    let l = label_of(d);
    format!(
        "When the situation calls for \"{}\", map Group {} to \"{}: {}\" instead of a gripper action.",
        d.display_name(),
        l.group.number(),
        l.letter.as_char(),
        d.display_name()
    )
}

/// A model that starts out biased: whenever the needed direction sits in the
/// up or down slot and is not itself a gripper action, it puts the gripper
/// action there instead. Once the prompt carries the rule for that
/// direction it answers correctly. Rule generation emits a rule for every
/// direction seen in at least `corroboration` examples.
#[derive(Debug, Clone)]
pub struct StagedGateway {
    pub board: HintBoard,
    pub corroboration: usize,
}

impl Default for StagedGateway {
    fn default() -> Self {
        Self {
            board: HintBoard::default(),
            corroboration: DEFAULT_CORROBORATION,
        }
    }
}

impl StagedGateway {
    fn errs_on(need: ActionDirection, prompt: &str) -> bool {
        matches!(need.group(), DirectionGroup::Up | DirectionGroup::Down)
            && !need.is_gripper()
            && !prompt.contains(&staged_rule(need))
    }

    fn rules_for(&self, prompt: &str) -> String {
        let mut counts: BTreeMap<ActionDirection, usize> = BTreeMap::new();
        for d in ActionDirection::ALL {
            let l = label_of(d);
            let line = format!(
                "\"Group {}\": \"{}: {}\"",
                l.group.number(),
                l.letter.as_char(),
                d.display_name()
            );
            counts.insert(d, prompt.matches(&line).count());
        }
        counts
            .into_iter()
            .filter(|(_, n)| *n >= self.corroboration.max(1))
            .enumerate()
            .map(|(i, (d, _))| format!("{}. {}", i + 1, staged_rule(d)))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl Gateway for StagedGateway {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        match request.role {
            Role::RuleGen => Ok(CompletionResult::text_only(self.rules_for(&request.prompt))),
            Role::ModeSwitch => {
                let hint = self.board.get();
                let weights = DirectionGroup::ALL.map(|g| {
                    let wanted = letter_for(g, &hint.desired);
                    match hint.need {
                        Some(n) if n.group() == g && Self::errs_on(n, &request.prompt) => {
                            peaked(g, Letter::D, Some(wanted))
                        }
                        _ => peaked(g, wanted, None),
                    }
                });
                Ok(completion_from_letters(&weights))
            }
        }
    }
}
