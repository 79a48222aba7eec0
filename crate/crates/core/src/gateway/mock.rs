//! Scripted, deterministic gateway.
//!
//! A script is an ordered list of entries. For a mode-switch request the
//! first entry whose substrings all occur (in the pose section, and anywhere
//! in the prompt for `prompt_contains`) and that carries distributions wins.
//! Rule-generation requests use the first matching entry with a
//! `rule_response`, matched against the whole prompt. The last entry must be
//! an unconditional default with distributions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Alternative, CompletionRequest, CompletionResult, Gateway, GatewayError, Role, TokenLogprob};
use crate::grounding::pose_section_of;
use crate::model::{direction_of, label_of, DirectionGroup, Letter};

pub type LetterWeights = BTreeMap<Letter, f64>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pose_contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_contains: Vec<String>,
    /// Keyed "Group 1" .. "Group 4".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<BTreeMap<String, LetterWeights>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_response: Option<String>,
}

impl MockEntry {
    fn is_unconditional(&self) -> bool {
        self.pose_contains.is_empty() && self.prompt_contains.is_empty()
    }

    fn matches(&self, request: &CompletionRequest) -> bool {
        let pose = match request.role {
            Role::ModeSwitch => pose_section_of(&request.prompt),
            Role::RuleGen => request.prompt.as_str(),
        };
        self.pose_contains.iter().all(|s| pose.contains(s.as_str()))
            && self.prompt_contains.iter().all(|s| request.prompt.contains(s.as_str()))
    }

    fn group_weights(&self) -> Result<[LetterWeights; 4], GatewayError> {
        let d = self
            .distributions
            .as_ref()
            .ok_or_else(|| GatewayError::Config("entry has no distributions".into()))?;
        let mut out: [LetterWeights; 4] = Default::default();
        for (i, g) in DirectionGroup::ALL.iter().enumerate() {
            let key = format!("Group {}", g.number());
            out[i] = d
                .get(&key)
                .cloned()
                .ok_or_else(|| GatewayError::Config(format!("entry lacks {key}")))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let last = self
            .entries
            .last()
            .ok_or_else(|| GatewayError::Config("mock script is empty".into()))?;
        if !last.is_unconditional() || last.distributions.is_none() {
            return Err(GatewayError::Config(
                "last mock entry must be an unconditional default with distributions".into(),
            ));
        }
        for e in &self.entries {
            if e.distributions.is_some() {
                let weights = e.group_weights()?;
                for (i, w) in weights.iter().enumerate() {
                    let group = DirectionGroup::ALL[i];
                    let valid: f64 = w
                        .iter()
                        .filter(|(l, p)| direction_of(group, **l).is_ok() && **p > 0.0)
                        .map(|(_, p)| *p)
                        .sum();
                    if valid.is_nan() || valid <= 0.0 || w.values().any(|p| !p.is_finite() || *p < 0.0) {
                        return Err(GatewayError::Config(format!("bad weights for {group}")));
                    }
                }
            }
        }
        Ok(())
    }
}

pub struct MockGateway {
    script: MockScript,
}

impl MockGateway {
    pub fn new(script: MockScript) -> Result<Self, GatewayError> {
        script.validate()?;
        Ok(Self { script })
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let script: MockScript =
            serde_json::from_str(text).map_err(|e| GatewayError::Config(format!("mock script: {e}")))?;
        Self::new(script)
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl Gateway for MockGateway {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        match request.role {
            Role::ModeSwitch => {
                let entry = self
                    .script
                    .entries
                    .iter()
                    .find(|e| e.distributions.is_some() && e.matches(request))
                    .expect("validated script ends with an unconditional default");
                Ok(completion_from_letters(&entry.group_weights()?))
            }
            Role::RuleGen => Ok(CompletionResult::text_only(
                self.script
                    .entries
                    .iter()
                    .find(|e| e.rule_response.is_some() && e.matches(request))
                    .and_then(|e| e.rule_response.clone())
                    .unwrap_or_default(),
            )),
        }
    }
}

/// Synthesizes a mode-switch completion whose letter tokens carry the given
/// weights as alternatives. The written letter is the heaviest valid one.
pub fn completion_from_letters(weights: &[LetterWeights; 4]) -> CompletionResult {
    let mut tokens = Vec::new();
    let mut text = String::new();
    fn push(tokens: &mut Vec<TokenLogprob>, text: &mut String, tok: String, lp: f64, alts: Vec<Alternative>) {
        text.push_str(&tok);
        tokens.push(TokenLogprob {
            token: tok,
            logprob: lp,
            alternatives: alts,
        });
    }
    push(&mut tokens, &mut text, "{".into(), 0.0, vec![]);
    for (i, group) in DirectionGroup::ALL.iter().enumerate() {
        let sep = if i == 0 { "" } else { ", " };
        push(&mut tokens, &mut text, format!("{sep}\"Group {}\": \"", group.number()), 0.0, vec![]);
        let total: f64 = weights[i].values().filter(|p| **p > 0.0).sum();
        let mut alts: Vec<Alternative> = weights[i]
            .iter()
            .filter(|(_, p)| **p > 0.0)
            .map(|(l, p)| Alternative {
                token: l.as_char().to_string(),
                logprob: (p / total).ln(),
            })
            .collect();
        alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        let (letter, direction, lp) = alts
            .iter()
            .find_map(|a| {
                let l = Letter::from_char(a.token.chars().next()?)?;
                direction_of(*group, l).ok().map(|d| (l, d, a.logprob))
            })
            .unwrap_or((Letter::A, group.members()[0], 0.0));
        push(&mut tokens, &mut text, letter.as_char().to_string(), lp, alts);
        push(
            &mut tokens,
            &mut text,
            format!(": {}\"", label_of(direction).text),
            0.0,
            vec![],
        );
    }
    push(&mut tokens, &mut text, "}".into(), 0.0, vec![]);
    CompletionResult { text, tokens }
}
