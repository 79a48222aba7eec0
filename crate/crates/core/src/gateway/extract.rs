//! Per-group probability distributions from answer-letter token logprobs.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::CompletionResult;
use crate::model::{direction_of, ActionDirection, DirectionGroup, Letter};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("malformed completion: {0}")]
    ParseError(String),
    #[error("no answer-letter token found for {0}")]
    LetterTokenNotFound(DirectionGroup),
}

static GROUP_KEY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#""Group\s*([1-4])"\s*:\s*""#).expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub group: DirectionGroup,
    pub probs: BTreeMap<ActionDirection, f64>,
}

impl GroupDistribution {
    /// Builds a distribution from letter weights, dropping invalid letters
    /// and renormalizing. `None` when no valid mass remains.
    pub fn from_letters(group: DirectionGroup, weights: &BTreeMap<Letter, f64>) -> Option<Self> {
        let mut probs = BTreeMap::new();
        for (letter, w) in weights {
            if let Ok(d) = direction_of(group, *letter) {
                if w.is_finite() && *w > 0.0 {
                    *probs.entry(d).or_insert(0.0) += *w;
                }
            }
        }
        let total: f64 = probs.values().sum();
        if total <= 0.0 {
            return None;
        }
        for p in probs.values_mut() {
            *p /= total;
        }
        Some(Self { group, probs })
    }

    pub fn prob(&self, d: ActionDirection) -> f64 {
        self.probs.get(&d).copied().unwrap_or(0.0)
    }

    /// Directions by descending probability; ties keep letter order.
    pub fn ranked(&self) -> Vec<(ActionDirection, f64)> {
        let mut v: Vec<(ActionDirection, f64)> = self
            .group
            .members()
            .iter()
            .filter_map(|d| self.probs.get(d).map(|p| (*d, *p)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }
}

/// Byte offset of the answer letter for each group key in `text`.
fn letter_offsets(text: &str) -> Result<[usize; 4], ExtractError> {
    let mut found: [Option<usize>; 4] = [None; 4];
    for caps in GROUP_KEY.captures_iter(text) {
        let n: usize = caps[1].parse().expect("regex digit");
        let end = caps.get(0).expect("whole match").end();
        let skip = text[end..].len() - text[end..].trim_start().len();
        found[n - 1].get_or_insert(end + skip);
    }
    let mut out = [0; 4];
    for (i, f) in found.iter().enumerate() {
        out[i] = f.ok_or_else(|| ExtractError::ParseError(format!("missing \"Group {}\"", i + 1)))?;
    }
    Ok(out)
}

/// Letters written in the completion text, one per group.
pub fn written_letters(text: &str) -> Result<[Letter; 4], ExtractError> {
    let offsets = letter_offsets(text)?;
    let mut out = [Letter::A; 4];
    for (i, off) in offsets.iter().enumerate() {
        let group = DirectionGroup::ALL[i];
        out[i] = text[*off..]
            .chars()
            .next()
            .and_then(Letter::from_char)
            .filter(|l| direction_of(group, *l).is_ok())
            .ok_or_else(|| ExtractError::ParseError(format!("no valid letter for {group}")))?;
    }
    Ok(out)
}

/// Reads a letter from a token candidate. `prefix` is the part of the
/// chosen token that precedes the letter; candidates sharing it have it
/// stripped, others lose leading whitespace and quotes.
fn candidate_letter(candidate: &str, prefix: &str) -> Option<Letter> {
    let rest = match candidate.strip_prefix(prefix) {
        Some(r) if !prefix.is_empty() => r,
        _ => candidate.trim_start_matches(|c: char| c.is_whitespace() || c == '"'),
    };
    let mut chars = rest.chars();
    let letter = Letter::from_char(chars.next()?)?;
    match chars.next() {
        Some(c) if c.is_alphanumeric() => None,
        _ => Some(letter),
    }
}

/// Extracts the four group distributions from a mode-switch completion.
pub fn extract_group_distributions(result: &CompletionResult) -> Result<[GroupDistribution; 4], ExtractError> {
    let offsets = letter_offsets(&result.text)?;
    let joined: String = result.tokens.iter().map(|t| t.token.as_str()).collect();
    if joined != result.text {
        return Err(ExtractError::ParseError(
            "token texts do not reconstruct the completion text".into(),
        ));
    }
    let mut starts = Vec::with_capacity(result.tokens.len());
    let mut pos = 0;
    for t in &result.tokens {
        starts.push(pos);
        pos += t.token.len();
    }

    let mut out = Vec::with_capacity(4);
    for (i, off) in offsets.into_iter().enumerate() {
        let group = DirectionGroup::ALL[i];
        let idx = starts
            .iter()
            .rposition(|s| *s <= off)
            .filter(|&k| off < starts[k] + result.tokens[k].token.len())
            .ok_or(ExtractError::LetterTokenNotFound(group))?;
        let tok = &result.tokens[idx];
        let prefix = &tok.token[..off - starts[idx]];

        let mut seen: Vec<&str> = Vec::new();
        let mut weights: BTreeMap<Letter, f64> = BTreeMap::new();
        let candidates = tok
            .alternatives
            .iter()
            .map(|a| (a.token.as_str(), a.logprob))
            .chain(std::iter::once((tok.token.as_str(), tok.logprob)));
        for (text, logprob) in candidates {
            if seen.contains(&text) {
                continue;
            }
            seen.push(text);
            if let Some(letter) = candidate_letter(text, prefix) {
                if direction_of(group, letter).is_ok() {
                    *weights.entry(letter).or_insert(0.0) += logprob.exp();
                }
            }
        }
        let dist = GroupDistribution::from_letters(group, &weights).ok_or(ExtractError::LetterTokenNotFound(group))?;
        out.push(dist);
    }
    Ok(out.try_into().expect("four groups"))
}
