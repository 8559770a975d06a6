//! Closed template grammar for reference explanations.
//!
//! Every explanation has the fixed form
//! `<object name> <action/status> <position>` over closed vocabularies, e.g.
//! "pedestrian crossing ahead". Slots may be multiword ("cutting in",
//! "on the left"); parsing is longest-match in template order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Object kinds that can appear in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Car,
    Truck,
    Pedestrian,
    Cyclist,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Car, Kind::Truck, Kind::Pedestrian, Kind::Cyclist];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Car => "car",
            Kind::Truck => "truck",
            Kind::Pedestrian => "pedestrian",
            Kind::Cyclist => "cyclist",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

/// Motion status of the significant object, derived from its velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Stopped,
    Crossing,
    CuttingIn,
    Approaching,
    MovingAway,
}

impl Status {
    pub const ALL: [Status; 5] = [
        Status::Stopped,
        Status::Crossing,
        Status::CuttingIn,
        Status::Approaching,
        Status::MovingAway,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Status::Stopped => "stopped",
            Status::Crossing => "crossing",
            Status::CuttingIn => "cutting in",
            Status::Approaching => "approaching",
            Status::MovingAway => "moving away",
        }
    }
}

/// Ego-vehicle reaction classes predicted by the significance generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionClass {
    Stop,
    SlowDown,
    Yield,
    Proceed,
}

impl ActionClass {
    pub const ALL: [ActionClass; 4] =
        [ActionClass::Stop, ActionClass::SlowDown, ActionClass::Yield, ActionClass::Proceed];

    pub fn label(self) -> &'static str {
        match self {
            ActionClass::Stop => "stop",
            ActionClass::SlowDown => "slow down",
            ActionClass::Yield => "yield",
            ActionClass::Proceed => "proceed",
        }
    }

    pub fn class_id(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn from_label(s: &str) -> Result<ActionClass> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::data(format!("unknown action label {s:?}")))
    }
}

/// Position phrases produced by `geometry::position_label`, in left-to-right
/// order of the frame thirds they describe.
pub const POSITIONS: [&str; 3] = ["on the left", "ahead", "on the right"];

/// Ego reaction for a (kind, position-third) cell.
///
/// Each position column is a bijection kinds -> actions, so with kinds drawn
/// uniformly every action has marginal probability exactly 1/4 regardless of
/// where significant objects land.
pub fn action_rule(kind: Kind, position: &str) -> Result<ActionClass> {
    let col = POSITIONS
        .iter()
        .position(|&p| p == position)
        .ok_or_else(|| Error::data(format!("unknown position phrase {position:?}")))?;
    use ActionClass::*;
    use Kind::*;
    Ok(match (kind, col) {
        (Car, 0) => Yield,
        (Truck, 0) => Proceed,
        (Pedestrian, 0) => Stop,
        (Cyclist, 0) => SlowDown,
        (Car, 1) => SlowDown,
        (Truck, 1) => Proceed,
        (Pedestrian, 1) => Stop,
        (Cyclist, 1) => Yield,
        (Car, 2) => Proceed,
        (Truck, 2) => SlowDown,
        (Pedestrian, 2) => Yield,
        (Cyclist, 2) => Stop,
        _ => unreachable!("col < 3 by construction"),
    })
}

fn kind_names() -> [&'static str; 4] {
    [Kind::Car.name(), Kind::Truck.name(), Kind::Pedestrian.name(), Kind::Cyclist.name()]
}

fn status_phrases() -> [&'static str; 5] {
    [
        Status::Stopped.phrase(),
        Status::Crossing.phrase(),
        Status::CuttingIn.phrase(),
        Status::Approaching.phrase(),
        Status::MovingAway.phrase(),
    ]
}

/// Join the three slots in template order with single spaces.
///
/// All slots must come from the closed vocabularies.
pub fn make_explanation(object_name: &str, action_status: &str, position: &str) -> Result<String> {
    if !kind_names().contains(&object_name) {
        return Err(Error::data(format!("unknown object name {object_name:?}")));
    }
    if !status_phrases().contains(&action_status) {
        return Err(Error::data(format!("unknown action/status phrase {action_status:?}")));
    }
    if !POSITIONS.contains(&position) {
        return Err(Error::data(format!("unknown position phrase {position:?}")));
    }
    Ok(format!("{object_name} {action_status} {position}"))
}

/// Longest-match parse against the slot vocabularies in template order.
///
/// Returns `None` when the text is not exactly one template instance;
/// failure is a value, not an error.
pub fn parse_explanation(text: &str) -> Option<(&'static str, &'static str, &'static str)> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let object = longest_match(&tokens, 0, &kind_names())?;
    let consumed = object.split(' ').count();
    let status = longest_match(&tokens, consumed, &status_phrases())?;
    let consumed = consumed + status.split(' ').count();
    let position = longest_match(&tokens, consumed, &POSITIONS)?;
    let consumed = consumed + position.split(' ').count();
    if consumed == tokens.len() {
        Some((object, status, position))
    } else {
        None
    }
}

/// The longest vocabulary phrase matching `tokens[start..]` as a prefix.
fn longest_match(
    tokens: &[&str],
    start: usize,
    vocab: &[&'static str],
) -> Option<&'static str> {
    vocab
        .iter()
        .copied()
        .filter(|phrase| {
            let words: Vec<&str> = phrase.split(' ').collect();
            tokens.len() >= start + words.len() && tokens[start..start + words.len()] == words[..]
        })
        .max_by_key(|phrase| phrase.split(' ').count())
}

/// Token id of the beginning-of-sequence marker.
pub const BOS: usize = 0;
/// Token id of the end-of-sequence marker.
pub const EOS: usize = 1;
/// Token id of the padding marker (reserved; unused by per-clip losses).
pub const PAD: usize = 2;

/// The closed token vocabulary: specials followed by every template word in
/// a fixed canonical order. Word ids are stable across runs and datasets.
pub fn vocab() -> Vec<String> {
    let mut v: Vec<String> = vec!["<bos>".into(), "<eos>".into(), "<pad>".into()];
    for phrase in kind_names().iter().chain(status_phrases().iter()).chain(POSITIONS.iter()) {
        for w in phrase.split(' ') {
            if !v.iter().any(|x| x == w) {
                v.push(w.to_string());
            }
        }
    }
    v
}

/// Number of tokens in the closed vocabulary.
pub fn vocab_size() -> usize {
    vocab().len()
}

/// Map a template sentence to word token ids (no specials added).
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let v = vocab();
    text.split_whitespace()
        .map(|w| {
            v.iter()
                .position(|x| x == w)
                .ok_or_else(|| Error::data(format!("token {w:?} not in vocabulary")))
        })
        .collect()
}

/// Map token ids back to a sentence, skipping special tokens.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let v = vocab();
    let mut words = Vec::new();
    for &id in ids {
        if id >= v.len() {
            return Err(Error::data(format!("token id {id} out of vocabulary")));
        }
        if id > PAD {
            words.push(v[id].clone());
        }
    }
    Ok(words.join(" "))
}
