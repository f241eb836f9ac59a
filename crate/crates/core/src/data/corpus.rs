use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueExample {
    pub personas: Vec<String>,
    pub query: String,
    pub response: String,
}

impl DialogueExample {
    /// Every text field, for vocabulary building.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.personas
            .iter()
            .map(String::as_str)
            .chain([self.query.as_str(), self.response.as_str()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entail,
    Neutral,
    Contradict,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Entail => "entail",
            Label::Neutral => "neutral",
            Label::Contradict => "contradict",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferencePair {
    pub premise: String,
    pub hypothesis: String,
    pub label: Label,
}

impl InferencePair {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        [self.premise.as_str(), self.hypothesis.as_str()].into_iter()
    }
}

/// Held-out evaluation record: one persona/query with a consistent and an
/// inconsistent response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTuple {
    pub personas: Vec<String>,
    pub query: String,
    pub entailed: String,
    pub contradicted: String,
}

impl EvalTuple {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.personas.iter().map(String::as_str).chain([
            self.query.as_str(),
            self.entailed.as_str(),
            self.contradicted.as_str(),
        ])
    }

    pub fn entailed_example(&self) -> DialogueExample {
        DialogueExample {
            personas: self.personas.clone(),
            query: self.query.clone(),
            response: self.entailed.clone(),
        }
    }

    pub fn contradicted_example(&self) -> DialogueExample {
        DialogueExample {
            personas: self.personas.clone(),
            query: self.query.clone(),
            response: self.contradicted.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

/// Result of a tolerant JSONL load: every line lands in exactly one of
/// `items` or `errors`.
#[derive(Clone, Debug)]
pub struct Loaded<T> {
    pub items: Vec<T>,
    pub errors: Vec<LineError>,
}

trait Validate {
    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl Validate for DialogueExample {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.response.trim().is_empty() {
            return Err("empty response".into());
        }
        Ok(())
    }
}
impl Validate for InferencePair {}
impl Validate for EvalTuple {}

fn parse_lines<T: DeserializeOwned + Validate>(text: &str) -> Loaded<T> {
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parsed = serde_json::from_str::<T>(line)
            .map_err(|e| e.to_string())
            .and_then(|item| item.validate().map(|_| item));
        match parsed {
            Ok(item) => items.push(item),
            Err(message) => errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    Loaded { items, errors }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_dialogue_jsonl(path: impl AsRef<Path>) -> Result<Loaded<DialogueExample>> {
    Ok(parse_lines(&read(path.as_ref())?))
}

pub fn load_inference_jsonl(path: impl AsRef<Path>) -> Result<Loaded<InferencePair>> {
    Ok(parse_lines(&read(path.as_ref())?))
}

pub fn load_eval_jsonl(path: impl AsRef<Path>) -> Result<Loaded<EvalTuple>> {
    Ok(parse_lines(&read(path.as_ref())?))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(items)?).map_err(|e| Error::io(path, e))
}

/// Split inference data into entailed (`D+`) and contradicted (`D-`) pairs.
/// Neutral pairs are dropped.
pub fn split_inference(data: &[InferencePair]) -> (Vec<InferencePair>, Vec<InferencePair>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for pair in data {
        match pair.label {
            Label::Entail => pos.push(pair.clone()),
            Label::Contradict => neg.push(pair.clone()),
            Label::Neutral => {}
        }
    }
    (pos, neg)
}

/// Parse a label string, naming the offending record on failure.
pub fn parse_label(label: &str, record: &str) -> Result<Label> {
    match label {
        "entail" => Ok(Label::Entail),
        "neutral" => Ok(Label::Neutral),
        "contradict" => Ok(Label::Contradict),
        other => Err(Error::Data {
            record: record.to_string(),
            message: format!("unknown label `{other}`"),
        }),
    }
}
