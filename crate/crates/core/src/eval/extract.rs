use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Prediction;
use crate::gateway::extract_json_block;

/// How a prediction is read out of a model reply. When a rule can match in
/// several places, the last match wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    /// `(A)`-style option labels.
    OptionLetter,
    /// `Yes` / `No`; a reply starting with either word takes it.
    YesNo,
    /// Any label from the label set, case-insensitively.
    VerbatimLabel,
    /// A JSON object mapping labels to booleans; the prediction is the set of
    /// true keys.
    JsonBooleanMap,
    /// Comma- or whitespace-separated labels.
    CommaSeparatedIds,
}

fn option_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Za-z])\)|(?i:answer|option)(?:\s+is)?\s*:?\s*\(?([A-Z])\b").unwrap())
}

fn yes_no_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap())
}

fn canonical<'a>(labels: &'a [String], found: &str) -> Option<&'a String> {
    labels.iter().find(|l| l.eq_ignore_ascii_case(found))
}

fn single(label: &str) -> Prediction {
    Prediction::Answer(BTreeSet::from([label.to_string()]))
}

fn truthy(v: &Value) -> bool {
    match v {
        Value::Bool(b) => *b,
        Value::String(s) => matches!(s.trim().to_ascii_lowercase().as_str(), "true" | "yes"),
        Value::Number(n) => n.as_f64().is_some_and(|x| x != 0.0),
        _ => false,
    }
}

impl Extraction {
    /// Labels this rule can emit must all be drawn from `labels`.
    pub fn check_alphabet(self, labels: &[String]) -> Result<(), String> {
        match self {
            Extraction::OptionLetter => {
                if let Some(bad) = labels.iter().find(|l| {
                    let b = l.as_bytes();
                    !(b.len() == 3 && b[0] == b'(' && b[1].is_ascii_alphabetic() && b[2] == b')')
                }) {
                    return Err(format!("label `{bad}` is not an option letter like `(A)`"));
                }
                Ok(())
            }
            Extraction::YesNo => {
                for need in ["Yes", "No"] {
                    if canonical(labels, need).is_none() {
                        return Err(format!("yes/no extraction needs label `{need}`"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn extract(self, reply: &str, labels: &[String]) -> Prediction {
        match self {
            Extraction::OptionLetter => option_re()
                .captures_iter(reply)
                .filter_map(|c| {
                    let letter = c.get(1).or_else(|| c.get(2))?.as_str();
                    canonical(labels, &format!("({letter})"))
                })
                .last()
                .map(|l| single(l))
                .unwrap_or(Prediction::Abstain),
            Extraction::YesNo => {
                let lower = reply.trim_start().to_ascii_lowercase();
                let word = if lower.starts_with("yes") {
                    Some("yes".to_string())
                } else if lower.starts_with("no") && !lower[2..].starts_with(|c: char| c.is_alphanumeric()) {
                    Some("no".to_string())
                } else {
                    yes_no_re().find_iter(reply).last().map(|m| m.as_str().to_ascii_lowercase())
                };
                word.and_then(|w| canonical(labels, &w))
                    .map(|l| single(l))
                    .unwrap_or(Prediction::Abstain)
            }
            Extraction::VerbatimLabel => {
                let hay = reply.to_lowercase();
                let mut best: Option<(usize, usize, &String)> = None;
                for l in labels {
                    let needle = l.to_lowercase();
                    if needle.is_empty() {
                        continue;
                    }
                    if let Some(pos) = hay.rfind(&needle) {
                        let key = (pos + needle.len(), needle.len(), l);
                        if best.is_none_or(|b| (key.0, key.1) > (b.0, b.1)) {
                            best = Some(key);
                        }
                    }
                }
                best.map(|(_, _, l)| single(l)).unwrap_or(Prediction::Abstain)
            }
            Extraction::JsonBooleanMap => match extract_json_block(reply) {
                Ok(Value::Object(m)) => {
                    let set = m
                        .iter()
                        .filter(|(_, v)| truthy(v))
                        .filter_map(|(k, _)| canonical(labels, k).cloned())
                        .collect();
                    Prediction::Answer(set)
                }
                _ => Prediction::Abstain,
            },
            Extraction::CommaSeparatedIds => {
                let last = reply.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
                let set: BTreeSet<String> = last
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '_' && c != '-'))
                    .filter_map(|t| canonical(labels, t).cloned())
                    .collect();
                if set.is_empty() {
                    Prediction::Abstain
                } else {
                    Prediction::Answer(set)
                }
            }
        }
    }
}
