use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{ActionOp, EditAction, UpdateType};
use crate::tree::parse::find_brace_groups;
use crate::tree::NodePath;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionParseError {
    #[error("action {index}: unknown action_type `{found}`")]
    UnknownType { index: usize, found: String },
    #[error("action {index}: missing or malformed field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("reply has no `actions` array")]
    NoActions,
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

fn update_type_of(s: &str) -> Option<UpdateType> {
    let s = squash(s);
    if s.contains("add") {
        Some(UpdateType::Addition)
    } else if s.contains("delet") || s.contains("remov") {
        Some(UpdateType::Deletion)
    } else if s.contains("rewrit") || s.contains("refin") || s.contains("modif") {
        Some(UpdateType::Rewriting)
    } else {
        None
    }
}

fn text(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => items.first().and_then(|i| text(Some(i))),
        Value::Null => None,
        other => Some(other.to_string()),
    }
}

fn path(v: Option<&Value>) -> Option<NodePath> {
    text(v).map(|s| NodePath::parse(&s)).filter(|p| !p.is_empty())
}

fn structure(v: Option<&Value>) -> Option<Value> {
    match v? {
        Value::Object(_) => v.cloned(),
        Value::String(s) => serde_json::from_str::<Value>(s).ok().filter(Value::is_object),
        _ => None,
    }
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array().map(|items| {
        items
            .iter()
            .filter_map(|i| i.as_str().map(|s| s.trim().to_string()))
            .filter(|s| !s.is_empty())
            .collect()
    })
}

impl EditAction {
    /// Lenient parse of one element of the actor's `actions` array.
    pub fn from_actor_json(value: &Value, index: usize) -> Result<EditAction, ActionParseError> {
        let missing = |field| ActionParseError::MissingField { index, field };
        let obj = value.as_object().ok_or(missing("action_type"))?;
        let raw_type = text(obj.get("action_type")).ok_or(missing("action_type"))?;
        let empty = Map::new();
        // Some replies flatten the details into the action object itself.
        let details = obj.get("action_details").and_then(Value::as_object).unwrap_or(obj);
        let details = if details.is_empty() { &empty } else { details };
        let get = |k: &str| details.get(k).or_else(|| obj.get(k));
        let explanation = text(obj.get("action_explanation")).unwrap_or_default();
        let kind = squash(&raw_type);

        let op = if kind.starts_with("sectionreorder") || kind == "reorder" {
            ActionOp::SectionReorder {
                section_reference: path(get("section_reference")).ok_or(missing("section_reference"))?,
                new_position: path(get("new_position")).ok_or(missing("new_position"))?,
            }
        } else if kind.starts_with("sectionrephrase") || kind == "rephrase" {
            let reference = path(get("section_reference")).ok_or(missing("section_reference"))?;
            let (key, value) = match get("updated_section") {
                Some(Value::Object(u)) => (
                    text(u.get("key")).unwrap_or_else(|| "body".into()),
                    text(u.get("value")).ok_or(missing("updated_section"))?,
                ),
                other => ("body".into(), text(other).ok_or(missing("updated_section"))?),
            };
            ActionOp::SectionRephrase {
                section_reference: reference,
                updated_key: key,
                updated_value: value,
            }
        } else if kind.starts_with("exampleupdate") || kind.starts_with("exampleupdates") {
            let reference = path(get("section_reference")).ok_or(missing("section_reference"))?;
            let update_type = text(get("update_type"))
                .and_then(|s| update_type_of(&s))
                .or_else(|| update_type_of(&kind["exampleupdate".len()..]).filter(|_| kind.len() > "exampleupdate".len()))
                .ok_or(missing("update_type"))?;
            let instruction = text(get("update_examples_instruction")).unwrap_or_default();
            let resolved = get("resolved_examples").and_then(string_list).or_else(|| {
                let groups = find_brace_groups(&instruction);
                (!groups.is_empty()).then_some(groups)
            });
            ActionOp::ExampleUpdate {
                section_reference: reference,
                update_type,
                instruction,
                resolved_examples: resolved,
            }
        } else if kind.starts_with("deletesection") || kind == "delete" {
            ActionOp::DeleteSection {
                section_reference: path(get("section_reference")).ok_or(missing("section_reference"))?,
            }
        } else if kind.starts_with("newsection") {
            ActionOp::NewSectionCreation {
                section_position: path(get("section_position")).ok_or(missing("section_position"))?,
                new_section_structure: structure(get("new_section_structure")).ok_or(missing("new_section_structure"))?,
            }
        } else if kind.starts_with("mergesection") || kind == "merge" {
            let merged: Vec<NodePath> = match get("section_reference_merged") {
                Some(Value::Array(items)) => items.iter().filter_map(|i| path(Some(i))).collect(),
                _ => Vec::new(),
            };
            let [a, b]: [NodePath; 2] = merged.try_into().map_err(|_| missing("section_reference_merged"))?;
            ActionOp::MergeSection {
                section_reference_merged: [a, b],
                section_position: path(get("section_position")).ok_or(missing("section_position"))?,
                new_section_structure: structure(get("new_section_structure")).ok_or(missing("new_section_structure"))?,
            }
        } else {
            return Err(ActionParseError::UnknownType {
                index,
                found: raw_type,
            });
        };
        Ok(EditAction { op, explanation })
    }

    /// The actor template's output shape. Materialized examples travel in an
    /// extra `resolved_examples` detail field.
    pub fn to_actor_json(&self) -> Value {
        let details = match &self.op {
            ActionOp::SectionReorder {
                section_reference,
                new_position,
            } => json!({"section_reference": section_reference.to_string(), "new_position": new_position.to_string()}),
            ActionOp::SectionRephrase {
                section_reference,
                updated_key,
                updated_value,
            } => json!({
                "section_reference": section_reference.to_string(),
                "updated_section": {"key": updated_key, "value": updated_value}
            }),
            ActionOp::ExampleUpdate {
                section_reference,
                update_type,
                instruction,
                resolved_examples,
            } => {
                let mut d = json!({
                    "section_reference": section_reference.to_string(),
                    "update_type": update_type.wire_name(),
                    "update_examples_instruction": instruction
                });
                if let Some(r) = resolved_examples {
                    d["resolved_examples"] = json!(r);
                }
                d
            }
            ActionOp::DeleteSection { section_reference } => {
                json!({"section_reference": section_reference.to_string()})
            }
            ActionOp::NewSectionCreation {
                section_position,
                new_section_structure,
            } => json!({
                "section_position": section_position.to_string(),
                "new_section_structure": new_section_structure
            }),
            ActionOp::MergeSection {
                section_reference_merged,
                section_position,
                new_section_structure,
            } => json!({
                "section_reference_merged": [section_reference_merged[0].to_string(), section_reference_merged[1].to_string()],
                "section_position": section_position.to_string(),
                "new_section_structure": new_section_structure
            }),
        };
        json!({
            "action_type": self.template_kind().wire_name(),
            "action_details": details,
            "action_explanation": self.explanation
        })
    }
}

impl Serialize for EditAction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_actor_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EditAction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        EditAction::from_actor_json(&v, 0).map_err(serde::de::Error::custom)
    }
}

/// Parses an actor reply (`{"actions": [...]}` or a bare array). Malformed
/// entries are returned as errors alongside the good ones.
pub fn parse_actions_reply(value: &Value) -> Result<(Vec<EditAction>, Vec<ActionParseError>), ActionParseError> {
    let items = match value {
        Value::Object(m) => m.get("actions").and_then(Value::as_array),
        Value::Array(a) => Some(a),
        _ => None,
    }
    .ok_or(ActionParseError::NoActions)?;
    let mut actions = Vec::new();
    let mut errors = Vec::new();
    for (i, item) in items.iter().enumerate() {
        match EditAction::from_actor_json(item, i) {
            Ok(a) => actions.push(a),
            Err(e) => errors.push(e),
        }
    }
    Ok((actions, errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::TemplateKind;

    #[test]
    fn template_example_parses() {
        let reply: Value = serde_json::from_str(r#"{"actions": [{"action_type": "Section Reorder", "action_details": {"section_reference": "Heading 1> Heading 1.2> Heading 1.2.1", "new_position": "Heading 1> Heading 1.2> Heading 1.2.4"},"action_explanation": "x"},{"action_type": "Section Rephrase", "action_details": {"section_reference": "Heading 1> Heading 1.2> Heading 1.2.1> body","updated_section": {"key": "body", "value": "Updated body content"}}, "action_explanation": "x"}, {"action_type": "Example Update", "action_details": {"section_reference": "Heading 1> Heading 1.2> Heading 1.2.1> 1.", "update_type": "Addition", "update_examples_instruction": "add some"}, "action_explanation": "x"},{"action_type": "New Section Creation", "action_details": {"section_position": "Heading 1> Heading 1.2", "new_section_structure": {"Heading 1.3":{"body": "b", "Examples":["e"]}}}, "action_explanation": "x"},{"action_type": "Merge Section", "action_details": {"section_reference_merged": ["Heading 1> Heading 1.2> Heading 1.2.1", "Heading 1> Heading 1.3"], "section_position": "Heading 1> Heading 1.3", "new_section_structure": {"M":{"body": "m"}}}, "action_explanation": "x"}]}"#).unwrap();
        let (actions, errors) = parse_actions_reply(&reply).unwrap();
        assert!(errors.is_empty());
        let kinds: Vec<_> = actions.iter().map(EditAction::template_kind).collect();
        assert_eq!(
            kinds,
            vec![
                TemplateKind::SectionReorder,
                TemplateKind::SectionRephrase,
                TemplateKind::ExampleUpdate,
                TemplateKind::NewSectionCreation,
                TemplateKind::MergeSection
            ]
        );
        for a in &actions {
            assert_eq!(&EditAction::from_actor_json(&a.to_actor_json(), 0).unwrap(), a);
        }
    }

    #[test]
    fn lenient_type_names() {
        let v = json!({"action_type": "Example Update- Addition", "action_details": {"section_reference": "A> 1.", "update_examples_instruction": "use {x}, {y}"}});
        let a = EditAction::from_actor_json(&v, 0).unwrap();
        match a.op {
            ActionOp::ExampleUpdate {
                update_type,
                resolved_examples,
                ..
            } => {
                assert_eq!(update_type, UpdateType::Addition);
                assert_eq!(resolved_examples.unwrap(), vec!["x", "y"]);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn unknown_type_reported() {
        let v = json!({"actions": [{"action_type": "Teleport"}]});
        let (a, e) = parse_actions_reply(&v).unwrap();
        assert!(a.is_empty());
        assert!(matches!(e[0], ActionParseError::UnknownType { .. }));
    }
}
