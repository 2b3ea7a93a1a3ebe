use std::sync::OnceLock;

use regex::Regex;
use serde_json::{Map, Value};

use super::parse::{find_brace_groups, parse_example_entries};
use super::{NodeKind, PromptNode, PromptTree, TreeError, BODY_LABEL, EXAMPLES_LABEL};

fn item_key_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d+\.(#\d+)?$").unwrap())
}

fn dup_suffix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.*)#(\d+)$").unwrap())
}

fn node_map(node: &PromptNode, parent_label: &str) -> Result<Map<String, Value>, TreeError> {
    let mut map = Map::new();
    if node.is_list_item() {
        map.insert(BODY_LABEL.into(), Value::String(node.content.clone()));
    }
    for (child, label) in node.children.iter().zip(node.child_labels()) {
        // Headings whose titles read back as reserved keys cannot be mapped.
        let reserved = child.is_heading()
            && (child.title == BODY_LABEL || child.title == EXAMPLES_LABEL || item_key_re().is_match(&child.title));
        if reserved || map.contains_key(&label) {
            return Err(TreeError::DuplicateSiblingTitle {
                parent: parent_label.to_string(),
                title: child.title.clone(),
            });
        }
        let value = match child.kind {
            NodeKind::Body => Value::String(child.content.clone()),
            NodeKind::ExamplesBlock => {
                Value::Array(child.examples.iter().cloned().map(Value::String).collect())
            }
            _ => Value::Object(node_map(child, &label)?),
        };
        map.insert(label, value);
    }
    Ok(map)
}

/// Nested-mapping form consumed by the critic and actor templates.
///
/// Headings become keys, prose sits under `"body"`, example blocks under
/// `"Examples"`, and list items under `"1."`, `"2."`, ... in sibling order.
pub fn to_template_json(tree: &PromptTree) -> Result<Value, TreeError> {
    node_map(&tree.root, "").map(Value::Object)
}

fn text_value(v: &Value) -> Result<String, TreeError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => Ok(s.clone()),
                other => Ok(other.to_string()),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|lines| lines.join("\n")),
        Value::Null => Ok(String::new()),
        other => Ok(other.to_string()),
    }
}

fn examples_value(v: &Value) -> Result<Vec<String>, TreeError> {
    let entries: Vec<String> = match v {
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => s.trim().to_string(),
                other => other.to_string(),
            })
            .filter(|s| !s.is_empty())
            .collect(),
        Value::String(s) => parse_example_entries(s)
            .unwrap_or_else(|| find_brace_groups(s))
            .into_iter()
            .collect(),
        _ => {
            return Err(TreeError::InvalidTemplate(
                "`Examples` must be a list of strings".into(),
            ))
        }
    };
    Ok(entries)
}

fn strip_dup_suffix(key: &str) -> &str {
    match dup_suffix_re().captures(key) {
        Some(c) if c[2].parse::<usize>().is_ok_and(|n| n >= 2) => c.get(1).unwrap().as_str(),
        _ => key,
    }
}

fn item_from(value: &Value) -> Result<PromptNode, TreeError> {
    match value {
        Value::Object(map) => {
            let mut item = PromptNode::bullet(map.get(BODY_LABEL).map(text_value).transpose()?.unwrap_or_default());
            if let Some(ex) = map.get(EXAMPLES_LABEL) {
                let entries = examples_value(ex)?;
                if !entries.is_empty() {
                    item.children.push(PromptNode::examples(entries));
                }
            }
            Ok(item)
        }
        other => Ok(PromptNode::bullet(text_value(other)?)),
    }
}

fn children_from(map: &Map<String, Value>, level: u8) -> Result<Vec<PromptNode>, TreeError> {
    let mut out = Vec::new();
    for (key, value) in map {
        let node = if key == BODY_LABEL {
            PromptNode::body(text_value(value)?)
        } else if key == EXAMPLES_LABEL {
            let entries = examples_value(value)?;
            if entries.is_empty() {
                continue;
            }
            PromptNode::examples(entries)
        } else if item_key_re().is_match(key) {
            item_from(value)?
        } else {
            heading_from(strip_dup_suffix(key), value, level)?
        };
        out.push(node);
    }
    out.sort_by_key(|n| n.kind.order_class());
    Ok(out)
}

fn heading_from(title: &str, value: &Value, level: u8) -> Result<PromptNode, TreeError> {
    let mut heading = PromptNode::heading(level, title);
    match value {
        Value::Object(map) => heading.children = children_from(map, level.saturating_add(1))?,
        Value::Null => {}
        other => {
            let text = text_value(other)?;
            if !text.is_empty() {
                heading.children.push(PromptNode::body(text));
            }
        }
    }
    Ok(heading)
}

/// Materializes a mapping (as produced by [`to_template_json`] or by the
/// actor's `new_section_structure`) into nodes whose headings sit at
/// `parent_level + 1`.
pub fn nodes_from_template_json(value: &Value, parent_level: u8) -> Result<Vec<PromptNode>, TreeError> {
    match value {
        Value::Object(map) => children_from(map, parent_level.saturating_add(1)),
        _ => Err(TreeError::InvalidTemplate("expected a JSON object".into())),
    }
}

/// Inverse of [`to_template_json`]. List items come back as bullets.
pub fn from_template_json(value: &Value) -> Result<PromptTree, TreeError> {
    let mut root = PromptNode::root();
    root.children = nodes_from_template_json(value, 0)?;
    Ok(PromptTree::from_root(root))
}
