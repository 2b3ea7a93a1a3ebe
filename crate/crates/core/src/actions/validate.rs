use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ActionOp, EditAction, UpdateType, EXAMPLE_CAPACITY};
use crate::tree::{nodes_from_template_json, resolve_path, NodeKind, NodePath, PromptTree, Resolved, BODY_LABEL};

/// Why an action cannot be applied to a tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum Violation {
    #[error("reference `{path}` does not resolve: {reason}")]
    Unresolved { path: String, reason: String },
    #[error("the prompt root cannot be edited directly")]
    RootNotEditable,
    #[error("bare body or examples `{0}` not reorderable")]
    BareNodeNotReorderable(String),
    #[error("reorder across different headings: `{from}` vs `{to}`")]
    CrossHeadingReorder { from: String, to: String },
    #[error("reorder between a heading and a list item: `{from}` vs `{to}`")]
    IncompatibleReorderKinds { from: String, to: String },
    #[error("examples at `{holder}` would hold {count} entries (capacity 6)")]
    CapacityExceeded { holder: String, count: usize },
    #[error("new section structure lacks a `body` key")]
    MissingBody,
    #[error("new section structure is invalid: {0}")]
    InvalidStructure(String),
    #[error("`{0}` cannot hold examples")]
    NoExamplesHolder(String),
    #[error("`{0}` has no examples to delete or rewrite")]
    NoExamplesToEdit(String),
    #[error("merge sources are the same node `{0}`")]
    MergeSourcesIdentical(String),
}

pub(crate) fn resolve(tree: &PromptTree, path: &NodePath, fuzzy: bool) -> Result<Resolved, Violation> {
    resolve_path(tree, path, fuzzy).map_err(|e| Violation::Unresolved {
        path: path.to_string(),
        reason: e.to_string(),
    })
}

/// Node that owns the examples block an ExampleUpdate edits.
pub(crate) fn examples_holder(tree: &PromptTree, r: &Resolved) -> Option<Vec<usize>> {
    if r.item_body {
        return Some(r.indices.clone());
    }
    let node = tree.node(&r.indices)?;
    match node.kind {
        NodeKind::ExamplesBlock | NodeKind::Body => Some(r.indices[..r.indices.len() - 1].to_vec()),
        NodeKind::Heading { .. } | NodeKind::BulletItem | NodeKind::NumberedItem if !r.indices.is_empty() => {
            Some(r.indices.clone())
        }
        _ => None,
    }
}

/// Entries of `new` that are not already present, in order.
pub(crate) fn fresh_entries(existing: &[String], new: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for e in new {
        let e = e.trim();
        if e.is_empty() || existing.iter().any(|x| x == e) || out.iter().any(|x| x == e) {
            continue;
        }
        out.push(e.to_string());
    }
    out
}

pub(crate) fn check_structure(v: &Value) -> Result<(), Violation> {
    let map = v
        .as_object()
        .ok_or_else(|| Violation::InvalidStructure("expected a JSON object".into()))?;
    nodes_from_template_json(v, 0).map_err(|e| Violation::InvalidStructure(e.to_string()))?;
    if map.is_empty() {
        return Err(Violation::InvalidStructure("empty structure".into()));
    }
    let has_body = map.contains_key(BODY_LABEL)
        || map
            .values()
            .all(|section| section.as_object().is_some_and(|s| s.contains_key(BODY_LABEL)));
    if has_body {
        Ok(())
    } else {
        Err(Violation::MissingBody)
    }
}

fn check_reorder(tree: &PromptTree, a: &NodePath, b: &NodePath, fuzzy: bool) -> Result<(), Violation> {
    let ra = resolve(tree, a, fuzzy)?;
    let rb = resolve(tree, b, fuzzy)?;
    for r in [&ra, &rb] {
        if r.indices.is_empty() {
            return Err(Violation::RootNotEditable);
        }
        let node = tree.node(&r.indices).expect("resolved");
        if r.item_body || matches!(node.kind, NodeKind::Body | NodeKind::ExamplesBlock) {
            return Err(Violation::BareNodeNotReorderable(r.path.to_string()));
        }
    }
    if ra.indices[..ra.indices.len() - 1] != rb.indices[..rb.indices.len() - 1] {
        return Err(Violation::CrossHeadingReorder {
            from: ra.path.to_string(),
            to: rb.path.to_string(),
        });
    }
    let ka = tree.node(&ra.indices).unwrap().is_heading();
    let kb = tree.node(&rb.indices).unwrap().is_heading();
    if ka != kb {
        return Err(Violation::IncompatibleReorderKinds {
            from: ra.path.to_string(),
            to: rb.path.to_string(),
        });
    }
    Ok(())
}

pub(crate) fn validate_with(tree: &PromptTree, action: &EditAction, fuzzy: bool) -> Result<(), Violation> {
    match &action.op {
        ActionOp::SectionReorder {
            section_reference,
            new_position,
        } => check_reorder(tree, section_reference, new_position, fuzzy),
        ActionOp::SectionRephrase { section_reference, .. } | ActionOp::DeleteSection { section_reference } => {
            let r = resolve(tree, section_reference, fuzzy)?;
            if r.indices.is_empty() {
                return Err(Violation::RootNotEditable);
            }
            Ok(())
        }
        ActionOp::ExampleUpdate {
            section_reference,
            update_type,
            resolved_examples,
            ..
        } => {
            let r = resolve(tree, section_reference, fuzzy)?;
            let holder = examples_holder(tree, &r).ok_or_else(|| Violation::NoExamplesHolder(r.path.to_string()))?;
            let node = tree.node(&holder).expect("holder exists");
            let existing = node.examples_child().map(|b| b.examples.as_slice()).unwrap_or(&[]);
            let holder_path = tree.path_of(&holder).unwrap_or_default().to_string();
            match update_type {
                UpdateType::Addition => {
                    if let Some(new) = resolved_examples {
                        let count = existing.len() + fresh_entries(existing, new).len();
                        if count > EXAMPLE_CAPACITY {
                            return Err(Violation::CapacityExceeded {
                                holder: holder_path,
                                count,
                            });
                        }
                    }
                    Ok(())
                }
                UpdateType::Deletion | UpdateType::Rewriting => {
                    if existing.is_empty() {
                        Err(Violation::NoExamplesToEdit(holder_path))
                    } else {
                        Ok(())
                    }
                }
            }
        }
        ActionOp::NewSectionCreation {
            section_position,
            new_section_structure,
        } => {
            resolve(tree, section_position, fuzzy)?;
            check_structure(new_section_structure)
        }
        ActionOp::MergeSection {
            section_reference_merged,
            section_position,
            new_section_structure,
        } => {
            resolve(tree, section_position, fuzzy)?;
            let a = resolve(tree, &section_reference_merged[0], fuzzy);
            let b = resolve(tree, &section_reference_merged[1], fuzzy);
            match (&a, &b) {
                (Err(e), Err(_)) => return Err(e.clone()),
                (Ok(x), Ok(y)) if x.indices == y.indices => {
                    return Err(Violation::MergeSourcesIdentical(x.path.to_string()))
                }
                _ => {}
            }
            for r in [a, b].into_iter().flatten() {
                if r.indices.is_empty() {
                    return Err(Violation::RootNotEditable);
                }
            }
            check_structure(new_section_structure)
        }
    }
}

/// Checks an action against the tree with exact path matching.
pub fn validate_action(tree: &PromptTree, action: &EditAction) -> Result<(), Violation> {
    validate_with(tree, action, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::parse_markdown;
    use serde_json::json;

    fn salient_like() -> PromptTree {
        parse_markdown("# Task\nDo it.\n\n# Error Identification\nClasses:\n* a\n* b\n* c\n* d\n* e\n\n# Options\n(A) x").unwrap()
    }

    fn reorder(a: &str, b: &str) -> EditAction {
        EditAction::new(ActionOp::SectionReorder {
            section_reference: a.into(),
            new_position: b.into(),
        })
    }

    #[test]
    fn bare_body_not_reorderable() {
        let t = salient_like();
        assert_eq!(
            validate_action(&t, &reorder("Task> body", "Options")),
            Err(Violation::BareNodeNotReorderable("Task> body".into()))
        );
    }

    #[test]
    fn same_parent_reorder_ok() {
        let t = salient_like();
        assert_eq!(validate_action(&t, &reorder("Error Identification> 1.", "Error Identification> 5.")), Ok(()));
    }

    #[test]
    fn cross_heading_reorder_rejected() {
        let t = parse_markdown("# A\n* x\n\n# Options\n* y").unwrap();
        assert!(matches!(
            validate_action(&t, &reorder("A> 1.", "Options> 1.")),
            Err(Violation::CrossHeadingReorder { .. })
        ));
    }

    #[test]
    fn structure_needs_body() {
        assert_eq!(check_structure(&json!({"New": {"Examples": ["x"]}})), Err(Violation::MissingBody));
        assert_eq!(check_structure(&json!({"New": {"body": "b"}})), Ok(()));
    }

    #[test]
    fn capacity_checked() {
        let t = parse_markdown("# H\n* a\nExamples: {1},{2},{3},{4},{5}").unwrap();
        let add = |n: usize| {
            EditAction::new(ActionOp::ExampleUpdate {
                section_reference: "H> 1.".into(),
                update_type: UpdateType::Addition,
                instruction: String::new(),
                resolved_examples: Some((0..n).map(|i| format!("new {i}")).collect()),
            })
        };
        assert_eq!(validate_action(&t, &add(1)), Ok(()));
        assert!(matches!(validate_action(&t, &add(2)), Err(Violation::CapacityExceeded { count: 7, .. })));
    }
}
