use super::validate::{examples_holder, fresh_entries};
use super::{ActionError, ActionOp, EditAction, UpdateType, EXAMPLE_CAPACITY};
use crate::gateway::{Gateway, GenerationRequest, RequestTag};
use crate::tree::parse::find_brace_groups;
use crate::tree::{render_examples_line, resolve_path, PromptTree};

const SYSTEM: &str = "You write concrete examples for one section of a task prompt. \
Reply with the examples only, each enclosed in curly braces and separated by a comma, \
for example: {first example}, {second example}";

#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub action: EditAction,
    pub warnings: Vec<String>,
}

fn request(context: &str, existing: &[String], update_type: UpdateType, instruction: &str, limit: usize) -> GenerationRequest {
    let existing_line = if existing.is_empty() {
        "Existing examples: none".to_string()
    } else {
        format!("Existing {}", render_examples_line(existing))
    };
    let ask = match update_type {
        UpdateType::Addition => format!("Return at most {limit} new examples."),
        UpdateType::Deletion => "Return the existing examples to remove, copied exactly.".to_string(),
        UpdateType::Rewriting => "Return the rewritten examples, one per example being replaced.".to_string(),
    };
    let user = format!(
        "Section:\n{context}\n\n{existing_line}\n\nInstruction ({}): {instruction}\n\n{ask}",
        update_type.wire_name()
    );
    GenerationRequest::new(RequestTag::ExampleMaterialize, SYSTEM, user)
}

/// Turns an example-update instruction into concrete entries.
///
/// Actions that already carry entries (or are not example updates) pass
/// through unchanged. Additions are clamped to the block's remaining room.
pub fn materialize_examples(
    action: &EditAction,
    tree: &PromptTree,
    context: &str,
    gateway: &Gateway,
) -> Result<Materialized, ActionError> {
    let ActionOp::ExampleUpdate {
        section_reference,
        update_type,
        instruction,
        resolved_examples: None,
    } = &action.op
    else {
        return Ok(Materialized {
            action: action.clone(),
            warnings: Vec::new(),
        });
    };
    let r = resolve_path(tree, section_reference, true)?;
    let existing: Vec<String> = examples_holder(tree, &r)
        .and_then(|h| tree.node(&h))
        .and_then(|n| n.examples_child())
        .map(|b| b.examples.clone())
        .unwrap_or_default();
    let mut warnings = Vec::new();
    let room = EXAMPLE_CAPACITY.saturating_sub(existing.len());

    let resolved = match update_type {
        UpdateType::Addition if room == 0 => {
            warnings.push(format!("examples at `{}` are full; nothing added (capacity exceeded)", r.path));
            Vec::new()
        }
        UpdateType::Deletion if existing.iter().any(|e| instruction.contains(e.as_str())) => {
            existing.iter().filter(|e| instruction.contains(e.as_str())).cloned().collect()
        }
        _ => {
            let reply = gateway.generate(&request(context, &existing, *update_type, instruction, room))?;
            let groups = find_brace_groups(&reply);
            if groups.is_empty() {
                return Err(ActionError::GenerationUnparseable);
            }
            if *update_type == UpdateType::Addition {
                let mut fresh = fresh_entries(&existing, &groups);
                if fresh.len() > room {
                    warnings.push(format!(
                        "{} generated examples clamped to {room} (capacity exceeded)",
                        fresh.len()
                    ));
                    fresh.truncate(room);
                }
                fresh
            } else {
                groups
            }
        }
    };
    let mut out = action.clone();
    if let ActionOp::ExampleUpdate { resolved_examples, .. } = &mut out.op {
        *resolved_examples = Some(resolved);
    }
    Ok(Materialized { action: out, warnings })
}
