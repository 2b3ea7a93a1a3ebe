//! Actor: turns critic feedback into validated edit actions and applies them.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::actions::{
    materialize_examples, parse_actions_reply, validate::validate_with, ActionApplier, ActionOp, ActionParseError,
    ActionRecord, ApplyReport, EditAction, Outcome,
};
use crate::critic::{Reflection, ReflectionGroup};
use crate::gateway::{Gateway, GatewayError, GenerationRequest, RequestTag};
use crate::templates::{self, json_block};
use crate::tree::{induced_subtree, parse_markdown, resolve_path, to_template_json, NodePath, PromptTree, TreeError};

/// Actions beyond this many in one proposal are dropped.
pub const MAX_ACTIONS: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActorError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("actor reply unusable: {0}")]
    Reply(#[from] ActionParseError),
    #[error("rephrased prompt lost class names {0:?}")]
    ClassNamesAltered(Vec<String>),
}

/// Feedback the actor can act on.
#[derive(Debug, Clone, Copy)]
pub enum Critique<'a> {
    Single(&'a Reflection),
    Group(&'a ReflectionGroup),
}

impl<'a> From<&'a Reflection> for Critique<'a> {
    fn from(r: &'a Reflection) -> Self {
        Critique::Single(r)
    }
}

impl<'a> From<&'a ReflectionGroup> for Critique<'a> {
    fn from(g: &'a ReflectionGroup) -> Self {
        Critique::Group(g)
    }
}

impl Critique<'_> {
    fn references(&self) -> Vec<NodePath> {
        match self {
            Critique::Single(r) => r.paths(),
            Critique::Group(g) => g.merged_references.clone(),
        }
    }

    fn feedback(&self) -> Value {
        match self {
            Critique::Single(r) => Value::Array(vec![r.to_actor_feedback(
                r.example_ids.first().map(String::as_str).unwrap_or("structural"),
            )]),
            Critique::Group(g) => g.to_actor_feedback(),
        }
    }
}

/// An action that never reached the update operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedAction {
    /// Position in the actor's reply.
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<EditAction>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Valid actions in emission order, references corrected.
    pub actions: Vec<EditAction>,
    pub dropped: Vec<DroppedAction>,
}

/// Proposal plus what happened when it was applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub proposal: Proposal,
    pub report: ApplyReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub tree: PromptTree,
    pub record: StageRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub tree: PromptTree,
    pub structural: StageRecord,
    pub error: StageRecord,
}

fn correct_references(tree: &PromptTree, action: &mut EditAction) -> Vec<String> {
    let mut notes = Vec::new();
    for p in action.references_mut() {
        if let Ok(r) = resolve_path(tree, p, true) {
            if r.corrected {
                notes.push(format!("`{p}` corrected to `{}`", r.path));
            }
            *p = r.path;
        }
    }
    notes
}

/// Parses and screens an actor reply against the full tree.
pub fn screen_actions(tree: &PromptTree, reply: &Value) -> Result<Proposal, ActorError> {
    let (parsed, errors) = parse_actions_reply(reply)?;
    let mut proposal = Proposal::default();
    for e in errors {
        let index = match e {
            ActionParseError::UnknownType { index, .. } | ActionParseError::MissingField { index, .. } => index,
            ActionParseError::NoActions => 0,
        };
        proposal.dropped.push(DroppedAction {
            index,
            action: None,
            reason: e.to_string(),
        });
    }
    let mut kept = 0;
    for (index, mut action) in parsed.into_iter().enumerate() {
        if kept == MAX_ACTIONS {
            log::warn!("actor proposed more than {MAX_ACTIONS} actions; dropping the rest");
            proposal.dropped.push(DroppedAction {
                index,
                action: Some(action),
                reason: format!("beyond the {MAX_ACTIONS}-action cap"),
            });
            continue;
        }
        for note in correct_references(tree, &mut action) {
            log::debug!("action {index}: {note}");
        }
        match validate_with(tree, &action, true) {
            Ok(()) => {
                kept += 1;
                proposal.actions.push(action);
            }
            Err(v) => proposal.dropped.push(DroppedAction {
                index,
                action: Some(action),
                reason: v.to_string(),
            }),
        }
    }
    proposal.dropped.sort_by_key(|d| d.index);
    Ok(proposal)
}

/// Asks the actor for edits addressing `critique`. Feedback without any
/// references is shown the whole prompt.
pub fn propose_actions<'a>(
    tree: &PromptTree,
    critique: impl Into<Critique<'a>>,
    gateway: &Gateway,
) -> Result<Proposal, ActorError> {
    let critique = critique.into();
    // References come from the tree the critic saw; earlier edits may have
    // moved or renamed some of them.
    let refs: Vec<NodePath> = critique
        .references()
        .into_iter()
        .filter(|p| resolve_path(tree, p, true).is_ok())
        .collect();
    let view = if refs.is_empty() {
        tree.clone()
    } else {
        induced_subtree(tree, &refs, true)?
    };
    let user = format!(
        "{}\n\n{}",
        json_block("Input Prompt", &to_template_json(&view)?),
        json_block("Critic Feedback", &critique.feedback())
    );
    let req = GenerationRequest::new(RequestTag::Actor, templates::ACTOR, user);
    let reply = gateway.generate_json(&req)?;
    screen_actions(tree, &reply)
}

fn example_context(tree: &PromptTree, path: &NodePath) -> String {
    induced_subtree(tree, std::slice::from_ref(path), true)
        .map(|t| t.render())
        .unwrap_or_default()
}

/// Applies a proposal in order, materializing example updates against the
/// tree as it stands when each action runs.
pub fn apply_proposal(tree: &PromptTree, proposal: &Proposal, gateway: &Gateway) -> (PromptTree, ApplyReport) {
    let applier = ActionApplier::default();
    let mut current = tree.clone();
    let mut report = ApplyReport::default();
    for action in &proposal.actions {
        let mut warnings = Vec::new();
        let concrete = match &action.op {
            ActionOp::ExampleUpdate {
                section_reference,
                resolved_examples: None,
                ..
            } => {
                let context = example_context(&current, section_reference);
                match materialize_examples(action, &current, &context, gateway) {
                    Ok(m) => {
                        warnings = m.warnings;
                        m.action
                    }
                    Err(e) => {
                        report.extend(ApplyReport {
                            records: vec![ActionRecord {
                                index: 0,
                                action: action.clone(),
                                canonical_kind: action.canonical_kind(),
                                outcome: Outcome::Skipped { reason: e.to_string() },
                                warnings,
                            }],
                            ..Default::default()
                        });
                        continue;
                    }
                }
            }
            _ => action.clone(),
        };
        let (next, mut part) = applier.apply(&current, std::slice::from_ref(&concrete)).expect("skip policy never fails");
        if let Some(r) = part.records.first_mut() {
            warnings.append(&mut r.warnings);
            r.warnings = warnings;
        }
        current = next;
        report.extend(part);
    }
    (current, report)
}

/// Proposes and applies actions for one critique.
pub fn run_stage<'a>(tree: &PromptTree, critique: impl Into<Critique<'a>>, gateway: &Gateway) -> Result<Stage, ActorError> {
    let proposal = propose_actions(tree, critique, gateway)?;
    let (tree, report) = apply_proposal(tree, &proposal, gateway);
    Ok(Stage {
        tree,
        record: StageRecord { proposal, report },
    })
}

/// Structural edits first, then edits for one reflection group on top.
pub fn expand_candidate(
    tree: &PromptTree,
    structural: &Reflection,
    group: &ReflectionGroup,
    gateway: &Gateway,
) -> Result<Expansion, ActorError> {
    let s = run_stage(tree, structural, gateway)?;
    expand_from_stage(&s, group, gateway)
}

/// Group expansion on top of an already-applied structural stage, so one
/// structural pass can be shared by several groups.
pub fn expand_from_stage(structural: &Stage, group: &ReflectionGroup, gateway: &Gateway) -> Result<Expansion, ActorError> {
    let e = run_stage(&structural.tree, group, gateway)?;
    Ok(Expansion {
        tree: e.tree,
        structural: structural.record.clone(),
        error: e.record,
    })
}

/// Contents of the first fenced block, or the whole reply.
pub fn strip_fence(reply: &str) -> &str {
    let Some(start) = reply.find("```") else {
        return reply.trim();
    };
    let after = &reply[start + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    match body.find("```") {
        Some(end) => body[..end].trim(),
        None => body.trim(),
    }
}

/// Labels from `labels` that appear in `before` but not in `after`.
pub fn missing_labels(before: &str, after: &str, labels: &[String]) -> Vec<String> {
    labels
        .iter()
        .filter(|l| before.contains(l.as_str()) && !after.contains(l.as_str()))
        .cloned()
        .collect()
}

/// Whole-prompt rewrite that must keep every class name the prompt uses.
pub fn rephrase_candidate(tree: &PromptTree, labels: &[String], gateway: &Gateway) -> Result<PromptTree, ActorError> {
    let original = tree.render();
    let user = format!("**Input Prompt**\n\n{original}");
    let req = GenerationRequest::new(RequestTag::Rephrase, templates::REPHRASE, user);
    let reply = gateway.generate(&req)?;
    let text = strip_fence(&reply);
    let missing = missing_labels(&original, text, labels);
    if !missing.is_empty() {
        return Err(ActorError::ClassNamesAltered(missing));
    }
    Ok(parse_markdown(text)?)
}

/// Has the model restructure an unstructured prompt into headed markdown.
pub fn structure_prompt(text: &str, gateway: &Gateway) -> Result<PromptTree, ActorError> {
    let t = templates::structuring();
    let req = GenerationRequest::new(RequestTag::Structuring, t.system, t.user.replace("#InitialPrompt#", text));
    let reply = gateway.generate(&req)?;
    Ok(parse_markdown(strip_fence(&reply))?)
}
