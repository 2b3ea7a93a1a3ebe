//! Critic: structural and error reflections, and their aggregation into
//! groups that each drive one candidate expansion.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, GenerationRequest, RequestTag};
use crate::templates::{self, json_block};
use crate::tree::{digest_text, resolve_path, to_template_json, NodePath, PromptTree, TreeError};

/// Group id of reflections none of whose references resolved.
pub const RESIDUE_GROUP: &str = "residue";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CriticError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("error batch is empty")]
    EmptyBatch,
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("critic reply has an unexpected shape: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReflectionKind {
    Structural,
    Error,
    Cluster,
}

/// A reference after fuzzy resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedRef {
    /// Canonical path in the reflected tree.
    pub path: NodePath,
    /// Text as the critic wrote it.
    pub original: String,
    pub corrected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_analysis: Option<String>,
    #[serde(default)]
    pub prompt_examination: String,
    #[serde(default)]
    pub improvement_suggestions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reflection {
    pub kind: ReflectionKind,
    #[serde(default)]
    pub example_ids: Vec<String>,
    #[serde(default)]
    pub prediction_explanation: Vec<String>,
    pub feedback: Feedback,
    pub references: Vec<ResolvedRef>,
    /// References that could not be resolved, verbatim.
    #[serde(default)]
    pub unresolved: Vec<String>,
}

impl Reflection {
    pub fn paths(&self) -> Vec<NodePath> {
        self.references.iter().map(|r| r.path.clone()).collect()
    }

    pub fn digest(&self) -> String {
        digest_text(&serde_json::to_string(self).expect("reflections serialize"))
    }

    /// The actor template's critic-feedback item shape.
    pub fn to_actor_feedback(&self, id: &str) -> Value {
        let mut explanation = self.prediction_explanation.join("\n");
        if let Some(a) = &self.feedback.prediction_analysis {
            if !explanation.is_empty() {
                explanation.push('\n');
            }
            explanation.push_str(a);
        }
        let mut feedback: Vec<String> = Vec::new();
        if !self.feedback.prompt_examination.is_empty() {
            feedback.push(self.feedback.prompt_examination.clone());
        }
        feedback.extend(self.feedback.improvement_suggestions.iter().cloned());
        json!({
            "id": id,
            "prediction_explanation": explanation,
            "prompt_feedback": feedback,
            "prompt_references": self.references.iter().map(|r| r.path.to_string()).collect::<Vec<_>>()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionGroup {
    pub group_id: String,
    pub members: Vec<Reflection>,
    pub merged_references: Vec<NodePath>,
}

impl ReflectionGroup {
    pub fn is_residue(&self) -> bool {
        self.group_id == RESIDUE_GROUP
    }

    pub fn to_actor_feedback(&self) -> Value {
        Value::Array(
            self.members
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let id = m.example_ids.first().cloned().unwrap_or_else(|| format!("{}#{}", self.group_id, i + 1));
                    m.to_actor_feedback(&id)
                })
                .collect(),
        )
    }
}

/// One misclassified example shown to the critic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    pub input: String,
    pub gold: String,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReflections {
    pub reflections: Vec<Reflection>,
    /// Batch ids the reply did not cover.
    pub uncovered: Vec<String>,
}

fn as_text(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) => Some(s.clone()),
        Value::Null => None,
        Value::Number(n) => Some(n.to_string()),
        other => Some(other.to_string()),
    }
}

fn as_text_list(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => items.iter().filter_map(|i| as_text(Some(i))).collect(),
        Some(Value::String(s)) if !s.trim().is_empty() => vec![s.clone()],
        _ => Vec::new(),
    }
}

/// Accepts a single feedback object, a list of them, or a list of strings.
fn parse_feedback(v: Option<&Value>) -> Feedback {
    let mut fb = Feedback::default();
    let items: Vec<&Value> = match v {
        Some(Value::Array(a)) => a.iter().collect(),
        Some(other) => vec![other],
        None => Vec::new(),
    };
    let mut exams = Vec::new();
    let mut analyses = Vec::new();
    for item in items {
        match item {
            Value::Object(m) => {
                if let Some(a) = as_text(m.get("prediction_analysis")) {
                    analyses.push(a);
                }
                if let Some(e) = as_text(m.get("prompt_examination")) {
                    exams.push(e);
                }
                for key in ["improvement_suggestions", "improvement_suggestion"] {
                    fb.improvement_suggestions.extend(as_text_list(m.get(key)));
                }
            }
            Value::String(s) => fb.improvement_suggestions.push(s.clone()),
            _ => {}
        }
    }
    fb.prompt_examination = exams.join("\n");
    fb.prediction_analysis = (!analyses.is_empty()).then(|| analyses.join("\n"));
    fb
}

/// Fuzzy-resolves reference strings against `tree`, deduplicating by
/// canonical path.
pub fn resolve_references(tree: &PromptTree, raw: &[String]) -> (Vec<ResolvedRef>, Vec<String>) {
    let mut seen = HashSet::new();
    let mut refs = Vec::new();
    let mut unresolved = Vec::new();
    for original in raw {
        let path = NodePath::parse(original);
        if path.is_empty() {
            continue;
        }
        match resolve_path(tree, &path, true) {
            Ok(r) => {
                if seen.insert(r.path.clone()) {
                    refs.push(ResolvedRef {
                        path: r.path,
                        original: original.clone(),
                        corrected: r.corrected,
                    });
                }
            }
            Err(e) => {
                log::warn!("dropping unresolvable reference `{original}`: {e}");
                unresolved.push(original.clone());
            }
        }
    }
    (refs, unresolved)
}

fn prompt_block(tree: &PromptTree) -> Result<String, CriticError> {
    Ok(json_block("Input Prompt", &to_template_json(tree)?))
}

fn batch_block(tree: &PromptTree, batch: &[BatchItem]) -> String {
    let data: Vec<Value> = batch
        .iter()
        .map(|b| json!({"id": b.id, "input": b.input, "prediction": b.prediction, "ground_truth": b.gold}))
        .collect();
    json_block("Batch Evaluations", &json!({"prompt": tree.render(), "input_data": data}))
}

/// Prompt-wide critique of structure, clarity and completeness.
pub fn structural_reflection(tree: &PromptTree, gateway: &Gateway) -> Result<Reflection, CriticError> {
    let req = GenerationRequest::new(RequestTag::CriticStructural, templates::CRITIC_PRELIMINARY, prompt_block(tree)?);
    let value = gateway.generate_json(&req)?;
    parse_structural(tree, &value)
}

pub fn parse_structural(tree: &PromptTree, value: &Value) -> Result<Reflection, CriticError> {
    let obj = value
        .as_object()
        .ok_or_else(|| CriticError::Malformed("expected an object with `prompt_feedback`".into()))?;
    let (references, unresolved) = resolve_references(tree, &as_text_list(obj.get("prompt_references")));
    Ok(Reflection {
        kind: ReflectionKind::Structural,
        example_ids: Vec::new(),
        prediction_explanation: Vec::new(),
        feedback: parse_feedback(obj.get("prompt_feedback")),
        references,
        unresolved,
    })
}

fn reply_items(value: &Value) -> Result<Vec<&Value>, CriticError> {
    match value {
        Value::Array(a) => Ok(a.iter().collect()),
        Value::Object(m) => match m.values().find_map(Value::as_array) {
            Some(a) if !m.contains_key("prompt_feedback") => Ok(a.iter().collect()),
            _ => Ok(vec![value]),
        },
        _ => Err(CriticError::Malformed("expected a list of reflections".into())),
    }
}

/// One request covering the whole batch of misclassified examples.
pub fn error_reflections(tree: &PromptTree, batch: &[BatchItem], gateway: &Gateway) -> Result<ErrorReflections, CriticError> {
    if batch.is_empty() {
        return Err(CriticError::EmptyBatch);
    }
    let user = format!("{}\n\n{}", prompt_block(tree)?, batch_block(tree, batch));
    let req = GenerationRequest::new(RequestTag::CriticError, templates::CRITIC_ERROR, user);
    let value = gateway.generate_json(&req)?;
    parse_error_reflections(tree, batch, &value)
}

pub fn parse_error_reflections(tree: &PromptTree, batch: &[BatchItem], value: &Value) -> Result<ErrorReflections, CriticError> {
    let known: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
    let mut covered = BTreeSet::new();
    let mut reflections = Vec::new();
    for item in reply_items(value)? {
        let Some(obj) = item.as_object() else { continue };
        let Some(id) = as_text(obj.get("id")) else {
            log::warn!("error reflection without id dropped");
            continue;
        };
        if !known.contains(&id.as_str()) {
            log::warn!("error reflection for unknown id `{id}` dropped");
            continue;
        }
        covered.insert(id.clone());
        let (references, unresolved) = resolve_references(tree, &as_text_list(obj.get("prompt_references")));
        reflections.push(Reflection {
            kind: ReflectionKind::Error,
            example_ids: vec![id],
            prediction_explanation: as_text_list(obj.get("prediction_explanation")),
            feedback: parse_feedback(obj.get("prompt_feedback")),
            references,
            unresolved,
        });
    }
    let uncovered = known.iter().filter(|id| !covered.contains(**id)).map(|s| s.to_string()).collect();
    Ok(ErrorReflections { reflections, uncovered })
}

/// Groups reflections by every node they reference; reflections without
/// resolved references form a trailing residue group.
pub fn aggregate_node_based(reflections: &[Reflection]) -> Vec<ReflectionGroup> {
    let mut order: Vec<NodePath> = Vec::new();
    let mut members: BTreeMap<NodePath, Vec<usize>> = BTreeMap::new();
    let mut residue = Vec::new();
    for (i, r) in reflections.iter().enumerate() {
        let paths: BTreeSet<NodePath> = r.paths().into_iter().collect();
        if paths.is_empty() {
            residue.push(i);
        }
        for p in r.paths() {
            if !paths.contains(&p) {
                continue;
            }
            let m = members.entry(p.clone()).or_insert_with(|| {
                order.push(p.clone());
                Vec::new()
            });
            if m.last() != Some(&i) {
                m.push(i);
            }
        }
    }
    let build = |group_id: String, idx: &[usize]| {
        let mut merged = Vec::new();
        for &i in idx {
            for p in reflections[i].paths() {
                if !merged.contains(&p) {
                    merged.push(p);
                }
            }
        }
        ReflectionGroup {
            group_id,
            members: idx.iter().map(|&i| reflections[i].clone()).collect(),
            merged_references: merged,
        }
    };
    let mut groups: Vec<ReflectionGroup> = order.iter().map(|p| build(p.to_string(), &members[p])).collect();
    if !residue.is_empty() {
        groups.push(build(RESIDUE_GROUP.to_string(), &residue));
    }
    groups
}

/// Keeps the `g` groups with the most members (ties: earliest), in their
/// original order.
pub fn cap_groups(groups: Vec<ReflectionGroup>, g: usize) -> Vec<ReflectionGroup> {
    if groups.len() <= g {
        return groups;
    }
    let mut ranked: Vec<usize> = (0..groups.len()).collect();
    ranked.sort_by(|&a, &b| groups[b].members.len().cmp(&groups[a].members.len()).then(a.cmp(&b)));
    let keep: BTreeSet<usize> = ranked.into_iter().take(g).collect();
    log::info!("capping {} reflection groups to {g}", groups.len());
    groups.into_iter().enumerate().filter(|(i, _)| keep.contains(i)).map(|(_, g)| g).collect()
}

/// Lets the critic cluster the batch's feedback into at most `g` groups.
pub fn aggregate_pattern_based(
    tree: &PromptTree,
    batch: &[BatchItem],
    g: usize,
    gateway: &Gateway,
) -> Result<Vec<ReflectionGroup>, CriticError> {
    if g == 0 {
        return Err(CriticError::ZeroClusters);
    }
    if batch.is_empty() {
        return Err(CriticError::EmptyBatch);
    }
    let user = format!("{}\n\n{}", prompt_block(tree)?, batch_block(tree, batch));
    let req = GenerationRequest::new(RequestTag::CriticCluster, templates::critic_cluster(g), user);
    let value = gateway.generate_json(&req)?;
    parse_clusters(tree, &value, g)
}

pub fn parse_clusters(tree: &PromptTree, value: &Value, g: usize) -> Result<Vec<ReflectionGroup>, CriticError> {
    let mut items = reply_items(value)?;
    if items.len() > g {
        log::warn!("critic returned {} clusters; keeping the first {g}", items.len());
        items.truncate(g);
    }
    Ok(items
        .into_iter()
        .filter_map(Value::as_object)
        .enumerate()
        .map(|(i, obj)| {
            let (references, unresolved) = resolve_references(tree, &as_text_list(obj.get("prompt_references")));
            let member = Reflection {
                kind: ReflectionKind::Cluster,
                example_ids: Vec::new(),
                prediction_explanation: as_text_list(obj.get("prediction_explanation")),
                feedback: parse_feedback(obj.get("prompt_feedback")),
                references,
                unresolved,
            };
            ReflectionGroup {
                group_id: format!("cluster_{}", i + 1),
                merged_references: member.paths(),
                members: vec![member],
            }
        })
        .collect())
}
