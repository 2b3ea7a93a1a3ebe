use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::validate::{examples_holder, fresh_entries, validate_with, Violation};
use super::{ActionError, ActionOp, CanonicalKind, EditAction, KindHistogram, UpdateType, EXAMPLE_CAPACITY};
use crate::tree::parse::{find_brace_groups, parse_example_entries};
use crate::tree::{
    nodes_from_template_json, resolve_path, NodeKind, NodePath, PromptNode, PromptTree, BODY_LABEL, EXAMPLES_LABEL,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Record failing actions and keep going.
    #[default]
    SkipInvalid,
    /// Stop at the first failing action.
    FailFast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Applied { touched: Vec<NodePath> },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub index: usize,
    pub action: EditAction,
    pub canonical_kind: CanonicalKind,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ActionRecord {
    pub fn is_applied(&self) -> bool {
        matches!(self.outcome, Outcome::Applied { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub records: Vec<ActionRecord>,
    /// Applied actions only.
    pub histogram: KindHistogram,
}

impl ApplyReport {
    pub fn applied_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_applied()).count()
    }

    /// Distinct touched paths over all applied actions, in first-seen order.
    pub fn touched_paths(&self) -> Vec<NodePath> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if let Outcome::Applied { touched } = &r.outcome {
                for p in touched {
                    if seen.insert(p.clone()) {
                        out.push(p.clone());
                    }
                }
            }
        }
        out
    }

    /// Appends another report's records, renumbering them after ours.
    pub fn extend(&mut self, other: ApplyReport) {
        let offset = self.records.len();
        for mut r in other.records {
            r.index += offset;
            self.records.push(r);
        }
        self.histogram.merge(&other.histogram);
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("action {failed_index} failed: {error}")]
pub struct ApplyFailure {
    pub failed_index: usize,
    pub error: ActionError,
    /// Records of the actions processed before the failure.
    pub report: Box<ApplyReport>,
}

/// Configured update operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionApplier {
    pub policy: Policy,
    /// Fuzzy-correct references against the current tree.
    pub fuzzy: bool,
    /// Clamp over-full example additions instead of failing them.
    pub clamp_capacity: bool,
}

impl Default for ActionApplier {
    fn default() -> Self {
        Self {
            policy: Policy::SkipInvalid,
            fuzzy: true,
            clamp_capacity: true,
        }
    }
}

/// Result of one successful application.
struct Applied {
    tree: PromptTree,
    touched: Vec<NodePath>,
    warnings: Vec<String>,
}

fn tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn jaccard(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

fn strip_bullet(s: &str) -> String {
    let s = s.trim();
    s.strip_prefix("* ").or_else(|| s.strip_prefix("- ")).unwrap_or(s).to_string()
}

fn parent_of(indices: &[usize]) -> &[usize] {
    &indices[..indices.len() - 1]
}

fn node_mut<'a>(root: &'a mut PromptNode, indices: &[usize]) -> &'a mut PromptNode {
    root.get_mut(indices).expect("indices were resolved against this tree")
}

/// Inserts `nodes` into `parent` near `at`, keeping canonical child order and
/// hoisting out of list items. Returns the indices of the nodes placed.
fn insert_nodes(root: &mut PromptNode, parent: &[usize], at: usize, nodes: Vec<PromptNode>) -> Vec<Vec<usize>> {
    let mut parent = parent.to_vec();
    let mut at = at;
    while root.get(&parent).is_some_and(PromptNode::is_list_item) {
        at = parent.pop().expect("items are never the root") + 1;
    }
    let p = node_mut(root, &parent);
    let level = p.level().unwrap_or(0);
    let mut placed = Vec::new();
    for mut node in nodes {
        match node.kind {
            NodeKind::Body if p.body_child().is_some() => {
                let i = p.children.iter().position(|c| c.kind == NodeKind::Body).unwrap();
                let body = &mut p.children[i];
                body.content.push('\n');
                body.content.push_str(&node.content);
                placed.push(i);
                continue;
            }
            NodeKind::ExamplesBlock if p.examples_child().is_some() => {
                let i = p.examples_child_index().unwrap();
                let block = &mut p.children[i];
                let fresh = fresh_entries(&block.examples, &node.examples);
                block.examples.extend(fresh);
                placed.push(i);
                continue;
            }
            NodeKind::Heading { .. } => node.relevel(level + 1),
            _ => {}
        }
        let class = node.kind.order_class();
        let lo = p.children.iter().filter(|c| c.kind.order_class() < class).count();
        let hi = p.children.iter().filter(|c| c.kind.order_class() <= class).count();
        let idx = at.clamp(lo, hi);
        for q in placed.iter_mut().filter(|q| **q >= idx) {
            *q += 1;
        }
        p.children.insert(idx, node);
        placed.push(idx);
        at = idx + 1;
    }
    placed.dedup();
    placed
        .into_iter()
        .map(|i| {
            let mut v = parent.clone();
            v.push(i);
            v
        })
        .collect()
}

fn set_examples(holder: &mut PromptNode, entries: Vec<String>) {
    match holder.examples_child_index() {
        Some(i) if entries.is_empty() => {
            holder.children.remove(i);
        }
        Some(i) => holder.children[i].examples = entries,
        None if entries.is_empty() => {}
        None => {
            let at = holder.children.iter().filter(|c| c.kind == NodeKind::Body).count();
            holder.children.insert(at, PromptNode::examples(entries));
        }
    }
}

enum Anchor {
    After(Vec<usize>),
    Slot(Vec<usize>),
}

impl Anchor {
    /// Re-targets the anchor after the subtree at `removed` is deleted.
    fn shift(self, removed: &[usize]) -> Anchor {
        let (path, after) = match self {
            Anchor::After(p) => (p, true),
            Anchor::Slot(p) => (p, false),
        };
        if path.starts_with(removed) {
            return Anchor::Slot(removed.to_vec());
        }
        let mut path = path;
        let d = removed.len() - 1;
        if path.len() > d && path[..d] == removed[..d] && path[d] > removed[d] {
            path[d] -= 1;
        }
        if after {
            Anchor::After(path)
        } else {
            Anchor::Slot(path)
        }
    }

    fn insert(self, root: &mut PromptNode, nodes: Vec<PromptNode>) -> Vec<Vec<usize>> {
        match self {
            Anchor::After(p) => insert_nodes(root, parent_of(&p), p[p.len() - 1] + 1, nodes),
            Anchor::Slot(p) => insert_nodes(root, parent_of(&p), p[p.len() - 1], nodes),
        }
    }
}

impl ActionApplier {
    pub fn strict() -> Self {
        Self {
            policy: Policy::FailFast,
            fuzzy: false,
            clamp_capacity: false,
        }
    }

    fn resolve(&self, tree: &PromptTree, path: &NodePath) -> Result<crate::tree::Resolved, ActionError> {
        Ok(resolve_path(tree, path, self.fuzzy)?)
    }

    fn apply_one(&self, tree: &PromptTree, action: &EditAction) -> Result<Applied, ActionError> {
        let mut warnings = Vec::new();
        let is_merge = matches!(action.op, ActionOp::MergeSection { .. });
        match validate_with(tree, action, self.fuzzy) {
            Ok(()) => {}
            Err(Violation::CapacityExceeded { holder, count }) if self.clamp_capacity => {
                warnings.push(format!("examples at `{holder}` clamped from {count} to {EXAMPLE_CAPACITY}"));
            }
            Err(Violation::CapacityExceeded { holder, count }) => {
                return Err(ActionError::CapacityExceeded { holder, count })
            }
            Err(Violation::Unresolved { path, reason }) if is_merge => {
                return Err(ActionError::MergeTargetMissing(format!("{path}: {reason}")))
            }
            Err(Violation::Unresolved { path, .. }) => {
                // Surface the underlying path error.
                return Err(match resolve_path(tree, &NodePath::parse(&path), self.fuzzy) {
                    Err(e) => ActionError::Path(e),
                    Ok(_) => ActionError::InvalidPayload(format!("unresolvable `{path}`")),
                });
            }
            Err(v) => return Err(ActionError::Invalid(v)),
        }

        let mut out = tree.clone();
        let touched: Vec<NodePath> = match &action.op {
            ActionOp::SectionReorder {
                section_reference,
                new_position,
            } => {
                let from = self.resolve(tree, section_reference)?.indices;
                let to = self.resolve(tree, new_position)?.indices;
                let parent = parent_of(&from);
                let (i, j) = (from[from.len() - 1], to[to.len() - 1]);
                let p = node_mut(&mut out.root, parent);
                let node = p.children.remove(i);
                p.children.insert(j, node);
                let mut moved = parent.to_vec();
                moved.push(j);
                vec![out.path_of(&moved).expect("moved node exists")]
            }
            ActionOp::SectionRephrase {
                section_reference,
                updated_key,
                updated_value,
            } => {
                let r = self.resolve(tree, section_reference)?;
                let value = updated_value.trim().to_string();
                let node = node_mut(&mut out.root, &r.indices);
                match node.kind {
                    _ if r.item_body || node.is_list_item() => node.content = strip_bullet(&value),
                    NodeKind::Body => node.content = value,
                    NodeKind::ExamplesBlock => {
                        let entries = parse_example_entries(value.strip_prefix("Examples:").unwrap_or(&value))
                            .unwrap_or_else(|| find_brace_groups(&value));
                        if entries.is_empty() {
                            return Err(ActionError::InvalidPayload("rephrased examples hold no `{...}` entries".into()));
                        }
                        node.examples = entries;
                    }
                    NodeKind::Heading { .. } => {
                        let key = updated_key.trim();
                        let reserved = key.is_empty() || key == BODY_LABEL || key == EXAMPLES_LABEL;
                        if !reserved && key != node.title {
                            warnings.push(format!("heading `{}` renamed to `{key}`", node.title));
                            node.title = key.to_string();
                        }
                        match node.children.iter_mut().find(|c| c.kind == NodeKind::Body) {
                            Some(b) => b.content = value,
                            None if !value.is_empty() => node.children.insert(0, PromptNode::body(value)),
                            None => {}
                        }
                    }
                    _ => unreachable!("list items handled above"),
                }
                vec![out.path_of(&r.indices).expect("rephrased node exists")]
            }
            ActionOp::ExampleUpdate {
                section_reference,
                update_type,
                resolved_examples,
                ..
            } => {
                let r = self.resolve(tree, section_reference)?;
                let holder_idx = examples_holder(tree, &r)
                    .ok_or_else(|| ActionError::Invalid(Violation::NoExamplesHolder(r.path.to_string())))?;
                let holder_path = tree.path_of(&holder_idx).unwrap_or_default();
                let requested = resolved_examples
                    .as_ref()
                    .ok_or_else(|| ActionError::ExamplesUnresolved(r.path.to_string()))?;
                let holder = node_mut(&mut out.root, &holder_idx);
                let mut entries = holder.examples_child().map(|b| b.examples.clone()).unwrap_or_default();
                match update_type {
                    UpdateType::Addition => {
                        let mut fresh = fresh_entries(&entries, requested);
                        let room = EXAMPLE_CAPACITY.saturating_sub(entries.len());
                        if fresh.len() > room {
                            if !self.clamp_capacity {
                                return Err(ActionError::CapacityExceeded {
                                    holder: holder_path.to_string(),
                                    count: entries.len() + fresh.len(),
                                });
                            }
                            fresh.truncate(room);
                        }
                        if fresh.is_empty() {
                            warnings.push("no new examples to add".into());
                        }
                        entries.extend(fresh);
                    }
                    UpdateType::Deletion => {
                        let mut doomed = BTreeSet::new();
                        for want in requested {
                            let want = want.trim();
                            let hit = entries
                                .iter()
                                .position(|e| e == want)
                                .or_else(|| entries.iter().position(|e| e.trim().eq_ignore_ascii_case(want)))
                                .or_else(|| {
                                    want.trim_start_matches('#')
                                        .parse::<usize>()
                                        .ok()
                                        .filter(|n| (1..=entries.len()).contains(n))
                                        .map(|n| n - 1)
                                });
                            match hit {
                                Some(i) => {
                                    doomed.insert(i);
                                }
                                None => warnings.push(format!("no example matches `{want}`")),
                            }
                        }
                        if doomed.is_empty() {
                            return Err(ActionError::InvalidPayload("no listed example matched".into()));
                        }
                        entries = entries
                            .into_iter()
                            .enumerate()
                            .filter(|(i, _)| !doomed.contains(i))
                            .map(|(_, e)| e)
                            .collect();
                    }
                    UpdateType::Rewriting => {
                        let mut replaced = BTreeSet::new();
                        for new in requested {
                            let best = (0..entries.len())
                                .filter(|i| !replaced.contains(i))
                                .map(|i| (i, jaccard(&entries[i], new)))
                                .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
                                    Some((_, bs)) if bs >= s => acc,
                                    _ => Some((i, s)),
                                });
                            match best {
                                Some((i, _)) => {
                                    entries[i] = new.trim().to_string();
                                    replaced.insert(i);
                                }
                                None => warnings.push(format!("no example left to rewrite for `{new}`")),
                            }
                        }
                    }
                }
                set_examples(holder, entries);
                vec![holder_path.join(EXAMPLES_LABEL)]
            }
            ActionOp::DeleteSection { section_reference } => {
                let r = self.resolve(tree, section_reference)?;
                let path = tree.path_of(&r.indices).expect("resolved");
                node_mut(&mut out.root, parent_of(&r.indices)).children.remove(r.indices[r.indices.len() - 1]);
                vec![path]
            }
            ActionOp::NewSectionCreation {
                section_position,
                new_section_structure,
            } => {
                let r = self.resolve(tree, section_position)?;
                let nodes = nodes_from_template_json(new_section_structure, 0)?;
                let placed = Anchor::After(r.indices).insert(&mut out.root, nodes);
                placed.iter().filter_map(|p| out.path_of(p)).collect()
            }
            ActionOp::MergeSection {
                section_reference_merged,
                section_position,
                new_section_structure,
            } => {
                let pos = self
                    .resolve(tree, section_position)
                    .map_err(|e| ActionError::MergeTargetMissing(e.to_string()))?;
                let mut sources = Vec::new();
                for s in section_reference_merged {
                    match self.resolve(tree, s) {
                        Ok(r) => sources.push(r.indices),
                        Err(e) => warnings.push(format!("merge source `{s}` missing ({e}); inserting only")),
                    }
                }
                if sources.is_empty() {
                    return Err(ActionError::MergeTargetMissing("both merge sources are missing".into()));
                }
                let nodes = nodes_from_template_json(new_section_structure, 0)?;
                sources.sort();
                sources.dedup();
                let mut touched: Vec<NodePath> = sources.iter().filter_map(|s| tree.path_of(s)).collect();
                let mut anchor = Anchor::After(pos.indices);
                for s in sources.iter().rev() {
                    // A source nested in an already removed one is gone too.
                    if out.root.get(s).is_none() {
                        continue;
                    }
                    node_mut(&mut out.root, parent_of(s)).children.remove(s[s.len() - 1]);
                    anchor = anchor.shift(s);
                }
                let placed = anchor.insert(&mut out.root, nodes);
                touched.extend(placed.iter().filter_map(|p| out.path_of(p)));
                touched
            }
        };
        let tree = PromptTree::from_root(out.root);
        Ok(Applied {
            tree,
            touched,
            warnings,
        })
    }

    /// Applies a single action, returning the new tree plus touched paths
    /// and warnings.
    pub fn apply_action(
        &self,
        tree: &PromptTree,
        action: &EditAction,
    ) -> Result<(PromptTree, Vec<NodePath>, Vec<String>), ActionError> {
        self.apply_one(tree, action).map(|a| (a.tree, a.touched, a.warnings))
    }

    /// Applies `actions` in order against the progressively updated tree.
    pub fn apply(&self, tree: &PromptTree, actions: &[EditAction]) -> Result<(PromptTree, ApplyReport), ApplyFailure> {
        let mut current = tree.clone();
        let mut report = ApplyReport::default();
        for (index, action) in actions.iter().enumerate() {
            let canonical_kind = action.canonical_kind();
            match self.apply_one(&current, action) {
                Ok(applied) => {
                    for w in &applied.warnings {
                        log::warn!("action {index}: {w}");
                    }
                    current = applied.tree;
                    report.histogram.add(canonical_kind);
                    report.records.push(ActionRecord {
                        index,
                        action: action.clone(),
                        canonical_kind,
                        outcome: Outcome::Applied {
                            touched: applied.touched,
                        },
                        warnings: applied.warnings,
                    });
                }
                Err(error) if self.policy == Policy::FailFast => {
                    return Err(ApplyFailure {
                        failed_index: index,
                        error,
                        report: Box::new(report),
                    })
                }
                Err(error) => {
                    log::info!("action {index} skipped: {error}");
                    report.records.push(ActionRecord {
                        index,
                        action: action.clone(),
                        canonical_kind,
                        outcome: Outcome::Skipped {
                            reason: error.to_string(),
                        },
                        warnings: Vec::new(),
                    });
                }
            }
        }
        Ok((current, report))
    }
}

/// Applies one action with exact paths and no capacity clamping.
pub fn apply_action(tree: &PromptTree, action: &EditAction) -> Result<PromptTree, ActionError> {
    ActionApplier::strict().apply_action(tree, action).map(|(t, _, _)| t)
}

/// Applies an ordered action list with fuzzy references and capacity
/// clamping, under `policy`.
pub fn apply_actions(
    tree: &PromptTree,
    actions: &[EditAction],
    policy: Policy,
) -> Result<(PromptTree, ApplyReport), ApplyFailure> {
    ActionApplier {
        policy,
        ..ActionApplier::default()
    }
    .apply(tree, actions)
}
