use std::collections::BTreeSet;

use super::{NodePath, PromptNode, PromptTree, TreeError, BODY_LABEL};

/// Maximum normalized edit distance accepted for a fuzzy segment match.
pub const FUZZY_THRESHOLD: f64 = 0.34;

/// A path bound to one node of a specific tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    /// Child indices from the root.
    pub indices: Vec<usize>,
    /// Canonical path of the resolved node.
    pub path: NodePath,
    /// At least one segment was corrected by fuzzy matching.
    pub corrected: bool,
    /// The path ended in `> body` under a list item and addresses the item's
    /// own prose; `indices` then point at the item.
    pub item_body: bool,
}

/// Levenshtein distance over chars divided by the longer length, after case
/// folding. Two empty strings have distance 0.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let a = a.to_lowercase();
    let b = b.to_lowercase();
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(&a, &b) as f64 / longest as f64
}

/// LLM references often drop the dot of an item marker (`"1"` for `"1."`).
fn normalize_segment(seg: &str) -> String {
    if !seg.is_empty() && seg.chars().all(|c| c.is_ascii_digit()) {
        format!("{seg}.")
    } else {
        seg.to_string()
    }
}

fn closest(labels: &[String], seg: &str) -> Result<Option<usize>, Vec<String>> {
    let mut best: Vec<usize> = Vec::new();
    let mut best_d = f64::INFINITY;
    for (i, label) in labels.iter().enumerate() {
        let d = normalized_edit_distance(label, seg);
        if d < best_d - 1e-12 {
            best_d = d;
            best = vec![i];
        } else if (d - best_d).abs() <= 1e-12 {
            best.push(i);
        }
    }
    if best.is_empty() || best_d > FUZZY_THRESHOLD {
        return Ok(None);
    }
    if best.len() > 1 {
        return Err(best.iter().map(|&i| labels[i].clone()).collect());
    }
    Ok(Some(best[0]))
}

/// Resolves `path` against `tree`. Exact matches always win; with `fuzzy`,
/// an unmatched segment binds to the nearest sibling label within
/// [`FUZZY_THRESHOLD`].
pub fn resolve_path(tree: &PromptTree, path: &NodePath, fuzzy: bool) -> Result<Resolved, TreeError> {
    let not_found = |segment: &str| TreeError::PathNotFound {
        path: path.to_string(),
        segment: segment.to_string(),
    };
    if path.is_empty() {
        return Err(not_found(""));
    }
    let mut node: &PromptNode = &tree.root;
    let mut indices = Vec::new();
    let mut segments = Vec::new();
    let mut corrected = false;
    let mut item_body = false;
    for raw in &path.segments {
        if item_body {
            // Nothing can follow an item's prose.
            return Err(not_found(raw));
        }
        let labels = node.child_labels();
        let exact = labels.iter().position(|l| l == raw);
        let is_item_body = |seg: &str| node.is_list_item() && seg == BODY_LABEL;
        let idx = match exact {
            Some(i) => Some(i),
            None if is_item_body(raw) => None,
            None if !fuzzy => return Err(not_found(raw)),
            None => {
                let seg = normalize_segment(raw);
                if let Some(i) = labels.iter().position(|l| *l == seg) {
                    corrected = true;
                    Some(i)
                } else if node.is_list_item()
                    && normalized_edit_distance(&seg, BODY_LABEL) <= FUZZY_THRESHOLD
                    && labels.iter().all(|l| normalized_edit_distance(l, &seg) > normalized_edit_distance(&seg, BODY_LABEL))
                {
                    corrected = true;
                    None
                } else {
                    match closest(&labels, &seg) {
                        Ok(Some(i)) => {
                            corrected = true;
                            Some(i)
                        }
                        Ok(None) => return Err(not_found(raw)),
                        Err(candidates) => {
                            return Err(TreeError::AmbiguousPath {
                                path: path.to_string(),
                                segment: raw.clone(),
                                candidates,
                            })
                        }
                    }
                }
            }
        };
        match idx {
            Some(i) => {
                segments.push(labels[i].clone());
                indices.push(i);
                node = &node.children[i];
            }
            None => {
                segments.push(BODY_LABEL.to_string());
                item_body = true;
            }
        }
    }
    Ok(Resolved {
        indices,
        path: NodePath::new(segments),
        corrected,
        item_body,
    })
}

fn induce(
    node: &PromptNode,
    at: &mut Vec<usize>,
    full: &BTreeSet<Vec<usize>>,
    shell_only: &BTreeSet<Vec<usize>>,
) -> Option<PromptNode> {
    if full.contains(at) {
        return Some(node.clone());
    }
    let is_prefix = full
        .iter()
        .chain(shell_only.iter())
        .any(|t| t.len() > at.len() && t.starts_with(at));
    if !is_prefix && !shell_only.contains(at) {
        return None;
    }
    let mut out = node.clone();
    out.children.clear();
    for (i, child) in node.children.iter().enumerate() {
        at.push(i);
        if let Some(c) = induce(child, at, full, shell_only) {
            out.children.push(c);
        }
        at.pop();
    }
    Some(out)
}

/// Minimal tree holding each referenced node, its ancestors, and its own
/// subtree. An item's `> body` keeps the item prose without its children.
pub fn induced_subtree(tree: &PromptTree, paths: &[NodePath], fuzzy: bool) -> Result<PromptTree, TreeError> {
    let mut full = BTreeSet::new();
    let mut shell_only = BTreeSet::new();
    for p in paths {
        let r = resolve_path(tree, p, fuzzy)?;
        if r.item_body {
            shell_only.insert(r.indices);
        } else {
            full.insert(r.indices);
        }
    }
    let root = induce(&tree.root, &mut Vec::new(), &full, &shell_only).unwrap_or_else(PromptNode::root);
    Ok(PromptTree::from_root(root))
}
