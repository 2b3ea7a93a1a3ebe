use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::rundir::{LineageFile, RunDir};
use super::HarnessError;
use crate::actions::{CanonicalKind, KindHistogram};
use crate::gateway::{Gateway, GenerationRequest, RequestTag};
use crate::templates;
use crate::tree::{NodeKind, NodePath, PromptNode, PromptTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    /// `None` for the whole-run row.
    pub step: Option<usize>,
    pub counts: KindHistogram,
    pub total: usize,
    pub percentages: BTreeMap<CanonicalKind, f64>,
    /// No applied actions in this row.
    pub empty: bool,
}

impl ActionRow {
    fn new(step: Option<usize>, counts: KindHistogram) -> Self {
        let total = counts.total();
        let percentages = counts
            .0
            .iter()
            .map(|(k, &n)| (*k, if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 }))
            .collect();
        Self {
            step,
            counts,
            total,
            percentages,
            empty: total == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTable {
    pub rows: Vec<ActionRow>,
}

impl ActionTable {
    pub fn overall(&self) -> &ActionRow {
        self.rows.last().expect("table has a total row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for k in CanonicalKind::ALL {
            let _ = write!(out, ",{k}");
        }
        out.push_str(",total\n");
        for r in &self.rows {
            out.push_str(&r.step.map(|s| s.to_string()).unwrap_or_else(|| "all".into()));
            for k in CanonicalKind::ALL {
                let _ = write!(out, ",{}", r.counts.get(k));
            }
            let _ = writeln!(out, ",{}", r.total);
        }
        out
    }
}

/// Applied-action counts per step and overall, folded from lineage. A
/// structural stage shared by several children counts once.
pub fn action_distribution(lineage: &LineageFile) -> Result<ActionTable, HarnessError> {
    if lineage.steps.is_empty() {
        return Err(HarnessError::EmptyRun);
    }
    let mut per_step: BTreeMap<usize, KindHistogram> = lineage.steps.iter().map(|s| (s.step, KindHistogram::default())).collect();
    let mut seen_structural = BTreeSet::new();
    for c in &lineage.candidates {
        let l = &c.lineage;
        let Some(parent) = &l.parent else { continue };
        let h = per_step.entry(l.step).or_default();
        if let Some(s) = &l.structural {
            if seen_structural.insert((parent.clone(), l.step)) {
                h.merge(&s.report.histogram);
            }
        }
        if let Some(e) = &l.error {
            h.merge(&e.report.histogram);
        }
    }
    let mut total = KindHistogram::default();
    let mut rows = Vec::new();
    for (step, h) in per_step {
        total.merge(&h);
        rows.push(ActionRow::new(Some(step), h));
    }
    rows.push(ActionRow::new(None, total));
    Ok(ActionTable { rows })
}

/// Writes `actions.json` and `actions.csv` into the run directory.
pub fn report_action_distribution(dir: &RunDir) -> Result<ActionTable, HarnessError> {
    let table = action_distribution(&dir.lineage()?)?;
    dir.write_json("actions.json", &table)?;
    std::fs::write(dir.path.join("actions.csv"), table.to_csv()).map_err(|e| HarnessError::Run(e.to_string()))?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub best_mean: f64,
    pub pool_size: usize,
    pub created: usize,
}

pub fn score_curve(lineage: &LineageFile) -> Vec<CurvePoint> {
    lineage
        .steps
        .iter()
        .map(|s| CurvePoint {
            step: s.step,
            best_mean: s.best_mean,
            pool_size: s.pool_size,
            created: s.created.len(),
        })
        .collect()
}

pub fn report_curve(dir: &RunDir) -> Result<Vec<CurvePoint>, HarnessError> {
    let lineage = dir.lineage()?;
    if lineage.steps.is_empty() {
        return Err(HarnessError::EmptyRun);
    }
    let curve = score_curve(&lineage);
    dir.write_json("curve.json", &curve)?;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareScores {
    pub information_preservation: u8,
    pub overall_dissimilarity: u8,
    pub explanation: String,
}

fn score_field(v: &Value, key: &str) -> Result<u8, HarnessError> {
    let obj = v.as_object().ok_or_else(|| HarnessError::Run("judge reply is not an object".into()))?;
    let found = obj
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(key) || k.replace('_', " ").eq_ignore_ascii_case(key))
        .map(|(_, v)| v)
        .ok_or_else(|| HarnessError::Run(format!("judge reply lacks `{key}`")))?;
    let n = match found {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| HarnessError::Run(format!("`{key}` is not a number")))?;
    if !(1.0..=10.0).contains(&n) || n.fract() != 0.0 {
        return Err(HarnessError::OutOfRangeScore { field: key.into(), value: n });
    }
    Ok(n as u8)
}

pub fn parse_compare(v: &Value) -> Result<CompareScores, HarnessError> {
    Ok(CompareScores {
        information_preservation: score_field(v, "Information Preservation")?,
        overall_dissimilarity: score_field(v, "Overall Dissimilarity")?,
        explanation: v
            .as_object()
            .and_then(|m| m.iter().find(|(k, _)| k.eq_ignore_ascii_case("explanation")))
            .map(|(_, e)| e.as_str().map(str::to_string).unwrap_or_else(|| e.to_string()))
            .unwrap_or_default(),
    })
}

/// One judge call rating how much of `initial` survives in `optimized`.
pub fn report_compare(initial: &str, optimized: &str, gateway: &Gateway) -> Result<CompareScores, HarnessError> {
    let t = templates::compare();
    let user = t.user.replace("{initial_prompt}", initial).replace("{optimized_prompt}", optimized);
    let req = GenerationRequest::new(RequestTag::CompareJudge, t.system, user);
    let v = gateway.generate_json(&req).map_err(|e| HarnessError::Backend(e.to_string()))?;
    parse_compare(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Added,
    Removed,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub path: NodePath,
    pub change: Change,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDiff {
    pub entries: Vec<DiffEntry>,
}

/// Text a node contributes itself, children excluded.
fn own_text(node: &PromptNode) -> String {
    match node.kind {
        NodeKind::Heading { .. } => String::new(),
        NodeKind::ExamplesBlock => node.examples.join("\u{1f}"),
        NodeKind::NumberedItem => format!("{} {}", node.title, node.content),
        _ => node.content.clone(),
    }
}

fn display_text(node: &PromptNode) -> String {
    match node.kind {
        NodeKind::ExamplesBlock => crate::tree::render_examples_line(&node.examples),
        NodeKind::Heading { .. } => crate::tree::render_node(node),
        _ => node.content.clone(),
    }
}

fn path_map(tree: &PromptTree) -> BTreeMap<NodePath, (usize, PromptNode)> {
    tree.enumerate_paths()
        .into_iter()
        .enumerate()
        .map(|(order, (p, idx))| (p, (order, tree.node(&idx).expect("enumerated").clone())))
        .collect()
}

/// Node-aligned diff. A removed or added subtree is reported once, at its
/// top node.
pub fn report_diff(parent: &PromptTree, child: &PromptTree) -> TreeDiff {
    let before = path_map(parent);
    let after = path_map(child);
    let mut entries: Vec<(usize, usize, DiffEntry)> = Vec::new();
    for (p, (order, node)) in &before {
        match after.get(p) {
            None => {
                if !before.contains_key(&p.parent()) || after.contains_key(&p.parent()) {
                    entries.push((0, *order, DiffEntry {
                        path: p.clone(),
                        change: Change::Removed,
                        before: Some(display_text(node)),
                        after: None,
                    }));
                }
            }
            Some((_, other)) if own_text(node) != own_text(other) || node.kind != other.kind => {
                entries.push((0, *order, DiffEntry {
                    path: p.clone(),
                    change: Change::Modified,
                    before: Some(display_text(node)),
                    after: Some(display_text(other)),
                }));
            }
            _ => {}
        }
    }
    for (p, (order, node)) in &after {
        if !before.contains_key(p) && (!after.contains_key(&p.parent()) || before.contains_key(&p.parent())) {
            entries.push((1, *order, DiffEntry {
                path: p.clone(),
                change: Change::Added,
                before: None,
                after: Some(display_text(node)),
            }));
        }
    }
    entries.sort_by_key(|(side, order, _)| (*side, *order));
    TreeDiff {
        entries: entries.into_iter().map(|(_, _, e)| e).collect(),
    }
}

impl TreeDiff {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `[-removed-]` and `{+added+}` markers per entry.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "@ {} ({:?})", e.path, e.change);
            if let Some(b) = &e.before {
                let _ = writeln!(out, "[-{b}-]");
            }
            if let Some(a) = &e.after {
                let _ = writeln!(out, "{{+{a}+}}");
            }
        }
        out
    }
}
