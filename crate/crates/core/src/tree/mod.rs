//! Hierarchical prompt representation.
//!
//! A prompt is a tree of headings, prose bodies, example blocks and list
//! items. Trees are immutable once built; every edit in [`crate::actions`]
//! returns a fresh tree.

mod json;
pub(crate) mod parse;
mod render;
mod resolve;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use json::{from_template_json, nodes_from_template_json, to_template_json};
pub use parse::{parse_markdown, parse_markdown_with_warnings, ParseWarning};
pub use render::{normalize_whitespace, render_examples_line, render_markdown, render_node};
pub use resolve::{
    induced_subtree, normalized_edit_distance, resolve_path, Resolved, FUZZY_THRESHOLD,
};

/// Label that addresses a heading's or list item's prose.
pub const BODY_LABEL: &str = "body";
/// Label that addresses an examples block.
pub const EXAMPLES_LABEL: &str = "Examples";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("prompt text is empty")]
    EmptyInput,
    #[error("path `{path}` not found (no match for segment `{segment}`)")]
    PathNotFound { path: String, segment: String },
    #[error("path `{path}` is ambiguous at segment `{segment}`: candidates {candidates:?}")]
    AmbiguousPath {
        path: String,
        segment: String,
        candidates: Vec<String>,
    },
    #[error("duplicate sibling key `{title}` under `{parent}`")]
    DuplicateSiblingTitle { parent: String, title: String },
    #[error("invalid template mapping: {0}")]
    InvalidTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeKind {
    /// Level 0 is reserved for the synthetic root.
    Heading { level: u8 },
    Body,
    ExamplesBlock,
    BulletItem,
    NumberedItem,
}

impl NodeKind {
    /// Position class used to keep children in canonical order:
    /// body, examples, list items, sub-headings.
    pub(crate) fn order_class(self) -> u8 {
        match self {
            NodeKind::Body => 0,
            NodeKind::ExamplesBlock => 1,
            NodeKind::BulletItem | NodeKind::NumberedItem => 2,
            NodeKind::Heading { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptNode {
    pub kind: NodeKind,
    /// Heading text, or the marker of a numbered item (`"1."`).
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub title: String,
    /// Prose of a body or list item. May span several lines.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<PromptNode>,
}

impl PromptNode {
    pub fn root() -> Self {
        Self::heading(0, "")
    }

    pub fn heading(level: u8, title: impl Into<String>) -> Self {
        Self {
            kind: NodeKind::Heading { level },
            title: title.into(),
            content: String::new(),
            examples: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn body(content: impl Into<String>) -> Self {
        Self {
            kind: NodeKind::Body,
            title: String::new(),
            content: content.into(),
            examples: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn examples(entries: Vec<String>) -> Self {
        Self {
            kind: NodeKind::ExamplesBlock,
            title: String::new(),
            content: String::new(),
            examples: entries,
            children: Vec::new(),
        }
    }

    pub fn bullet(content: impl Into<String>) -> Self {
        Self {
            kind: NodeKind::BulletItem,
            title: String::new(),
            content: content.into(),
            examples: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn numbered(marker: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            kind: NodeKind::NumberedItem,
            title: marker.into(),
            content: content.into(),
            examples: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn with_child(mut self, child: PromptNode) -> Self {
        self.children.push(child);
        self
    }

    pub fn is_heading(&self) -> bool {
        matches!(self.kind, NodeKind::Heading { .. })
    }

    pub fn is_list_item(&self) -> bool {
        matches!(self.kind, NodeKind::BulletItem | NodeKind::NumberedItem)
    }

    pub fn level(&self) -> Option<u8> {
        match self.kind {
            NodeKind::Heading { level } => Some(level),
            _ => None,
        }
    }

    /// Number of nodes in this subtree, including `self`.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(PromptNode::size).sum::<usize>()
    }

    pub fn body_child(&self) -> Option<&PromptNode> {
        self.children.iter().find(|c| c.kind == NodeKind::Body)
    }

    pub fn examples_child(&self) -> Option<&PromptNode> {
        self.children.iter().find(|c| c.kind == NodeKind::ExamplesBlock)
    }

    pub(crate) fn examples_child_index(&self) -> Option<usize> {
        self.children
            .iter()
            .position(|c| c.kind == NodeKind::ExamplesBlock)
    }

    /// Path labels of the direct children, in sibling order.
    ///
    /// Bullet items are addressed by their 1-based ordinal among list items
    /// (`"3."`). Siblings that would share a label get an ordinal suffix
    /// (`"Notes#2"`) which only exists for addressing.
    pub fn child_labels(&self) -> Vec<String> {
        let mut item_ordinal = 0usize;
        let base: Vec<String> = self
            .children
            .iter()
            .map(|c| match c.kind {
                NodeKind::Heading { .. } => c.title.clone(),
                NodeKind::Body => BODY_LABEL.to_string(),
                NodeKind::ExamplesBlock => EXAMPLES_LABEL.to_string(),
                NodeKind::BulletItem => {
                    item_ordinal += 1;
                    format!("{item_ordinal}.")
                }
                NodeKind::NumberedItem => {
                    item_ordinal += 1;
                    c.title.clone()
                }
            })
            .collect();
        let mut labels = Vec::with_capacity(base.len());
        for (i, label) in base.iter().enumerate() {
            let earlier = base[..i].iter().filter(|b| *b == label).count();
            if earlier == 0 {
                labels.push(label.clone());
            } else {
                labels.push(format!("{label}#{}", earlier + 1));
            }
        }
        labels
    }

    pub(crate) fn get(&self, indices: &[usize]) -> Option<&PromptNode> {
        let mut node = self;
        for &i in indices {
            node = node.children.get(i)?;
        }
        Some(node)
    }

    pub(crate) fn get_mut(&mut self, indices: &[usize]) -> Option<&mut PromptNode> {
        let mut node = self;
        for &i in indices {
            node = node.children.get_mut(i)?;
        }
        Some(node)
    }

    /// Re-derive heading levels below this node so every heading sits one
    /// level under its parent heading.
    pub(crate) fn relevel(&mut self, level: u8) {
        if let NodeKind::Heading { level: l } = &mut self.kind {
            *l = level;
        }
        let child_level = level.saturating_add(1);
        for child in &mut self.children {
            if child.is_heading() {
                child.relevel(child_level);
            }
        }
    }
}

/// `"> "`-joined address of one node, e.g. `Error Identification> 1.> body`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub struct NodePath {
    pub segments: Vec<String>,
}

impl NodePath {
    pub fn new(segments: Vec<String>) -> Self {
        Self { segments }
    }

    /// Lenient parse of a reference string as emitted by a model: tolerates
    /// surrounding quotes, list dashes, trailing commas and a trailing `>`.
    pub fn parse(text: &str) -> Self {
        let mut s = text.trim();
        s = s.strip_prefix("- ").unwrap_or(s).trim();
        s = s.trim_end_matches(',').trim();
        s = s.trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
        s = s.trim_end_matches(',').trim();
        let segments = s
            .split('>')
            .map(str::trim)
            .filter(|seg| !seg.is_empty())
            .map(str::to_string)
            .collect();
        Self { segments }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn last(&self) -> Option<&str> {
        self.segments.last().map(String::as_str)
    }

    pub fn parent(&self) -> NodePath {
        let mut segments = self.segments.clone();
        segments.pop();
        Self { segments }
    }

    pub fn join(&self, segment: impl Into<String>) -> NodePath {
        let mut segments = self.segments.clone();
        segments.push(segment.into());
        Self { segments }
    }

    pub fn starts_with(&self, prefix: &NodePath) -> bool {
        self.segments.len() >= prefix.segments.len()
            && self.segments[..prefix.segments.len()] == prefix.segments[..]
    }

    /// `body` and `Examples` may only terminate a path.
    pub fn is_well_formed(&self) -> bool {
        let n = self.segments.len();
        self.segments
            .iter()
            .take(n.saturating_sub(1))
            .all(|s| s != BODY_LABEL && s != EXAMPLES_LABEL)
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("> "))
    }
}

impl From<&str> for NodePath {
    fn from(s: &str) -> Self {
        NodePath::parse(s)
    }
}

impl From<String> for NodePath {
    fn from(s: String) -> Self {
        NodePath::parse(&s)
    }
}

impl From<NodePath> for String {
    fn from(p: NodePath) -> Self {
        p.to_string()
    }
}

/// A parsed prompt. Equality is structural and ignores `source_hash`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTree {
    pub root: PromptNode,
    pub source_hash: String,
}

impl PartialEq for PromptTree {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl Eq for PromptTree {}

pub fn digest_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl PromptTree {
    /// Wraps a root built in memory; the hash is taken over its rendering.
    pub fn from_root(root: PromptNode) -> Self {
        let mut tree = Self {
            root,
            source_hash: String::new(),
        };
        tree.source_hash = digest_text(&render_markdown(&tree));
        tree
    }

    pub fn empty() -> Self {
        Self::from_root(PromptNode::root())
    }

    pub fn render(&self) -> String {
        render_markdown(self)
    }

    /// Digest of the canonical rendering; stable across parse/render cycles.
    pub fn digest(&self) -> String {
        digest_text(&self.render())
    }

    pub fn node_count(&self) -> usize {
        self.root.size()
    }

    pub fn node(&self, indices: &[usize]) -> Option<&PromptNode> {
        self.root.get(indices)
    }

    /// Top-level heading titles, in order.
    pub fn top_level_titles(&self) -> Vec<&str> {
        self.root
            .children
            .iter()
            .filter(|c| c.is_heading())
            .map(|c| c.title.as_str())
            .collect()
    }

    /// Canonical path of the node at `indices`.
    pub fn path_of(&self, indices: &[usize]) -> Option<NodePath> {
        let mut node = &self.root;
        let mut segments = Vec::with_capacity(indices.len());
        for &i in indices {
            let labels = node.child_labels();
            segments.push(labels.get(i)?.clone());
            node = &node.children[i];
        }
        Some(NodePath::new(segments))
    }

    /// Every non-root node with its canonical path, in pre-order.
    pub fn enumerate_paths(&self) -> Vec<(NodePath, Vec<usize>)> {
        fn walk(
            node: &PromptNode,
            prefix: &NodePath,
            idx: &mut Vec<usize>,
            out: &mut Vec<(NodePath, Vec<usize>)>,
        ) {
            for (i, (child, label)) in node.children.iter().zip(node.child_labels()).enumerate() {
                let path = prefix.join(label);
                idx.push(i);
                out.push((path.clone(), idx.clone()));
                walk(child, &path, idx, out);
                idx.pop();
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &NodePath::default(), &mut Vec::new(), &mut out);
        out
    }

    /// Indented outline of headings and list items.
    pub fn outline(&self) -> String {
        let mut out = String::new();
        for (path, idx) in self.enumerate_paths() {
            let node = self.node(&idx).expect("enumerated path");
            let depth = path.segments.len() - 1;
            let label = path.last().unwrap_or_default();
            let detail = match node.kind {
                NodeKind::Heading { level } => format!("{label} (h{level})"),
                NodeKind::ExamplesBlock => format!("{label} [{}]", node.examples.len()),
                _ => label.to_string(),
            };
            out.push_str(&"  ".repeat(depth));
            out.push_str(&detail);
            out.push('\n');
        }
        out
    }
}
