use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{digest_text, NodeKind, PromptNode, PromptTree, TreeError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseWarning {
    /// A heading jumped more than one level below the previous heading and
    /// was clamped.
    HeadingLevelClamped { line: usize, found: u8, used: u8 },
}

fn heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(#{1,6})(?:\s+(.*))?$").unwrap())
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d+\.)(?:\s+(.*))?$").unwrap())
}

/// Splits an examples payload `{a},{b}` into entries. Returns `None` unless
/// the text is a non-empty sequence of non-empty brace groups.
pub(crate) fn parse_example_entries(text: &str) -> Option<Vec<String>> {
    static SEP: OnceLock<Regex> = OnceLock::new();
    let sep = SEP.get_or_init(|| Regex::new(r"\}\s*,\s*\{").unwrap());
    let inner = text.trim().strip_prefix('{')?.strip_suffix('}')?;
    let entries: Vec<String> = sep.split(inner).map(|e| e.trim().to_string()).collect();
    if entries.iter().any(String::is_empty) {
        return None;
    }
    Some(entries)
}

/// Extracts every `{...}` group from free text, for replies and instructions
/// that embed example lists inside prose.
pub(crate) fn find_brace_groups(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, ch) in text.char_indices() {
        match ch {
            '{' => {
                if depth == 0 {
                    start = i + 1;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    let entry = text[start..i].trim();
                    if !entry.is_empty() {
                        out.push(entry.to_string());
                    }
                }
            }
            _ => {}
        }
    }
    out
}

pub(crate) fn examples_line(line: &str) -> Option<Vec<String>> {
    let rest = line.strip_prefix("Examples:")?;
    parse_example_entries(rest)
}

enum Line<'a> {
    Heading { level: u8, title: &'a str },
    Bullet(&'a str),
    Numbered { marker: &'a str, content: &'a str },
    Examples(Vec<String>),
    Prose(&'a str),
}

fn classify(line: &str) -> Line<'_> {
    if let Some(c) = heading_re().captures(line) {
        let level = c.get(1).unwrap().as_str().len() as u8;
        let title = c.get(2).map_or("", |m| m.as_str().trim());
        return Line::Heading { level, title };
    }
    if line == "*" {
        return Line::Bullet("");
    }
    if let Some(rest) = line.strip_prefix("* ") {
        return Line::Bullet(rest.trim_start());
    }
    if let Some(entries) = examples_line(line) {
        return Line::Examples(entries);
    }
    if let Some(c) = numbered_re().captures(line) {
        return Line::Numbered {
            marker: c.get(1).unwrap().as_str(),
            content: c.get(2).map_or("", |m| m.as_str()),
        };
    }
    Line::Prose(line)
}

struct Builder {
    /// Open headings, root first.
    stack: Vec<PromptNode>,
    prev_level: Option<u8>,
    pending_blank: usize,
    in_fence: bool,
    warnings: Vec<ParseWarning>,
}

impl Builder {
    fn current(&mut self) -> &mut PromptNode {
        self.stack.last_mut().expect("root is always open")
    }

    fn close_top(&mut self) {
        let node = self.stack.pop().expect("non-root heading");
        self.current().children.push(node);
    }

    fn open_heading(&mut self, line_no: usize, found: u8, title: &str) {
        let mut level = found;
        if let Some(prev) = self.prev_level {
            if level > prev + 1 {
                level = prev + 1;
                self.warnings.push(ParseWarning::HeadingLevelClamped {
                    line: line_no,
                    found,
                    used: level,
                });
                log::warn!("line {line_no}: heading level {found} clamped to {level}");
            }
        }
        while self.stack.len() > 1 && self.stack.last().unwrap().level().unwrap_or(0) >= level {
            self.close_top();
        }
        self.prev_level = Some(level);
        self.pending_blank = 0;
        self.stack.push(PromptNode::heading(level, title));
    }

    fn push_item(&mut self, item: PromptNode) {
        self.pending_blank = 0;
        self.current().children.push(item);
    }

    fn push_examples(&mut self, entries: Vec<String>) {
        self.pending_blank = 0;
        let cur = self.current();
        if let Some(last) = cur.children.last_mut().filter(|c| c.is_list_item()) {
            match last.children.iter_mut().find(|c| c.kind == NodeKind::ExamplesBlock) {
                Some(block) => block.examples.extend(entries),
                None => last.children.push(PromptNode::examples(entries)),
            }
            return;
        }
        match cur.children.iter_mut().find(|c| c.kind == NodeKind::ExamplesBlock) {
            Some(block) => block.examples.extend(entries),
            None => {
                let at = cur.children.iter().filter(|c| c.kind == NodeKind::Body).count();
                cur.children.insert(at, PromptNode::examples(entries));
            }
        }
    }

    fn push_prose(&mut self, line: &str) {
        let blanks = std::mem::take(&mut self.pending_blank);
        let cur = self.current();
        let target = if cur.children.last().is_some_and(PromptNode::is_list_item) {
            cur.children.last_mut()
        } else {
            cur.children.iter_mut().find(|c| c.kind == NodeKind::Body)
        };
        match target {
            Some(node) => {
                if !node.content.is_empty() || node.is_list_item() {
                    node.content.push('\n');
                    for _ in 0..blanks {
                        node.content.push('\n');
                    }
                }
                node.content.push_str(line);
            }
            None => cur.children.insert(0, PromptNode::body(line)),
        }
    }

    fn finish(mut self) -> PromptNode {
        while self.stack.len() > 1 {
            self.close_top();
        }
        self.stack.pop().unwrap()
    }
}

/// Parses structured prompt text into a tree, discarding warnings.
pub fn parse_markdown(text: &str) -> Result<PromptTree, TreeError> {
    parse_markdown_with_warnings(text).map(|(tree, _)| tree)
}

pub fn parse_markdown_with_warnings(
    text: &str,
) -> Result<(PromptTree, Vec<ParseWarning>), TreeError> {
    if text.trim().is_empty() {
        return Err(TreeError::EmptyInput);
    }
    let mut b = Builder {
        stack: vec![PromptNode::root()],
        prev_level: None,
        pending_blank: 0,
        in_fence: false,
        warnings: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if b.in_fence {
            if line.trim_start().starts_with("```") {
                b.in_fence = false;
            }
            if line.is_empty() {
                b.pending_blank += 1;
            } else {
                b.push_prose(line);
            }
            continue;
        }
        if line.is_empty() {
            b.pending_blank += 1;
            continue;
        }
        if line.trim_start().starts_with("```") {
            b.in_fence = true;
            b.push_prose(line);
            continue;
        }
        if line.starts_with(char::is_whitespace) {
            b.push_prose(line);
            continue;
        }
        match classify(line) {
            Line::Heading { level, title } => b.open_heading(i + 1, level, title),
            Line::Bullet(content) => b.push_item(PromptNode::bullet(content)),
            Line::Numbered { marker, content } => b.push_item(PromptNode::numbered(marker, content)),
            Line::Examples(entries) => b.push_examples(entries),
            Line::Prose(p) => b.push_prose(p),
        }
    }
    let warnings = std::mem::take(&mut b.warnings);
    let root = b.finish();
    Ok((
        PromptTree {
            root,
            source_hash: digest_text(text),
        },
        warnings,
    ))
}
