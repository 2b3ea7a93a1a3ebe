use super::parse::examples_line;
use super::{NodeKind, PromptNode, PromptTree};

pub fn render_examples_line(entries: &[String]) -> String {
    let joined: Vec<String> = entries.iter().map(|e| format!("{{{e}}}")).collect();
    format!("Examples: {}", joined.join(", "))
}

fn push_multiline(out: &mut Vec<String>, first_prefix: &str, content: &str) {
    let mut lines = content.split('\n');
    let first = lines.next().unwrap_or("");
    let head = if first.is_empty() {
        first_prefix.trim_end().to_string()
    } else {
        format!("{first_prefix}{first}")
    };
    out.push(head);
    out.extend(lines.map(str::to_string));
}

fn render_into(node: &PromptNode, out: &mut Vec<String>) {
    match node.kind {
        NodeKind::Heading { level } => {
            if level > 0 {
                if !out.is_empty() {
                    out.push(String::new());
                }
                let marker = "#".repeat(level as usize);
                if node.title.is_empty() {
                    out.push(marker);
                } else {
                    out.push(format!("{marker} {}", node.title));
                }
            }
        }
        NodeKind::Body => out.extend(node.content.split('\n').map(str::to_string)),
        NodeKind::ExamplesBlock => out.push(render_examples_line(&node.examples)),
        NodeKind::BulletItem => push_multiline(out, "* ", &node.content),
        NodeKind::NumberedItem => push_multiline(out, &format!("{} ", node.title), &node.content),
    }
    for child in &node.children {
        render_into(child, out);
    }
}

/// Canonical text of a subtree (no trailing newline).
pub fn render_node(node: &PromptNode) -> String {
    let mut out = Vec::new();
    render_into(node, &mut out);
    out.join("\n")
}

/// Canonical text of a tree: one blank line before every heading, examples
/// on a single `Examples: {a}, {b}` line, markers matching levels.
pub fn render_markdown(tree: &PromptTree) -> String {
    render_node(&tree.root)
}

/// Whitespace-insensitive form used to compare prompt texts: trailing
/// whitespace and blank lines dropped, example separators canonicalized.
pub fn normalize_whitespace(text: &str) -> String {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(|l| match examples_line(l) {
            Some(entries) => render_examples_line(&entries),
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}
