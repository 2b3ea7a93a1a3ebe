use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use super::GatewayError;

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"```[A-Za-z0-9_-]*[ \t]*\r?\n?([\s\S]*?)```").unwrap())
}

/// Drops trailing commas before `}`/`]` and escapes raw control characters
/// inside strings.
fn repair(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            match c {
                _ if escaped => {
                    escaped = false;
                    out.push(c);
                }
                '\\' => {
                    escaped = true;
                    out.push(c);
                }
                '"' => {
                    in_str = false;
                    out.push(c);
                }
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                '\t' => out.push_str("\\t"),
                _ => out.push(c),
            }
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|n| !n.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

/// Byte index just past the bracket that closes the one at `start`.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => stack.push('}'),
            '[' => stack.push(']'),
            '}' | ']' => {
                if stack.pop() != Some(c) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_lenient(s: &str) -> Option<Value> {
    let s = s.trim();
    serde_json::from_str(s).ok().or_else(|| serde_json::from_str(&repair(s)).ok())
}

fn scan(text: &str) -> Option<Value> {
    for (i, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        if let Some(end) = balanced_end(text, i) {
            if let Some(v) = parse_lenient(&text[i..end]) {
                return Some(v);
            }
        }
    }
    None
}

/// Finds and parses the first JSON object or array in a model reply,
/// preferring fenced blocks.
pub fn extract_json_block(reply: &str) -> Result<Value, GatewayError> {
    for cap in fence_re().captures_iter(reply) {
        let body = cap.get(1).unwrap().as_str();
        if let Some(v) = parse_lenient(body).filter(|v| v.is_object() || v.is_array()).or_else(|| scan(body)) {
            return Ok(v);
        }
    }
    scan(reply).ok_or(GatewayError::NoParseableBlock)
}
