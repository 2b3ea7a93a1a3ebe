//! Prompt templates shipped with the engine, and request assembly helpers.

pub const CRITIC_PRELIMINARY: &str = include_str!("../resources/templates/critic_preliminary.md");
pub const CRITIC_ERROR: &str = include_str!("../resources/templates/critic_error.md");
pub const CRITIC_CLUSTER: &str = include_str!("../resources/templates/critic_cluster.md");
pub const ACTOR: &str = include_str!("../resources/templates/actor.md");
pub const REPHRASE: &str = include_str!("../resources/templates/rephrase.md");
const STRUCTURING_RAW: &str = include_str!("../resources/templates/structuring.md");
const COMPARE_RAW: &str = include_str!("../resources/templates/compare.md");

/// System and user halves of a chat-formatted template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatTemplate {
    pub system: String,
    pub user: String,
}

fn section<'a>(text: &'a str, role: &str) -> &'a str {
    let marker = format!("<|im_start|>{role}");
    let Some(start) = text.find(&marker) else {
        return "";
    };
    let rest = &text[start + marker.len()..];
    let end = rest.find("<|im_end|>").unwrap_or(rest.len());
    rest[..end].trim_matches('\n')
}

pub fn split_chat(text: &str) -> ChatTemplate {
    ChatTemplate {
        system: section(text, "system").to_string(),
        user: section(text, "user").to_string(),
    }
}

pub fn structuring() -> ChatTemplate {
    split_chat(STRUCTURING_RAW)
}

pub fn compare() -> ChatTemplate {
    split_chat(COMPARE_RAW)
}

pub fn critic_cluster(number_of_clusters: usize) -> String {
    CRITIC_CLUSTER.replace("{number_of_clusters}", &number_of_clusters.to_string())
}

pub(crate) fn json_block(label: &str, value: &serde_json::Value) -> String {
    format!("**{label}**\n\n```json\n{value}\n```")
}
