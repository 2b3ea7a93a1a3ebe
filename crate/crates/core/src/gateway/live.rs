use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Backend, BackendError, Completion, GenerationRequest, ReportedUsage};

fn default_reply_pointer() -> String {
    "/choices/0/message/content".into()
}

fn default_input_pointer() -> String {
    "/usage/prompt_tokens".into()
}

fn default_output_pointer() -> String {
    "/usage/completion_tokens".into()
}

fn default_timeout() -> u64 {
    120
}

/// Chat-completion endpoint descriptor. The auth token is read from the
/// environment variable named by `auth_env` at call time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveProfile {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    /// JSON pointer to the reply text in the response body.
    #[serde(default = "default_reply_pointer")]
    pub reply_pointer: String,
    #[serde(default = "default_input_pointer")]
    pub usage_input_pointer: String,
    #[serde(default = "default_output_pointer")]
    pub usage_output_pointer: String,
    /// Extra top-level keys merged into every request body.
    #[serde(default)]
    pub extra_body: Map<String, Value>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

pub struct LiveBackend {
    profile: LiveProfile,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(profile: LiveProfile) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(profile.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { profile, agent }
    }

    fn body(&self, request: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": self.profile.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text}
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output
        });
        let obj = body.as_object_mut().unwrap();
        for (k, v) in &self.profile.extra_body {
            obj.insert(k.clone(), v.clone());
        }
        body
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> String {
        format!("live:{}@{}", self.profile.model, self.profile.endpoint)
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        let mut req = self.agent.post(&self.profile.endpoint).header("Content-Type", "application/json");
        if let Some(var) = &self.profile.auth_env {
            let token = std::env::var(var).map_err(|_| BackendError::Fatal(format!("environment variable `{var}` is not set")))?;
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(self.body(request))
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transient(format!("unreadable response (status {status}): {e}")))?;
        if status == 429 || status >= 500 {
            return Err(BackendError::Transient(format!("status {status}")));
        }
        if status >= 400 {
            return Err(BackendError::Fatal(format!("status {status}: {body}")));
        }
        let text = body
            .pointer(&self.profile.reply_pointer)
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Fatal(format!("no reply at `{}`", self.profile.reply_pointer)))?
            .to_string();
        let usage = match (
            body.pointer(&self.profile.usage_input_pointer).and_then(Value::as_u64),
            body.pointer(&self.profile.usage_output_pointer).and_then(Value::as_u64),
        ) {
            (Some(i), Some(o)) => Some(ReportedUsage {
                input_tokens: i,
                output_tokens: o,
            }),
            _ => None,
        };
        Ok(Completion { text, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::RequestTag;

    #[test]
    fn body_merges_extra_keys() {
        let profile: LiveProfile = toml::from_str(
            "endpoint = \"http://localhost:1/v1/chat/completions\"\nmodel = \"m\"\n[extra_body]\nseed = 7\n",
        )
        .unwrap();
        let b = LiveBackend::new(profile);
        let body = b.body(&GenerationRequest::new(RequestTag::Evaluation, "sys", "usr"));
        assert_eq!(body["seed"], 7);
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][1]["content"], "usr");
    }
}
