use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde_json::Value;

use super::{Backend, BackendError, Completion, GenerationRequest, RequestTag};

/// Computes a reply from the request and its 0-based ordinal within its tag.
pub type Responder = Box<dyn Fn(&GenerationRequest, usize) -> Option<String> + Send + Sync>;

/// Deterministic backend replaying fixture replies.
///
/// Lookup order: digest-pinned reply, `(tag, ordinal)` fixture, responder,
/// per-tag default.
pub struct ScriptedBackend {
    id: String,
    pinned: HashMap<String, String>,
    fixtures: HashMap<(RequestTag, usize), String>,
    defaults: HashMap<RequestTag, String>,
    responder: Option<Responder>,
    cursors: Mutex<BTreeMap<RequestTag, usize>>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            pinned: HashMap::new(),
            fixtures: HashMap::new(),
            defaults: HashMap::new(),
            responder: None,
            cursors: Mutex::new(BTreeMap::new()),
        }
    }

    /// Loads `<dir>/<tag>/<ordinal>.txt` fixtures, `<dir>/<tag>/default.txt`
    /// defaults, and `<dir>/pinned/<digest>.txt` pins.
    pub fn from_dir(id: impl Into<String>, dir: &Path) -> std::io::Result<Self> {
        let mut backend = Self::new(id);
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let tag = RequestTag::parse(&name);
            if tag.is_none() && name != "pinned" {
                log::warn!("ignoring fixture directory `{name}`");
                continue;
            }
            for file in fs::read_dir(entry.path())? {
                let path = file?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let text = fs::read_to_string(&path)?;
                match tag {
                    None => {
                        backend.pinned.insert(stem, text);
                    }
                    Some(t) if stem == "default" => {
                        backend.defaults.insert(t, text);
                    }
                    Some(t) => match stem.parse::<usize>() {
                        Ok(n) => {
                            backend.fixtures.insert((t, n), text);
                        }
                        Err(_) => log::warn!("ignoring fixture `{}`", path.display()),
                    },
                }
            }
        }
        Ok(backend)
    }

    pub fn with_reply(mut self, tag: RequestTag, ordinal: usize, text: impl Into<String>) -> Self {
        self.fixtures.insert((tag, ordinal), text.into());
        self
    }

    /// Queues `text` as the next unused ordinal for `tag`.
    pub fn push(mut self, tag: RequestTag, text: impl Into<String>) -> Self {
        let next = (0..).find(|n| !self.fixtures.contains_key(&(tag, *n))).unwrap();
        self.fixtures.insert((tag, next), text.into());
        self
    }

    pub fn pin(mut self, request_digest: impl Into<String>, text: impl Into<String>) -> Self {
        self.pinned.insert(request_digest.into(), text.into());
        self
    }

    pub fn with_default(mut self, tag: RequestTag, text: impl Into<String>) -> Self {
        self.defaults.insert(tag, text.into());
        self
    }

    pub fn with_responder(
        mut self,
        f: impl Fn(&GenerationRequest, usize) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    /// Number of requests served so far for `tag`.
    pub fn served(&self, tag: RequestTag) -> usize {
        self.cursors.lock().unwrap().get(&tag).copied().unwrap_or(0)
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        format!("scripted:{}", self.id)
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        let ordinal = {
            let mut cursors = self.cursors.lock().unwrap();
            let c = cursors.entry(request.tag).or_insert(0);
            *c += 1;
            *c - 1
        };
        let reply = self
            .pinned
            .get(&request.digest())
            .or_else(|| self.fixtures.get(&(request.tag, ordinal)))
            .cloned()
            .or_else(|| self.responder.as_ref().and_then(|f| f(request, ordinal)))
            .or_else(|| self.defaults.get(&request.tag).cloned());
        reply.map(Completion::text).ok_or_else(|| {
            BackendError::Fatal(format!("no fixture for {} ordinal {ordinal}", request.tag))
        })
    }

    fn snapshot(&self) -> Value {
        let cursors = self.cursors.lock().unwrap();
        Value::Object(cursors.iter().map(|(t, n)| (t.as_str().to_string(), Value::from(*n))).collect())
    }

    fn restore(&self, state: &Value) -> Result<(), String> {
        let mut cursors = BTreeMap::new();
        if let Value::Object(m) = state {
            for (k, v) in m {
                let tag = RequestTag::parse(k).ok_or_else(|| format!("unknown tag `{k}` in snapshot"))?;
                let n = v.as_u64().ok_or_else(|| format!("bad cursor for `{k}`"))?;
                cursors.insert(tag, n as usize);
            }
        }
        *self.cursors.lock().unwrap() = cursors;
        Ok(())
    }
}
