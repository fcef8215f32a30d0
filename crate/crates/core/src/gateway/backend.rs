use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::template::{Slots, TemplateId, TemplateSet};
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, write_jsonl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// A chat-completion request. `template_id` and `slots` identify the prompt
/// for table-driven backends and are not sent over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    /// Sample index; distinguishes repeated draws of the same prompt.
    pub seed: Option<u64>,
    pub template_id: TemplateId,
    pub slots: Slots,
}

impl ChatRequest {
    /// Renders `template_id` with `slots` into a single user message.
    pub fn from_template(
        templates: &TemplateSet,
        template_id: TemplateId,
        slots: Slots,
        model_name: &str,
        temperature: f64,
        seed: Option<u64>,
    ) -> Result<Self> {
        let content = templates.render(template_id, &slots)?;
        let req = Self {
            model_name: model_name.to_string(),
            messages: vec![Message {
                role: Role::User,
                content,
            }],
            temperature,
            seed,
            template_id,
            slots,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        match self.messages.last() {
            None => Err(Error::Validation("chat request has no messages".into())),
            Some(m) if m.role != Role::User => Err(Error::Validation(
                "last chat message must be from the user".into(),
            )),
            _ if !(self.temperature >= 0.0) => Err(Error::Validation(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            ))),
            _ => Ok(()),
        }
    }

    pub fn fingerprint(&self) -> String {
        slot_fingerprint(&self.slots)
    }

    /// JSON body for chat-completion endpoints.
    pub fn wire_body(&self) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.model_name,
            "messages": self.messages,
            "temperature": self.temperature,
        });
        if let Some(seed) = self.seed {
            body["seed"] = seed.into();
        }
        body
    }
}

/// SHA-256 over the canonical (key-sorted) JSON encoding of the slots.
pub fn slot_fingerprint(slots: &Slots) -> String {
    let canonical = serde_json::to_vec(slots).expect("string map serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Anything that turns a chat request into reply text.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        (**self).complete(req)
    }
}

/// One line of a scripted oracle file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub template_id: TemplateId,
    pub slot_fingerprint: String,
    pub reply_text: String,
}

/// Table-driven backend keyed by `(template_id, slot fingerprint)`.
///
/// A key listed several times holds a reply sequence; request seed `s`
/// selects entry `s mod len` (no seed selects the first).
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    table: HashMap<(TemplateId, String), Vec<String>>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut table: HashMap<(TemplateId, String), Vec<String>> = HashMap::new();
        for e in entries {
            table
                .entry((e.template_id, e.slot_fingerprint))
                .or_default()
                .push(e.reply_text);
        }
        Self { table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_jsonl::<ScriptEntry>(path)?))
    }

    pub fn insert(&mut self, template_id: TemplateId, slots: &Slots, reply: impl Into<String>) {
        self.table
            .entry((template_id, slot_fingerprint(slots)))
            .or_default()
            .push(reply.into());
    }

    pub fn len(&self) -> usize {
        self.table.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let fingerprint = req.fingerprint();
        match self.table.get(&(req.template_id, fingerprint)) {
            Some(replies) if !replies.is_empty() => {
                let idx = req.seed.unwrap_or(0) as usize % replies.len();
                Ok(replies[idx].clone())
            }
            _ => Err(Error::OracleMiss {
                template_id: req.template_id.to_string(),
                fingerprint: req.fingerprint(),
            }),
        }
    }
}

/// Backend computed by a closure; handy for programmatic oracles.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        (self.0)(req)
    }
}

/// Wraps a backend and records every reply so a run can be replayed through
/// a [`ScriptedBackend`].
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<BTreeMap<(TemplateId, String), BTreeMap<u64, String>>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    /// Recorded entries in key order. Seeds recorded for a key must be
    /// contiguous from 0 so the replay selects the same reply.
    pub fn entries(&self) -> Result<Vec<ScriptEntry>> {
        let log = self.log.lock().expect("recording lock");
        let mut out = Vec::new();
        for ((template_id, fp), by_seed) in log.iter() {
            for (expected, (seed, reply)) in by_seed.iter().enumerate() {
                if *seed != expected as u64 {
                    return Err(Error::Validation(format!(
                        "recorded seeds for {template_id}/{fp} are not contiguous from 0"
                    )));
                }
                out.push(ScriptEntry {
                    template_id: *template_id,
                    slot_fingerprint: fp.clone(),
                    reply_text: reply.clone(),
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<usize> {
        write_jsonl(path, &self.entries()?)
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let reply = self.inner.complete(req)?;
        self.log
            .lock()
            .expect("recording lock")
            .entry((req.template_id, req.fingerprint()))
            .or_default()
            .insert(req.seed.unwrap_or(0), reply.clone());
        Ok(reply)
    }
}
