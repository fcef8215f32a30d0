//! Uniform access to actor and reflection language models: prompt
//! templates, reply parsing and the backends that produce replies.

mod backend;
mod http;
mod parse;
mod template;

pub use backend::{
    slot_fingerprint, Backend, ChatRequest, FnBackend, Message, RecordingBackend, Role,
    ScriptEntry, ScriptedBackend,
};
pub use http::{HttpBackend, HttpConfig, JsonClient, RetryPolicy};
pub use parse::{
    format_reason, format_reflect, parse_reason, parse_refine, parse_reflect, ReasonOutput,
    RefineOutput, ReflectOutput, Verdict,
};
pub use template::{
    EntityKind, PromptTemplate, Slots, Stage, TemplateId, TemplateSet, PLACEHOLDERS,
};

use crate::error::Result;

/// Everything needed to call one model role: the backend, the model name
/// sent with each request and the sampling temperature.
#[derive(Clone, Copy)]
pub struct ModelHandle<'a> {
    pub backend: &'a dyn Backend,
    pub model_name: &'a str,
    pub temperature: f64,
}

impl<'a> ModelHandle<'a> {
    pub fn new(backend: &'a dyn Backend, model_name: &'a str) -> Self {
        Self {
            backend,
            model_name,
            temperature: 0.0,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn ask(
        &self,
        templates: &TemplateSet,
        template_id: TemplateId,
        slots: Slots,
        seed: Option<u64>,
    ) -> Result<String> {
        let req = ChatRequest::from_template(
            templates,
            template_id,
            slots,
            self.model_name,
            self.temperature,
            seed,
        )?;
        self.backend.complete(&req)
    }
}
