//! Inference-time knowledge generation.
//!
//! * Iterative refinement: generate, ask the reflector, refine with its
//!   feedback until it approves or the retry budget is spent.
//! * Reflection as a filter: draw `k` candidates, keep the ones the
//!   reflector approves and average their embeddings, falling back to the
//!   average of all candidates when none is approved.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::extend;
use crate::encoder::{EmbeddingVector, TextEncoder};
use crate::error::{Error, Result};
use crate::gateway::{
    parse_reason, parse_refine, parse_reflect, EntityKind, ModelHandle, Slots, Stage, TemplateId,
    TemplateSet, Verdict,
};

pub const DEFAULT_MAX_RETRIES: usize = 1;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Approved,
    RetriesExhausted,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Iteration {
    pub knowledge_text: String,
    /// `None` when the reflector's reply could not be parsed.
    pub verdict: Option<Verdict>,
    pub reflection_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub iterations: Vec<Iteration>,
    pub stop_reason: StopReason,
}

impl RefinementTrace {
    /// Checks the structural invariants of a finished trace.
    pub fn is_valid(&self, max_retries: usize) -> bool {
        let n = self.iterations.len();
        if n == 0 || n > max_retries + 1 {
            return false;
        }
        let (last, rest) = self.iterations.split_last().expect("non-empty");
        let rest_ok = rest
            .iter()
            .all(|it| it.verdict == Some(Verdict::Unreasonable) && !it.reflection_text.is_empty());
        let approved = last.verdict == Some(Verdict::Reasonable);
        rest_ok && (approved == (self.stop_reason == StopReason::Approved))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterResult {
    pub candidates: Vec<(String, Verdict)>,
    pub kept_indices: Vec<usize>,
    pub fallback_used: bool,
}

/// Actor and reflector for one entity kind.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub templates: &'a TemplateSet,
    pub kind: EntityKind,
    pub actor: ModelHandle<'a>,
    pub reflector: ModelHandle<'a>,
}

impl Models<'_> {
    fn template(&self, stage: Stage) -> TemplateId {
        TemplateId::new(self.kind, stage)
    }
}

pub fn iterative_refine(
    models: &Models<'_>,
    context: &Slots,
    max_retries: usize,
) -> Result<(String, RefinementTrace)> {
    let first = models.actor.ask(
        models.templates,
        models.template(Stage::Reason),
        context.clone(),
        None,
    )?;
    let mut knowledge = parse_reason(&first)
        .map_err(|e| Error::Inference(format!("initial generation unparseable: {e}")))?
        .knowledge_text;

    let mut iterations = Vec::new();
    let stop_reason = loop {
        let raw = models.reflector.ask(
            models.templates,
            models.template(Stage::Reflect),
            extend(context, &knowledge, None),
            None,
        )?;
        let judged = match parse_reflect(&raw) {
            Ok(j) => j,
            Err(_) => {
                iterations.push(Iteration {
                    knowledge_text: knowledge.clone(),
                    verdict: None,
                    reflection_text: String::new(),
                });
                break StopReason::ParseFailure;
            }
        };
        iterations.push(Iteration {
            knowledge_text: knowledge.clone(),
            verdict: Some(judged.verdict),
            reflection_text: judged.reflection_text.clone(),
        });
        if judged.verdict == Verdict::Reasonable {
            break StopReason::Approved;
        }
        if iterations.len() > max_retries {
            break StopReason::RetriesExhausted;
        }
        let raw = models.actor.ask(
            models.templates,
            models.template(Stage::Refine),
            extend(context, &knowledge, Some(&judged.reflection_text)),
            None,
        )?;
        match parse_refine(&raw) {
            Ok(refined) => knowledge = refined.knowledge_text,
            Err(_) => break StopReason::ParseFailure,
        }
    };

    Ok((
        knowledge,
        RefinementTrace {
            iterations,
            stop_reason,
        },
    ))
}

/// Draws `k` candidates (sample indices `0..k`), keeps the approved ones
/// and returns the mean of their encodings.
///
/// Candidates whose reply cannot be parsed are dropped; a reflector reply
/// that cannot be parsed counts as disapproval.
pub fn filter_knowledge(
    models: &Models<'_>,
    context: &Slots,
    k: usize,
    encoder: &dyn TextEncoder,
) -> Result<(EmbeddingVector, FilterResult)> {
    if k == 0 {
        return Err(Error::Validation("filter strategy needs k >= 1".into()));
    }
    if !(models.actor.temperature > 0.0) {
        return Err(Error::Validation(
            "filter strategy samples candidates and needs actor temperature > 0".into(),
        ));
    }

    let mut texts = Vec::with_capacity(k);
    for j in 0..k as u64 {
        let raw = models.actor.ask(
            models.templates,
            models.template(Stage::Reason),
            context.clone(),
            Some(j),
        )?;
        if let Ok(out) = parse_reason(&raw) {
            texts.push(out.knowledge_text);
        }
    }
    if texts.is_empty() {
        return Err(Error::Inference(format!(
            "all {k} candidates were unparseable"
        )));
    }

    let mut candidates = Vec::with_capacity(texts.len());
    for text in texts {
        let raw = models.reflector.ask(
            models.templates,
            models.template(Stage::Reflect),
            extend(context, &text, None),
            None,
        )?;
        let verdict = parse_reflect(&raw).map_or(Verdict::Unreasonable, |r| r.verdict);
        candidates.push((text, verdict));
    }

    let refs: Vec<&str> = candidates.iter().map(|(t, _)| t.as_str()).collect();
    let encodings = encoder.encode_batch(&refs)?;
    let kept_indices: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| *v == Verdict::Reasonable)
        .map(|(i, _)| i)
        .collect();
    let fallback_used = kept_indices.is_empty();
    let selected: Vec<&EmbeddingVector> = if fallback_used {
        encodings.iter().collect()
    } else {
        kept_indices.iter().map(|&i| &encodings[i]).collect()
    };
    Ok((
        EmbeddingVector::mean(&selected),
        FilterResult {
            candidates,
            kept_indices,
            fallback_used,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Iterative,
    Filter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub max_retries: usize,
    pub k: usize,
    /// Actor temperature for the filter strategy's candidate draws.
    pub temperature: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Iterative,
            max_retries: DEFAULT_MAX_RETRIES,
            k: DEFAULT_K,
            temperature: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum TraceSummary {
    Iterative {
        iterations: usize,
        stop_reason: StopReason,
    },
    Filter {
        candidates: usize,
        kept: Vec<usize>,
        fallback_used: bool,
    },
}

/// One line of the knowledge store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub entity_kind: EntityKind,
    pub entity_id: String,
    pub knowledge_text: String,
    pub trace: TraceSummary,
}

/// Runs the configured strategy for one entity and embeds the result.
pub fn infer_entity(
    models: &Models<'_>,
    entity_id: &str,
    context: &Slots,
    cfg: &StrategyConfig,
    encoder: &dyn TextEncoder,
) -> Result<(KnowledgeRecord, EmbeddingVector)> {
    match cfg.strategy {
        Strategy::Iterative => {
            let (knowledge, trace) = iterative_refine(models, context, cfg.max_retries)?;
            let embedding = encoder.encode_one(&knowledge)?;
            Ok((
                KnowledgeRecord {
                    entity_kind: models.kind,
                    entity_id: entity_id.to_string(),
                    knowledge_text: knowledge,
                    trace: TraceSummary::Iterative {
                        iterations: trace.iterations.len(),
                        stop_reason: trace.stop_reason,
                    },
                },
                embedding,
            ))
        }
        Strategy::Filter => {
            let models = Models {
                actor: models.actor.with_temperature(cfg.temperature),
                ..*models
            };
            let (embedding, result) = filter_knowledge(&models, context, cfg.k, encoder)?;
            let shown: Vec<&str> = if result.fallback_used {
                result.candidates.iter().map(|(t, _)| t.as_str()).collect()
            } else {
                result
                    .kept_indices
                    .iter()
                    .map(|&i| result.candidates[i].0.as_str())
                    .collect()
            };
            Ok((
                KnowledgeRecord {
                    entity_kind: models.kind,
                    entity_id: entity_id.to_string(),
                    knowledge_text: shown.join("\n"),
                    trace: TraceSummary::Filter {
                        candidates: result.candidates.len(),
                        kept: result.kept_indices,
                        fallback_used: result.fallback_used,
                    },
                },
                embedding,
            ))
        }
    }
}

/// Entity-parallel inference; results come back in input order.
pub fn infer_all(
    models: &Models<'_>,
    entities: &[(String, Slots)],
    cfg: &StrategyConfig,
    encoder: &dyn TextEncoder,
) -> Result<Vec<(KnowledgeRecord, EmbeddingVector)>> {
    entities
        .par_iter()
        .map(|(id, ctx)| infer_entity(models, id, ctx, cfg, encoder))
        .collect()
}
