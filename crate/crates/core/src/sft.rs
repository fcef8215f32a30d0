//! Supervised fine-tuning pairs for the actor (reasoning + refinement) and
//! reflection models, plus negative log-likelihood losses under a
//! pluggable token scorer.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::builder::{ReasonSample, RefineSample, ReflectSample};
use crate::error::{Error, Result};
use crate::gateway::{format_reflect, EntityKind, Stage, TemplateId, TemplateSet, Verdict};
use crate::jsonl::{write_json, write_jsonl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Reason,
    Refine,
    Reflect,
}

impl Capability {
    pub const ALL: [Capability; 3] = [Capability::Reason, Capability::Refine, Capability::Reflect];

    pub fn as_str(&self) -> &'static str {
        match self {
            Capability::Reason => "reason",
            Capability::Refine => "refine",
            Capability::Reflect => "reflect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "target")]
    pub target_text: String,
    pub capability: Capability,
    pub provenance_id: String,
}

fn export_err(id: &str, msg: impl Into<String>) -> Error {
    Error::Export {
        provenance_id: id.to_string(),
        message: msg.into(),
    }
}

fn pair_id(source: &str, cap: Capability) -> String {
    format!("{source}/{}", cap.as_str())
}

/// Builds SFT pairs from the three datasets of one entity kind.
///
/// Reflection targets are the canonical verdict line, followed by the
/// reflection when the verdict is unreasonable.
pub fn assemble(
    kind: EntityKind,
    reason: &[ReasonSample],
    reflect: &[ReflectSample],
    refine: &[RefineSample],
    templates: &TemplateSet,
) -> Result<Vec<SftPair>> {
    let mut pairs = Vec::with_capacity(reason.len() + reflect.len() + refine.len());
    let render = |stage: Stage, id: &str, ctx| {
        templates
            .render(TemplateId::new(kind, stage), ctx)
            .map_err(|e| export_err(id, e.to_string()))
    };

    for s in reason {
        if s.target_knowledge.trim().is_empty() {
            return Err(export_err(&s.provenance_id, "empty reasoning target"));
        }
        pairs.push(SftPair {
            input_text: render(Stage::Reason, &s.provenance_id, &s.input_context)?,
            target_text: s.target_knowledge.clone(),
            capability: Capability::Reason,
            provenance_id: pair_id(&s.provenance_id, Capability::Reason),
        });
    }
    for s in refine {
        if s.target_refined.trim().is_empty() {
            return Err(export_err(&s.provenance_id, "empty refinement target"));
        }
        pairs.push(SftPair {
            input_text: render(Stage::Refine, &s.provenance_id, &s.input_context)?,
            target_text: s.target_refined.clone(),
            capability: Capability::Refine,
            provenance_id: pair_id(&s.provenance_id, Capability::Refine),
        });
    }
    for s in reflect {
        let empty = s.reflection_text.trim().is_empty();
        if empty != (s.verdict == Verdict::Reasonable) {
            return Err(export_err(
                &s.provenance_id,
                "reflection must be empty exactly when the verdict is reasonable",
            ));
        }
        pairs.push(SftPair {
            input_text: render(Stage::Reflect, &s.provenance_id, &s.input_context)?,
            target_text: format_reflect(s.verdict, &s.reflection_text),
            capability: Capability::Reflect,
            provenance_id: pair_id(&s.provenance_id, Capability::Reflect),
        });
    }
    Ok(pairs)
}

/// Per-token log-probabilities of `target` given `input`.
pub trait TokenScorer: Sync {
    fn target_logprobs(&self, input: &str, target: &str) -> Vec<f64>;
}

/// Whitespace tokenizer over a per-token function
/// `(input, preceding target tokens, token) -> log p`.
pub struct WhitespaceScorer<F>(pub F);

impl<F> TokenScorer for WhitespaceScorer<F>
where
    F: Fn(&str, &[&str], &str) -> f64 + Sync,
{
    fn target_logprobs(&self, input: &str, target: &str) -> Vec<f64> {
        let tokens: Vec<&str> = target.split_whitespace().collect();
        (0..tokens.len())
            .map(|k| (self.0)(input, &tokens[..k], tokens[k]))
            .collect()
    }
}

/// Assigns the same log-probability to every whitespace token.
pub fn uniform_scorer(
    logprob: f64,
) -> WhitespaceScorer<impl Fn(&str, &[&str], &str) -> f64 + Sync> {
    WhitespaceScorer(move |_: &str, _: &[&str], _: &str| logprob)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_reason: f64,
    pub l_refine: f64,
    pub l_actor: f64,
    pub l_reflect: f64,
    pub n_reason: usize,
    pub n_refine: usize,
    pub n_reflect: usize,
}

/// Mean of a loss multiset; summed in sorted order so the result does not
/// depend on input order. Empty sets have mean 0.
fn mean(mut losses: Vec<f64>) -> f64 {
    if losses.is_empty() {
        return 0.0;
    }
    losses.sort_by(f64::total_cmp);
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Per pair: minus the summed target-token log-probabilities. Per
/// capability: the mean over its pairs. Actor loss: reasoning + refinement.
pub fn eval_losses(pairs: &[SftPair], scorer: &dyn TokenScorer) -> Result<LossReport> {
    let per_pair: Vec<(Capability, f64)> = pairs
        .par_iter()
        .map(|p| {
            let lps = scorer.target_logprobs(&p.input_text, &p.target_text);
            if let Some(bad) = lps.iter().find(|lp| !lp.is_finite()) {
                return Err(Error::Numeric {
                    provenance_id: p.provenance_id.clone(),
                    message: format!("scorer returned non-finite log-probability {bad}"),
                });
            }
            Ok((p.capability, -lps.iter().sum::<f64>()))
        })
        .collect::<Result<_>>()?;

    let of = |cap: Capability| -> Vec<f64> {
        per_pair
            .iter()
            .filter(|(c, _)| *c == cap)
            .map(|(_, l)| *l)
            .collect()
    };
    let (reason, refine, reflect) = (
        of(Capability::Reason),
        of(Capability::Refine),
        of(Capability::Reflect),
    );
    let (n_reason, n_refine, n_reflect) = (reason.len(), refine.len(), reflect.len());
    let l_reason = mean(reason);
    let l_refine = mean(refine);
    Ok(LossReport {
        l_reason,
        l_refine,
        l_actor: l_reason + l_refine,
        l_reflect: mean(reflect),
        n_reason,
        n_refine,
        n_reflect,
    })
}

/// Fine-tuning hyperparameters written next to the exported files. They
/// are recorded for downstream trainers only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMetadata {
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
    pub lora_target_modules: String,
    pub epochs: u32,
    pub files: Vec<SftFileInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftFileInfo {
    pub file: String,
    pub entity_kind: EntityKind,
    pub capability: Capability,
    pub model: String,
    pub n_pairs: usize,
}

impl Default for SftMetadata {
    fn default() -> Self {
        Self {
            lora_rank: 8,
            lora_alpha: 16,
            lora_dropout: 0.05,
            lora_target_modules: "all-linear".into(),
            epochs: 3,
            files: Vec::new(),
        }
    }
}

/// Writes `sft_<kind>_<capability>.jsonl` for each capability and returns
/// one file record per capability.
pub fn write_sft_files(
    dir: &Path,
    kind: EntityKind,
    pairs: &[SftPair],
) -> Result<Vec<SftFileInfo>> {
    let mut infos = Vec::new();
    for cap in Capability::ALL {
        let file = format!("sft_{kind}_{}.jsonl", cap.as_str());
        let n_pairs = write_jsonl(
            &dir.join(&file),
            pairs.iter().filter(|p| p.capability == cap),
        )?;
        infos.push(SftFileInfo {
            file,
            entity_kind: kind,
            capability: cap,
            model: match cap {
                Capability::Reflect => "reflector".into(),
                _ => "actor".into(),
            },
            n_pairs,
        });
    }
    Ok(infos)
}

pub fn write_metadata(dir: &Path, meta: &SftMetadata) -> Result<PathBuf> {
    let path = dir.join("sft_metadata.json");
    write_json(&path, meta)?;
    Ok(path)
}
