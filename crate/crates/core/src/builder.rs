//! Reasoning / reflection / refinement dataset construction.
//!
//! Every labeled sample goes through reason → reflect and is routed:
//!
//! | prediction | verdict      | outcome                                          |
//! |------------|--------------|--------------------------------------------------|
//! | correct    | reasonable   | reason sample + reflect sample (empty reflection) |
//! | wrong      | unreasonable | refine; if the new prediction is correct, reflect + refine samples |
//! | otherwise  |              | discarded                                        |

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{extend, item_slots, user_slots};
use crate::error::{Error, Result};
use crate::gateway::{
    parse_reason, parse_refine, parse_reflect, EntityKind, ModelHandle, Slots, Stage, TemplateId,
    TemplateSet, Verdict,
};
use crate::ingest::{Catalog, ItemCentricSample, LabeledSample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonSample {
    pub provenance_id: String,
    /// Slot values of the reasoning prompt.
    pub input_context: Slots,
    pub target_knowledge: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectSample {
    pub provenance_id: String,
    /// Reasoning context plus `knowledge`.
    pub input_context: Slots,
    pub verdict: Verdict,
    pub reflection_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineSample {
    pub provenance_id: String,
    /// Reasoning context plus `knowledge` and `reflection`.
    pub input_context: Slots,
    pub target_refined: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub n_input: usize,
    pub n_reason: usize,
    pub n_reflect_pos: usize,
    pub n_reflect_neg: usize,
    pub n_refine: usize,
    pub n_discarded_mixed: usize,
    pub n_discarded_failed_refine: usize,
    pub n_parse_errors: usize,
}

impl BuildStats {
    /// Each processed input lands in exactly one bucket.
    pub fn is_partition(&self) -> bool {
        self.n_input
            == self.n_reason
                + self.n_refine
                + self.n_discarded_mixed
                + self.n_discarded_failed_refine
                + self.n_parse_errors
            && self.n_reflect_pos == self.n_reason
            && self.n_reflect_neg == self.n_refine
    }
}

#[derive(Debug, Default)]
pub struct Datasets {
    pub reason: Vec<ReasonSample>,
    pub reflect: Vec<ReflectSample>,
    pub refine: Vec<RefineSample>,
    pub stats: BuildStats,
    /// Set when a backend failure stopped the run; the datasets and stats
    /// then cover every input before the failing one.
    pub aborted: Option<Error>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Number of passes over the inputs; pass `p` sends sample index `p`.
    pub passes: usize,
    /// Inputs handed to the worker pool at a time.
    pub chunk_size: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            passes: 1,
            chunk_size: 64,
        }
    }
}

/// Where one input ended up.
#[derive(Debug)]
enum Outcome {
    Accepted(ReasonSample, ReflectSample),
    Refined(ReflectSample, RefineSample),
    DiscardedMixed,
    DiscardedFailedRefine,
    ParseError,
}

pub struct Builder<'a> {
    pub templates: &'a TemplateSet,
    pub actor: ModelHandle<'a>,
    pub reflector: ModelHandle<'a>,
    pub config: BuildConfig,
}

impl<'a> Builder<'a> {
    pub fn build_user_datasets(&self, samples: &[LabeledSample], catalog: &Catalog) -> Datasets {
        let inputs: Vec<_> = samples
            .iter()
            .enumerate()
            .map(|(k, s)| (format!("user:{k}"), user_slots(s, catalog), s.label))
            .collect();
        self.build(EntityKind::User, &inputs)
    }

    pub fn build_item_datasets(
        &self,
        samples: &[ItemCentricSample],
        catalog: &Catalog,
    ) -> Datasets {
        let inputs: Vec<_> = samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                (
                    format!("item:{}:{k}", s.item),
                    item_slots(s, catalog),
                    s.label,
                )
            })
            .collect();
        self.build(EntityKind::Item, &inputs)
    }

    /// Routes `(provenance_id, reasoning slots, label)` triples.
    pub fn build(&self, kind: EntityKind, inputs: &[(String, Slots, bool)]) -> Datasets {
        let mut out = Datasets::default();
        let jobs: Vec<(u64, &(String, Slots, bool))> = (0..self.config.passes as u64)
            .flat_map(|pass| inputs.iter().map(move |input| (pass, input)))
            .collect();

        for chunk in jobs.chunks(self.config.chunk_size.max(1)) {
            let results: Vec<Result<Outcome>> = chunk
                .par_iter()
                .map(|(pass, (id, slots, label))| {
                    let id = if self.config.passes > 1 {
                        format!("{id}#p{pass}")
                    } else {
                        id.clone()
                    };
                    self.route(kind, id, slots, *label, *pass)
                })
                .collect();
            for r in results {
                match r {
                    Ok(outcome) => record(&mut out, outcome),
                    Err(e) => {
                        out.aborted = Some(e);
                        return out;
                    }
                }
            }
        }
        out
    }

    fn route(
        &self,
        kind: EntityKind,
        id: String,
        base: &Slots,
        label: bool,
        pass: u64,
    ) -> Result<Outcome> {
        let seed = Some(pass);
        let reason_raw = self.actor.ask(
            self.templates,
            TemplateId::new(kind, Stage::Reason),
            base.clone(),
            seed,
        )?;
        let Ok(reason) = parse_reason(&reason_raw) else {
            return Ok(Outcome::ParseError);
        };

        let reflect_ctx = extend(base, &reason.knowledge_text, None);
        let reflect_raw = self.reflector.ask(
            self.templates,
            TemplateId::new(kind, Stage::Reflect),
            reflect_ctx.clone(),
            seed,
        )?;
        let Ok(judged) = parse_reflect(&reflect_raw) else {
            return Ok(Outcome::ParseError);
        };

        let correct = reason.prediction == label;
        match (correct, judged.verdict) {
            (true, Verdict::Reasonable) => Ok(Outcome::Accepted(
                ReasonSample {
                    provenance_id: id.clone(),
                    input_context: base.clone(),
                    target_knowledge: reason.knowledge_text,
                },
                ReflectSample {
                    provenance_id: id,
                    input_context: reflect_ctx,
                    verdict: Verdict::Reasonable,
                    reflection_text: String::new(),
                },
            )),
            (false, Verdict::Unreasonable) => {
                let refine_ctx =
                    extend(base, &reason.knowledge_text, Some(&judged.reflection_text));
                let refine_raw = self.actor.ask(
                    self.templates,
                    TemplateId::new(kind, Stage::Refine),
                    refine_ctx.clone(),
                    seed,
                )?;
                let Ok(refined) = parse_refine(&refine_raw) else {
                    return Ok(Outcome::ParseError);
                };
                if refined.prediction != label {
                    return Ok(Outcome::DiscardedFailedRefine);
                }
                Ok(Outcome::Refined(
                    ReflectSample {
                        provenance_id: id.clone(),
                        input_context: reflect_ctx,
                        verdict: Verdict::Unreasonable,
                        reflection_text: judged.reflection_text,
                    },
                    RefineSample {
                        provenance_id: id,
                        input_context: refine_ctx,
                        target_refined: refined.knowledge_text,
                    },
                ))
            }
            _ => Ok(Outcome::DiscardedMixed),
        }
    }
}

fn record(out: &mut Datasets, outcome: Outcome) {
    let stats = &mut out.stats;
    stats.n_input += 1;
    match outcome {
        Outcome::Accepted(reason, reflect) => {
            stats.n_reason += 1;
            stats.n_reflect_pos += 1;
            out.reason.push(reason);
            out.reflect.push(reflect);
        }
        Outcome::Refined(reflect, refine) => {
            stats.n_refine += 1;
            stats.n_reflect_neg += 1;
            out.reflect.push(reflect);
            out.refine.push(refine);
        }
        Outcome::DiscardedMixed => stats.n_discarded_mixed += 1,
        Outcome::DiscardedFailedRefine => stats.n_discarded_failed_refine += 1,
        Outcome::ParseError => stats.n_parse_errors += 1,
    }
}
