//! Line-marker protocol for actor and reflector replies.
//!
//! Actor replies carry `PREDICTION: Yes|No` and `KNOWLEDGE: ...`; reflector
//! replies carry `VERDICT: Reasonable|Unreasonable` and, when unreasonable,
//! `REFLECTION: ...`. Keys are case-insensitive, order does not matter and the
//! first occurrence of a key wins. A value runs until the next marker line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MARKERS: [&str; 4] = ["prediction", "knowledge", "verdict", "reflection"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonOutput {
    pub knowledge_text: String,
    pub prediction: bool,
}

/// Refinement replies share the reasoning format.
pub type RefineOutput = ReasonOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Reasonable,
    Unreasonable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectOutput {
    pub verdict: Verdict,
    pub reflection_text: String,
}

/// Splits a line into `(marker, value)` when it starts with `KEY:`.
fn marker_of(line: &str) -> Option<(&'static str, &str)> {
    let line = line.trim_start();
    let (key, value) = line.split_once(':')?;
    let key = key.trim().to_ascii_lowercase();
    MARKERS.iter().find(|m| **m == key).map(|m| (*m, value))
}

/// First value for each marker present in `raw`.
fn fields(raw: &str) -> Vec<(&'static str, String)> {
    let mut out: Vec<(&'static str, String)> = Vec::new();
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        if let Some((key, value)) = marker_of(line) {
            if out.iter().any(|(k, _)| *k == key) {
                current = None;
            } else {
                out.push((key, value.trim().to_string()));
                current = Some(out.len() - 1);
            }
        } else if let Some(idx) = current {
            let v = &mut out[idx].1;
            if !v.is_empty() {
                v.push('\n');
            }
            v.push_str(line.trim_end());
        }
    }
    for (_, v) in &mut out {
        *v = v.trim().to_string();
    }
    out
}

fn get<'a>(fields: &'a [(&'static str, String)], key: &str) -> Option<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.as_str())
}

fn word(value: &str) -> String {
    value
        .trim()
        .trim_end_matches(['.', '!', ','])
        .trim()
        .to_ascii_lowercase()
}

pub fn parse_reason(raw: &str) -> Result<ReasonOutput> {
    let f = fields(raw);
    let pred = get(&f, "prediction").ok_or_else(|| Error::Parse("missing PREDICTION".into()))?;
    let prediction = match word(pred).as_str() {
        "yes" => true,
        "no" => false,
        other => return Err(Error::Parse(format!("ambiguous PREDICTION {other:?}"))),
    };
    let knowledge = get(&f, "knowledge").ok_or_else(|| Error::Parse("missing KNOWLEDGE".into()))?;
    if knowledge.is_empty() {
        return Err(Error::Parse("empty KNOWLEDGE".into()));
    }
    Ok(ReasonOutput {
        knowledge_text: knowledge.to_string(),
        prediction,
    })
}

pub fn parse_refine(raw: &str) -> Result<RefineOutput> {
    parse_reason(raw)
}

pub fn parse_reflect(raw: &str) -> Result<ReflectOutput> {
    let f = fields(raw);
    let verdict = get(&f, "verdict").ok_or_else(|| Error::Parse("missing VERDICT".into()))?;
    match word(verdict).as_str() {
        "reasonable" => Ok(ReflectOutput {
            verdict: Verdict::Reasonable,
            reflection_text: String::new(),
        }),
        "unreasonable" => {
            let reflection = get(&f, "reflection").unwrap_or("");
            if reflection.is_empty() {
                return Err(Error::Parse(
                    "unreasonable verdict without REFLECTION".into(),
                ));
            }
            Ok(ReflectOutput {
                verdict: Verdict::Unreasonable,
                reflection_text: reflection.to_string(),
            })
        }
        other => Err(Error::Parse(format!("ambiguous VERDICT {other:?}"))),
    }
}

/// Canonical actor reply; `parse_reason(format_reason(k, p))` returns `(k, p)`.
pub fn format_reason(knowledge: &str, prediction: bool) -> String {
    format!(
        "PREDICTION: {}\nKNOWLEDGE: {knowledge}",
        if prediction { "Yes" } else { "No" }
    )
}

pub fn format_reflect(verdict: Verdict, reflection: &str) -> String {
    match verdict {
        Verdict::Reasonable => "VERDICT: Reasonable".to_string(),
        Verdict::Unreasonable => format!("VERDICT: Unreasonable\nREFLECTION: {reflection}"),
    }
}
