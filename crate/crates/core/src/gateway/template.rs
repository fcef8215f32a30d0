use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named slot values substituted into a template.
pub type Slots = BTreeMap<String, String>;

pub const PLACEHOLDERS: [&str; 6] = ["hist", "item", "knowledge", "reflection", "pos", "neg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    UserReason,
    UserReflect,
    UserRefine,
    ItemReason,
    ItemReflect,
    ItemRefine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Reason,
    Reflect,
    Refine,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::UserReason,
        TemplateId::UserReflect,
        TemplateId::UserRefine,
        TemplateId::ItemReason,
        TemplateId::ItemReflect,
        TemplateId::ItemRefine,
    ];

    pub fn new(kind: EntityKind, stage: Stage) -> Self {
        match (kind, stage) {
            (EntityKind::User, Stage::Reason) => TemplateId::UserReason,
            (EntityKind::User, Stage::Reflect) => TemplateId::UserReflect,
            (EntityKind::User, Stage::Refine) => TemplateId::UserRefine,
            (EntityKind::Item, Stage::Reason) => TemplateId::ItemReason,
            (EntityKind::Item, Stage::Reflect) => TemplateId::ItemReflect,
            (EntityKind::Item, Stage::Refine) => TemplateId::ItemRefine,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateId::UserReason => "user_reason",
            TemplateId::UserReflect => "user_reflect",
            TemplateId::UserRefine => "user_refine",
            TemplateId::ItemReason => "item_reason",
            TemplateId::ItemReflect => "item_reflect",
            TemplateId::ItemRefine => "item_refine",
        }
    }

    pub fn kind(&self) -> EntityKind {
        match self {
            TemplateId::UserReason | TemplateId::UserReflect | TemplateId::UserRefine => {
                EntityKind::User
            }
            _ => EntityKind::Item,
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            TemplateId::UserReason | TemplateId::ItemReason => Stage::Reason,
            TemplateId::UserReflect | TemplateId::ItemReflect => Stage::Reflect,
            TemplateId::UserRefine | TemplateId::ItemRefine => Stage::Refine,
        }
    }

    /// Placeholders the template body must contain, each exactly once.
    /// Item templates carry the target user's history in `hist`.
    pub fn placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateId::UserReason => &["hist", "item"],
            TemplateId::UserReflect => &["hist", "item", "knowledge"],
            TemplateId::UserRefine => &["hist", "item", "knowledge", "reflection"],
            TemplateId::ItemReason => &["item", "pos", "neg", "hist"],
            TemplateId::ItemReflect => &["item", "pos", "neg", "hist", "knowledge"],
            TemplateId::ItemRefine => &["item", "pos", "neg", "hist", "knowledge", "reflection"],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Template(format!("unknown template id {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: TemplateId,
    body: String,
    pieces: Vec<Piece>,
}

/// Splits `body` into literal text and known `{placeholder}` markers.
/// Braces around anything else are literal text.
fn tokenize(body: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name = after
            .find('}')
            .map(|close| &after[..close])
            .and_then(|n| PLACEHOLDERS.iter().find(|p| **p == n));
        match name {
            Some(p) => {
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(Piece::Slot(p));
                rest = &after[p.len() + 1..];
            }
            None => {
                text.push('{');
                rest = after;
            }
        }
    }
    text.push_str(rest);
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    pieces
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        let pieces = tokenize(&body);
        let used: Vec<&str> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(*s),
                Piece::Text(_) => None,
            })
            .collect();
        for p in id.placeholders() {
            let n = used.iter().filter(|u| *u == p).count();
            if n != 1 {
                return Err(Error::Template(format!(
                    "{id}: placeholder {{{p}}} must appear exactly once, found {n}"
                )));
            }
        }
        if let Some(extra) = used.iter().find(|u| !id.placeholders().contains(u)) {
            return Err(Error::Template(format!(
                "{id}: unexpected placeholder {{{extra}}}"
            )));
        }
        Ok(Self { id, body, pieces })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Single-pass substitution: slot values are inserted verbatim and never
    /// re-expanded.
    pub fn render(&self, slots: &Slots) -> Result<String> {
        let expected = self.id.placeholders();
        if let Some(missing) = expected.iter().find(|p| !slots.contains_key(**p)) {
            return Err(Error::Template(format!(
                "{}: missing slot {missing:?}",
                self.id
            )));
        }
        if let Some(extra) = slots.keys().find(|k| !expected.contains(&k.as_str())) {
            return Err(Error::Template(format!(
                "{}: unexpected slot {extra:?}",
                self.id
            )));
        }
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(&slots[*s]),
            }
        }
        Ok(out)
    }
}

const REASON_FORMAT: &str = "Answer in exactly this format:\n\
PREDICTION: Yes or No\n\
KNOWLEDGE: <the preference knowledge that justifies the prediction>";

const REFLECT_FORMAT: &str = "Answer in exactly this format:\n\
VERDICT: Reasonable or Unreasonable\n\
REFLECTION: <only when unreasonable: the flaws and how to correct them>";

fn default_body(id: TemplateId) -> String {
    let user_ctx =
        "The user rated these items (oldest first, ratings 1-5):\n{hist}\n\nTarget item:\n{item}";
    let item_ctx = "Target item:\n{item}\n\nHistories of users who liked it:\n{pos}\n\n\
Histories of users who disliked it:\n{neg}\n\nHistory of the target user:\n{hist}";
    match id {
        TemplateId::UserReason => format!(
            "Predict whether the user will like the target item, and state the user \
preferences that support your prediction.\n\n{user_ctx}\n\n{REASON_FORMAT}"
        ),
        TemplateId::UserReflect => format!(
            "Judge whether the user preference below is reasonable given the user's history. \
If it is not, point out its flaws and suggest corrections.\n\n{user_ctx}\n\n\
User preference:\n{{knowledge}}\n\n{REFLECT_FORMAT}"
        ),
        TemplateId::UserRefine => format!(
            "Revise the user preference using the reflection, then predict again whether the \
user will like the target item.\n\n{user_ctx}\n\nPrevious user preference:\n{{knowledge}}\n\n\
Reflection:\n{{reflection}}\n\n{REASON_FORMAT}"
        ),
        TemplateId::ItemReason => format!(
            "Describe the factual characteristics of the item that explain who likes it, then \
predict whether the target user will like it.\n\n{item_ctx}\n\n{REASON_FORMAT}"
        ),
        TemplateId::ItemReflect => format!(
            "Judge whether the item knowledge below is reasonable given who liked and disliked \
the item. If it is not, point out its flaws and suggest corrections.\n\n{item_ctx}\n\n\
Item knowledge:\n{{knowledge}}\n\n{REFLECT_FORMAT}"
        ),
        TemplateId::ItemRefine => format!(
            "Revise the item knowledge using the reflection, then predict again whether the \
target user will like the item.\n\n{item_ctx}\n\nPrevious item knowledge:\n{{knowledge}}\n\n\
Reflection:\n{{reflection}}\n\n{REASON_FORMAT}"
        ),
    }
}

/// The six templates, one per [`TemplateId`].
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| {
                (
                    id,
                    PromptTemplate::new(id, default_body(id)).expect("built-in template"),
                )
            })
            .collect();
        Self { templates }
    }
}

impl TemplateSet {
    /// Loads `<template_id>.txt` for every id from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{id}.txt"));
            let body = std::fs::read_to_string(&path)
                .map_err(|e| Error::Template(format!("{}: {e}", path.display())))?;
            templates.insert(id, PromptTemplate::new(id, body)?);
        }
        Ok(Self { templates })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (id, t) in &self.templates {
            std::fs::write(dir.join(format!("{id}.txt")), t.body())?;
        }
        Ok(())
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, slots: &Slots) -> Result<String> {
        self.get(id).render(slots)
    }
}
