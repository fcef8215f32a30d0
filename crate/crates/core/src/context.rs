//! Turns samples into template slot values.

use crate::gateway::Slots;
use crate::ingest::{Catalog, HistEntry, ItemCentricSample, LabeledSample};

/// Placeholder for the target item when inferring general user preferences.
pub const NO_TARGET_ITEM: &str = "(none: describe the user's general preferences)";
/// Placeholder for the target user when inferring general item facts.
pub const NO_TARGET_USER: &str = "(none: describe the item in general)";

pub fn format_history(hist: &[HistEntry], catalog: &Catalog) -> String {
    if hist.is_empty() {
        return "(no history)".to_string();
    }
    hist.iter()
        .map(|(item, rating)| format!("- {} (rated {rating}/5)", catalog.title(item)))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_histories(hists: &[Vec<HistEntry>], catalog: &Catalog) -> String {
    if hists.is_empty() {
        return "(none)".to_string();
    }
    hists
        .iter()
        .enumerate()
        .map(|(k, h)| format!("User {}:\n{}", k + 1, format_history(h, catalog)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn slots(pairs: [(&str, String); 2]) -> Slots {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// `{hist, item}` for the user reasoning prompt.
pub fn user_slots(sample: &LabeledSample, catalog: &Catalog) -> Slots {
    slots([
        ("hist", format_history(&sample.hist, catalog)),
        ("item", catalog.describe(&sample.target_item)),
    ])
}

/// `{hist, item}` for inferring a user's knowledge without a target item.
pub fn user_inference_slots(hist: &[HistEntry], catalog: &Catalog) -> Slots {
    slots([
        ("hist", format_history(hist, catalog)),
        ("item", NO_TARGET_ITEM.to_string()),
    ])
}

/// `{item, pos, neg, hist}` for the item reasoning prompt; `hist` is the
/// target user's history.
pub fn item_slots(sample: &ItemCentricSample, catalog: &Catalog) -> Slots {
    let mut s = slots([
        ("item", catalog.describe(&sample.item)),
        ("pos", format_histories(&sample.pos, catalog)),
    ]);
    s.insert("neg".into(), format_histories(&sample.neg, catalog));
    s.insert("hist".into(), format_history(&sample.tar, catalog));
    s
}

pub fn item_inference_slots(
    item: &str,
    pos: &[Vec<HistEntry>],
    neg: &[Vec<HistEntry>],
    catalog: &Catalog,
) -> Slots {
    let mut s = slots([
        ("item", catalog.describe(item)),
        ("pos", format_histories(pos, catalog)),
    ]);
    s.insert("neg".into(), format_histories(neg, catalog));
    s.insert("hist".into(), NO_TARGET_USER.to_string());
    s
}

/// Adds `knowledge` (and optionally `reflection`) to a base context.
pub fn extend(base: &Slots, knowledge: &str, reflection: Option<&str>) -> Slots {
    let mut s = base.clone();
    s.insert("knowledge".into(), knowledge.to_string());
    if let Some(r) = reflection {
        s.insert("reflection".into(), r.to_string());
    }
    s
}
