//! Interaction logs, item metadata, label binarization, chronological
//! splitting and supervision-sample assembly.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::stable_hash;
use crate::jsonl::bit;

pub const DEFAULT_MAX_HIST: usize = 15;
pub const DEFAULT_N_POS: usize = 3;
pub const DEFAULT_N_NEG: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: u8,
    pub timestamp: u64,
}

impl Interaction {
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        rating: u8,
        timestamp: u64,
    ) -> Result<Self> {
        check_rating(rating)?;
        Ok(Self {
            user_id: user_id.into(),
            item_id: item_id.into(),
            rating,
            timestamp,
        })
    }

    fn sort_key(&self) -> (u64, &str, &str) {
        (self.timestamp, &self.user_id, &self.item_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub title: String,
    pub attributes: Vec<(String, String)>,
}

impl ItemMeta {
    pub fn attribute(&self, key: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// One-line description used inside prompts.
    pub fn describe(&self) -> String {
        let mut s = self.title.clone();
        for (k, v) in &self.attributes {
            s.push_str(&format!("; {k}: {v}"));
        }
        s
    }
}

/// Item metadata keyed by item id.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: BTreeMap<String, ItemMeta>,
}

impl Catalog {
    pub fn new(items: impl IntoIterator<Item = ItemMeta>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for m in items {
            if map.contains_key(&m.item_id) {
                return Err(Error::Validation(format!(
                    "duplicate item id {}",
                    m.item_id
                )));
            }
            map.insert(m.item_id.clone(), m);
        }
        Ok(Self { items: map })
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemMeta> {
        self.items.get(item_id)
    }

    pub fn title(&self, item_id: &str) -> String {
        self.get(item_id)
            .map(|m| m.title.clone())
            .unwrap_or_else(|| format!("item {item_id}"))
    }

    pub fn describe(&self, item_id: &str) -> String {
        self.get(item_id)
            .map(ItemMeta::describe)
            .unwrap_or_else(|| format!("item {item_id}"))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ItemMeta> {
        self.items.values()
    }
}

/// One entry of an interaction history: `(item_id, rating)`.
pub type HistEntry = (String, u8);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub hist: Vec<HistEntry>,
    pub target_item: String,
    #[serde(with = "bit")]
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCentricSample {
    pub item: String,
    pub pos: Vec<Vec<HistEntry>>,
    pub neg: Vec<Vec<HistEntry>>,
    pub tar: Vec<HistEntry>,
    #[serde(with = "bit")]
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Movielens,
    Amazon,
}

/// Rating threshold turning explicit ratings into binary labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPolicy {
    /// Smallest rating counted as positive.
    pub min_positive: u8,
}

impl LabelPolicy {
    pub fn for_kind(kind: DatasetKind) -> Self {
        match kind {
            // strictly greater than 3
            DatasetKind::Movielens => Self { min_positive: 4 },
            // only the top rating; "greater than 5" cannot occur on a 1..5 scale
            DatasetKind::Amazon => Self { min_positive: 5 },
        }
    }

    pub fn binarize(&self, rating: u8) -> Result<bool> {
        check_rating(rating)?;
        Ok(rating >= self.min_positive)
    }
}

pub fn binarize(rating: u8, kind: DatasetKind) -> Result<bool> {
    LabelPolicy::for_kind(kind).binarize(rating)
}

fn check_rating(rating: u8) -> Result<()> {
    if (1..=5).contains(&rating) {
        Ok(())
    } else {
        Err(Error::Validation(format!("rating {rating} outside 1..=5")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_fraction > 0.0 && self.train_fraction < 1.0 {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )))
        }
    }

    /// `floor(n * train_fraction)`, robust to the product landing a hair
    /// below an exact integer.
    pub fn n_train(&self, n: usize) -> usize {
        let exact = n as f64 * self.train_fraction;
        let rounded = exact.round();
        if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) {
            rounded as usize
        } else {
            exact.floor() as usize
        }
    }
}

/// Sorts by `(timestamp, user_id, item_id)` and cuts at
/// `floor(n * train_fraction)`.
pub fn chronological_split(
    interactions: &[Interaction],
    cfg: &SplitConfig,
) -> Result<(Vec<Interaction>, Vec<Interaction>)> {
    cfg.validate()?;
    if interactions.is_empty() {
        return Err(Error::Validation(
            "cannot split an empty interaction log".into(),
        ));
    }
    let mut sorted = interactions.to_vec();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let test = sorted.split_off(cfg.n_train(sorted.len()));
    Ok((sorted, test))
}

/// Groups interactions per user, each list in `(timestamp, item_id)` order.
fn by_user(interactions: &[Interaction]) -> BTreeMap<&str, Vec<&Interaction>> {
    let mut users: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for it in interactions {
        users.entry(it.user_id.as_str()).or_default().push(it);
    }
    for list in users.values_mut() {
        list.sort_by(|a, b| (a.timestamp, &a.item_id).cmp(&(b.timestamp, &b.item_id)));
    }
    users
}

/// Up to `max_hist` most recent interactions strictly before `before`,
/// excluding `exclude_item`, oldest first.
fn history_before(
    list: &[&Interaction],
    before: u64,
    exclude_item: &str,
    max_hist: usize,
) -> Vec<HistEntry> {
    let mut hist: Vec<HistEntry> = list
        .iter()
        .rev()
        .filter(|it| it.timestamp < before && it.item_id != exclude_item)
        .take(max_hist)
        .map(|it| (it.item_id.clone(), it.rating))
        .collect();
    hist.reverse();
    hist
}

/// Every interaction after a user's first becomes a target, with the
/// preceding interactions (at most `max_hist`) as history.
pub fn build_user_samples(
    train: &[Interaction],
    max_hist: usize,
    policy: LabelPolicy,
) -> Result<Vec<LabeledSample>> {
    Ok(build_user_samples_grouped(train, max_hist, policy)?
        .into_values()
        .flatten()
        .collect())
}

/// Same samples as [`build_user_samples`], keyed by user id.
pub fn build_user_samples_grouped(
    train: &[Interaction],
    max_hist: usize,
    policy: LabelPolicy,
) -> Result<BTreeMap<String, Vec<LabeledSample>>> {
    if max_hist == 0 {
        return Err(Error::Validation("max_hist must be at least 1".into()));
    }
    let mut out = BTreeMap::new();
    for (user, list) in by_user(train) {
        let mut samples = Vec::new();
        for target in list.iter().skip(1) {
            let hist = history_before(&list, target.timestamp, &target.item_id, max_hist);
            if hist.is_empty() {
                // every earlier interaction shares the target's timestamp
                continue;
            }
            samples.push(LabeledSample {
                hist,
                target_item: target.item_id.clone(),
                label: policy.binarize(target.rating)?,
            });
        }
        if !samples.is_empty() {
            out.insert(user.to_string(), samples);
        }
    }
    Ok(out)
}

/// Picks `floor(fraction * groups)` entities (at least one when any exist)
/// and one sample from each, returned in entity-id order.
pub fn select_per_entity<T: Clone>(
    groups: &BTreeMap<String, Vec<T>>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<(String, T)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "entity fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut ids: Vec<&String> = groups
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, _)| k)
        .collect();
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let n = ((ids.len() as f64 * fraction + 1e-9).floor() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(n);
    ids.sort();
    Ok(ids
        .into_iter()
        .map(|id| {
            let mut pick = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(id, 0x5e1e));
            let sample = groups[id]
                .choose(&mut pick)
                .expect("non-empty group")
                .clone();
            (id.clone(), sample)
        })
        .collect())
}

/// Each user's `max_hist` most recent interactions, oldest first.
pub fn user_histories(train: &[Interaction], max_hist: usize) -> BTreeMap<String, Vec<HistEntry>> {
    by_user(train)
        .into_iter()
        .map(|(user, list)| {
            let skip = list.len().saturating_sub(max_hist);
            let hist = list[skip..]
                .iter()
                .map(|it| (it.item_id.clone(), it.rating))
                .collect();
            (user.to_string(), hist)
        })
        .collect()
}

/// Liker and disliker histories describing an item at inference time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemNeighbourhood {
    pub pos: Vec<Vec<HistEntry>>,
    pub neg: Vec<Vec<HistEntry>>,
}

/// For every rated item, up to `n_pos` likers and `n_neg` dislikers (seeded
/// choice), each represented by their history before rating the item.
pub fn item_neighbourhoods(
    train: &[Interaction],
    cfg: &ItemSampleConfig,
    policy: LabelPolicy,
    seed: u64,
) -> Result<BTreeMap<String, ItemNeighbourhood>> {
    let users = by_user(train);
    let mut raters: BTreeMap<&str, BTreeMap<&str, &Interaction>> = BTreeMap::new();
    for it in train {
        let slot = raters
            .entry(it.item_id.as_str())
            .or_default()
            .entry(it.user_id.as_str())
            .or_insert(it);
        if it.timestamp > slot.timestamp {
            *slot = it;
        }
    }
    let mut out = BTreeMap::new();
    for (item, by_rater) in raters {
        let mut likers = Vec::new();
        let mut dislikers = Vec::new();
        for (user, it) in &by_rater {
            if policy.binarize(it.rating)? {
                likers.push(*user);
            } else {
                dislikers.push(*user);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(item, 0x1f0c));
        likers.shuffle(&mut rng);
        dislikers.shuffle(&mut rng);
        likers.truncate(cfg.n_pos);
        dislikers.truncate(cfg.n_neg);
        let hist_of =
            |user: &str| history_before(&users[user], by_rater[user].timestamp, item, cfg.max_hist);
        out.insert(
            item.to_string(),
            ItemNeighbourhood {
                pos: likers.into_iter().map(hist_of).collect(),
                neg: dislikers.into_iter().map(hist_of).collect(),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSampleConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub targets_per_item: usize,
    pub max_hist: usize,
}

impl Default for ItemSampleConfig {
    fn default() -> Self {
        Self {
            n_pos: DEFAULT_N_POS,
            n_neg: DEFAULT_N_NEG,
            targets_per_item: 1,
            max_hist: DEFAULT_MAX_HIST,
        }
    }
}

/// For each item with enough likers, dislikers and at least one further
/// user, picks target users and samples `n_pos` likers / `n_neg` dislikers
/// among the remaining users. Deterministic in `seed`.
pub fn build_item_samples(
    train: &[Interaction],
    cfg: &ItemSampleConfig,
    policy: LabelPolicy,
    seed: u64,
) -> Result<Vec<ItemCentricSample>> {
    if cfg.n_pos == 0 || cfg.n_neg == 0 {
        return Err(Error::Validation(
            "n_pos and n_neg must be at least 1".into(),
        ));
    }
    if cfg.max_hist == 0 {
        return Err(Error::Validation("max_hist must be at least 1".into()));
    }
    let users = by_user(train);

    // item -> user -> that user's (last) interaction with the item
    let mut raters: BTreeMap<&str, BTreeMap<&str, &Interaction>> = BTreeMap::new();
    for it in train {
        let slot = raters
            .entry(it.item_id.as_str())
            .or_default()
            .entry(it.user_id.as_str())
            .or_insert(it);
        if it.timestamp > slot.timestamp {
            *slot = it;
        }
    }

    let mut out = Vec::new();
    for (item, by_rater) in &raters {
        let mut likers = Vec::new();
        let mut dislikers = Vec::new();
        for (user, it) in by_rater {
            if policy.binarize(it.rating)? {
                likers.push(*user);
            } else {
                dislikers.push(*user);
            }
        }
        if likers.len() < cfg.n_pos
            || dislikers.len() < cfg.n_neg
            || likers.len() + dislikers.len() < cfg.n_pos + cfg.n_neg + 1
        {
            continue;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(item, 0x17e3));
        // a target is admissible if removing it still leaves enough of its class
        let mut candidates: Vec<&str> = by_rater
            .keys()
            .copied()
            .filter(|u| {
                let liked = likers.contains(u);
                if liked {
                    likers.len() > cfg.n_pos
                } else {
                    dislikers.len() > cfg.n_neg
                }
            })
            .collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(cfg.targets_per_item);

        let hist_of = |user: &str| -> Vec<HistEntry> {
            let it = by_rater[user];
            history_before(&users[user], it.timestamp, item, cfg.max_hist)
        };

        for target in candidates {
            let mut pos_pool: Vec<&str> = likers.iter().copied().filter(|u| *u != target).collect();
            let mut neg_pool: Vec<&str> =
                dislikers.iter().copied().filter(|u| *u != target).collect();
            pos_pool.shuffle(&mut rng);
            neg_pool.shuffle(&mut rng);
            pos_pool.truncate(cfg.n_pos);
            neg_pool.truncate(cfg.n_neg);
            out.push(ItemCentricSample {
                item: (*item).to_string(),
                pos: pos_pool.into_iter().map(hist_of).collect(),
                neg: neg_pool.into_iter().map(hist_of).collect(),
                tar: hist_of(target),
                label: policy.binarize(by_rater[target].rating)?,
            });
        }
    }
    Ok(out)
}

/// Delimiter-separated file layouts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogFormat {
    pub delimiter: String,
    /// Separator between attributes inside an item-metadata line's third field.
    pub attribute_separator: String,
    pub skip_header: bool,
}

impl Default for LogFormat {
    fn default() -> Self {
        // MovieLens-1M: `UserID::MovieID::Rating::Timestamp`, `MovieID::Title::Genres`
        Self {
            delimiter: "::".into(),
            attribute_separator: "|".into(),
            skip_header: false,
        }
    }
}

fn read_lossy(path: &Path) -> Result<String> {
    // MovieLens ships latin-1 titles
    let bytes = std::fs::read(path)?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn parse_rating(raw: &str) -> Option<u8> {
    let v: f64 = raw.trim().parse().ok()?;
    if v.fract() != 0.0 || !(1.0..=5.0).contains(&v) {
        return None;
    }
    Some(v as u8)
}

pub fn parse_interactions(text: &str, fmt: &LogFormat) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let lines = text.lines().enumerate().skip(usize::from(fmt.skip_header));
    for (lineno, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(fmt.delimiter.as_str()).collect();
        let bad = |what: &str| Error::Validation(format!("line {}: {what}: {line:?}", lineno + 1));
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let rating =
            parse_rating(fields[2]).ok_or_else(|| bad("rating must be an integer in 1..=5"))?;
        let timestamp: u64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| bad("timestamp must be a non-negative integer"))?;
        let it = Interaction::new(fields[0].trim(), fields[1].trim(), rating, timestamp)?;
        if !seen.insert((it.user_id.clone(), it.item_id.clone(), it.timestamp)) {
            return Err(bad("duplicate (user, item, timestamp)"));
        }
        out.push(it);
    }
    Ok(out)
}

/// Parses `item_id<d>title[<d>attributes]`. Attribute parts of the form
/// `key=value` are kept as-is; bare parts (MovieLens genres) are joined
/// under the `genres` key.
pub fn parse_item_meta(text: &str, fmt: &LogFormat) -> Result<Vec<ItemMeta>> {
    let mut out = Vec::new();
    let lines = text.lines().enumerate().skip(usize::from(fmt.skip_header));
    for (lineno, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Validation(format!("line {}: {what}: {line:?}", lineno + 1));
        let mut fields = line.splitn(3, fmt.delimiter.as_str());
        let item_id = fields.next().unwrap_or("").trim();
        if item_id.is_empty() {
            return Err(bad("empty item id"));
        }
        let title = fields.next().ok_or_else(|| bad("missing title"))?.trim();
        let mut attributes: Vec<(String, String)> = Vec::new();
        let mut bare = Vec::new();
        if let Some(rest) = fields.next() {
            for part in rest.split(fmt.attribute_separator.as_str()) {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                match part.split_once('=') {
                    Some((k, v)) => attributes.push((k.trim().into(), v.trim().into())),
                    None => bare.push(part),
                }
            }
        }
        if !bare.is_empty() {
            attributes.push(("genres".into(), bare.join("|")));
        }
        let mut keys = BTreeSet::new();
        for (k, _) in &attributes {
            if !keys.insert(k.as_str()) {
                return Err(bad(&format!("duplicate attribute key {k:?}")));
            }
        }
        out.push(ItemMeta {
            item_id: item_id.into(),
            title: title.into(),
            attributes,
        });
    }
    Ok(out)
}

pub fn load_interactions(path: &Path, fmt: &LogFormat) -> Result<Vec<Interaction>> {
    parse_interactions(&read_lossy(path)?, fmt)
}

pub fn load_catalog(path: &Path, fmt: &LogFormat) -> Result<Catalog> {
    Catalog::new(parse_item_meta(&read_lossy(path)?, fmt)?)
}
