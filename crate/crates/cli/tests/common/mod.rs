//! Synthetic topic world and a deterministic stand-in language model.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use knowrec_cli::{Backends, Logger, Pipeline, PipelineConfig};
use knowrec_core::gateway::{
    format_reason, format_reflect, Backend, ChatRequest, EntityKind, RecordingBackend, Stage,
    Verdict,
};
use knowrec_core::hashing::stable_hash;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOPICS: [&str; 8] = [
    "space opera starships galaxies",
    "hardboiled detective noir crime",
    "frontier western cowboys ranch",
    "romantic comedy weddings love",
    "haunted house horror ghosts",
    "medieval fantasy dragons quests",
    "wartime drama battles soldiers",
    "nature documentary wildlife oceans",
];

pub struct World {
    pub item_topic: Vec<usize>,
    pub user_topic: Vec<usize>,
    pub ratings: String,
    pub items: String,
    pub n_interactions: usize,
}

/// Users like items of their own topic far more often than others. Item
/// titles carry no topic information.
pub fn world(n_users: usize, n_items: usize, per_user: usize, seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = TOPICS.len();
    let item_topic: Vec<usize> = (0..n_items).map(|_| rng.gen_range(0..t)).collect();
    let by_topic: Vec<Vec<usize>> = (0..t)
        .map(|k| (0..n_items).filter(|&i| item_topic[i] == k).collect())
        .collect();
    let user_topic: Vec<usize> = (0..n_users).map(|_| rng.gen_range(0..t)).collect();

    let mut ratings = String::new();
    let mut n = 0;
    for (u, &topic) in user_topic.iter().enumerate() {
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < per_user.min(n_items) {
            let item = if rng.gen_bool(0.5) {
                *by_topic[topic].choose(&mut rng).unwrap()
            } else {
                rng.gen_range(0..n_items)
            };
            if !seen.insert(item) {
                continue;
            }
            let p_like = if item_topic[item] == topic { 0.85 } else { 0.1 };
            let rating = if rng.gen_bool(p_like) {
                rng.gen_range(4..=5)
            } else {
                rng.gen_range(1..=3)
            };
            let ts: u64 = rng.gen_range(0..1_000_000_000);
            writeln!(ratings, "u{u}::{item}::{rating}::{ts}").unwrap();
            n += 1;
        }
    }
    let mut items = String::new();
    for i in 0..n_items {
        writeln!(items, "{i}::Item {i}::Misc").unwrap();
    }
    World {
        item_topic,
        user_topic,
        ratings,
        items,
        n_interactions: n,
    }
}

impl World {
    pub fn write(&self, dir: &Path) {
        std::fs::write(dir.join("ratings.dat"), &self.ratings).unwrap();
        std::fs::write(dir.join("movies.dat"), &self.items).unwrap();
    }
}

fn unit(key: &str, salt: u64) -> f64 {
    (stable_hash(key, salt) >> 11) as f64 / (1u64 << 53) as f64
}

/// Item ids mentioned as `Item <id>`, with the rating when present.
fn mentioned(text: &str) -> Vec<(usize, Option<u8>)> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut rest = line;
        while let Some(pos) = rest.find("Item ") {
            rest = &rest[pos + 5..];
            let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
            if let Ok(id) = digits.parse() {
                let rating = line
                    .find("(rated ")
                    .and_then(|p| line[p + 7..].chars().next())
                    .and_then(|c| c.to_digit(10))
                    .map(|d| d as u8);
                out.push((id, rating));
            }
        }
    }
    out
}

/// Stand-in actor and reflector. It reads topics off the histories it is
/// shown; draft `j` of an entity's knowledge names the right topic when a
/// per-entity uniform draw falls below `quality[j]`, so later drafts are
/// right whenever earlier ones were. The reflector approves right
/// knowledge unless it falsely rejects, and rejects wrong knowledge unless
/// it misses. The draft index rides along as trailing `!` marks, which the
/// hash encoder ignores.
pub struct Oracle {
    pub item_topic: Vec<usize>,
    pub quality: Vec<f64>,
    pub false_reject: f64,
    pub miss: f64,
}

impl Oracle {
    pub fn new(item_topic: Vec<usize>) -> Self {
        Self {
            item_topic,
            quality: vec![0.35, 0.7, 0.9],
            false_reject: 0.1,
            miss: 0.2,
        }
    }

    /// Majority topic among liked items, ties to the lowest topic.
    fn user_topic(&self, hist: &str) -> usize {
        let mut votes = [0usize; TOPICS.len()];
        for (id, rating) in mentioned(hist) {
            if rating.unwrap_or(0) >= 4 {
                if let Some(&t) = self.item_topic.get(id) {
                    votes[t] += 1;
                }
            }
        }
        let best = *votes.iter().max().unwrap();
        votes.iter().position(|&v| v == best).unwrap()
    }

    fn item_topic_of(&self, text: &str) -> usize {
        mentioned(text)
            .first()
            .and_then(|(id, _)| self.item_topic.get(*id).copied())
            .unwrap_or(0)
    }

    fn truth(&self, req: &ChatRequest) -> (String, usize) {
        let s = &req.slots;
        match req.template_id.kind() {
            EntityKind::User => (s["hist"].clone(), self.user_topic(&s["hist"])),
            EntityKind::Item => (
                format!("{}|{}", s["item"], s["hist"]),
                self.item_topic_of(&s["item"]),
            ),
        }
    }

    fn draft(&self, key: &str, truth: usize, j: usize) -> String {
        let q = self.quality[j.min(self.quality.len() - 1)];
        let topic = if unit(key, 11) < q {
            truth
        } else {
            let shift = 1 + (stable_hash(key, 100 + j as u64) as usize) % (TOPICS.len() - 1);
            (truth + shift) % TOPICS.len()
        };
        format!("Enjoys {}{}", TOPICS[topic], "!".repeat(j))
    }

    fn topic_of_knowledge(text: &str) -> Option<usize> {
        TOPICS.iter().position(|t| text.contains(t))
    }

    fn prediction(&self, req: &ChatRequest, knowledge: &str) -> bool {
        let s = &req.slots;
        let named = Self::topic_of_knowledge(knowledge);
        match req.template_id.kind() {
            EntityKind::User => named == Some(self.item_topic_of(&s["item"])),
            EntityKind::Item => named == Some(self.user_topic(&s["hist"])),
        }
    }
}

impl Backend for Oracle {
    fn complete(&self, req: &ChatRequest) -> knowrec_core::Result<String> {
        let (mut key, truth) = self.truth(req);
        if let Some(seed) = req.seed {
            write!(key, "#{seed}").unwrap();
        }
        let knowledge_in = req.slots.get("knowledge").map(String::as_str).unwrap_or("");
        let j = knowledge_in.chars().rev().take_while(|&c| c == '!').count();
        Ok(match req.template_id.stage() {
            Stage::Reason => {
                let k = self.draft(&key, truth, 0);
                format_reason(&k, self.prediction(req, &k))
            }
            Stage::Refine => {
                let k = self.draft(&key, truth, j + 1);
                format_reason(&k, self.prediction(req, &k))
            }
            Stage::Reflect => {
                let right = Self::topic_of_knowledge(knowledge_in) == Some(truth);
                let noise = unit(&key, 1000 + j as u64);
                let reasonable = if right {
                    noise >= self.false_reject
                } else {
                    noise < self.miss
                };
                if reasonable {
                    format_reflect(Verdict::Reasonable, "")
                } else {
                    format_reflect(
                        Verdict::Unreasonable,
                        "The stated taste does not match the liked items.",
                    )
                }
            }
        })
    }
}

pub const ROLES: [&str; 4] = [
    "user_actor",
    "user_reflector",
    "item_actor",
    "item_reflector",
];

/// Config with scripted backends under `scripts/`.
pub fn config_text(extra: &str) -> String {
    let mut s = String::from(
        "seed = 7\nout_dir = \"out\"\n\n[data]\nkind = \"movielens\"\ninteractions = \"ratings.dat\"\nitems = \"movies.dat\"\n\n",
    );
    for role in ROLES {
        writeln!(
            s,
            "[backends.{role}]\nmodel = \"{role}\"\nscripted = \"scripts/{role}.jsonl\"\n"
        )
        .unwrap();
    }
    s.push_str(extra);
    s
}

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, config_text(extra)).unwrap();
    path
}

/// Runs `build` and `infer` in-process against the oracle, recording every
/// reply into the scripted tables the config points at.
pub fn record_scripts(config: &Path, oracle: Oracle) {
    let mut cfg = PipelineConfig::load(config).unwrap();
    let scripts = config.parent().unwrap().join("scripts");
    std::fs::create_dir_all(&scripts).unwrap();
    let record_dir = tempfile::tempdir().unwrap();
    cfg.out_dir = record_dir.path().to_path_buf();

    let oracle = Arc::new(oracle);
    let recorders: Vec<Arc<RecordingBackend<Arc<Oracle>>>> = ROLES
        .iter()
        .map(|_| Arc::new(RecordingBackend::new(Arc::clone(&oracle))))
        .collect();
    let backends = Backends {
        user_actor: recorders[0].clone(),
        user_reflector: recorders[1].clone(),
        item_actor: recorders[2].clone(),
        item_reflector: recorders[3].clone(),
    };
    let pipeline = Pipeline::new(cfg, Logger::discard()).with_backends(backends);
    pipeline.build().unwrap();
    pipeline.infer().unwrap();
    for (role, rec) in ROLES.iter().zip(&recorders) {
        rec.save(&scripts.join(format!("{role}.jsonl"))).unwrap();
    }
}

/// Backends that send every role to the oracle.
pub fn oracle_backends(oracle: Oracle) -> Backends {
    let oracle: Arc<dyn Backend> = Arc::new(oracle);
    Backends {
        user_actor: Arc::clone(&oracle),
        user_reflector: Arc::clone(&oracle),
        item_actor: Arc::clone(&oracle),
        item_reflector: oracle,
    }
}

pub fn knowrec() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_knowrec"))
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}
