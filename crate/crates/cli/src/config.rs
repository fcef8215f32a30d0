//! TOML pipeline configuration.

use std::path::{Path, PathBuf};

use knowrec_core::ctr::TrainConfig;
use knowrec_core::encoder::HashEncoderConfig;
use knowrec_core::gateway::{HttpConfig, TemplateId};
use knowrec_core::inference::{Strategy, StrategyConfig};
use knowrec_core::ingest::{
    DatasetKind, ItemSampleConfig, LabelPolicy, LogFormat, SplitConfig, DEFAULT_MAX_HIST,
    DEFAULT_N_NEG, DEFAULT_N_POS,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub builder: BuilderConfig,
    #[serde(default)]
    pub templates: TemplatesConfig,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub ctr: CtrConfig,
}

fn default_seed() -> u64 {
    2024
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub interactions: PathBuf,
    #[serde(default)]
    pub items: Option<PathBuf>,
    #[serde(default)]
    pub format: LogFormat,
    /// Overrides the dataset's rating threshold.
    #[serde(default)]
    pub min_positive: Option<u8>,
}

impl DataConfig {
    pub fn policy(&self) -> LabelPolicy {
        match self.min_positive {
            Some(min_positive) => LabelPolicy { min_positive },
            None => LabelPolicy::for_kind(self.kind),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuilderConfig {
    pub passes: usize,
    /// Share of users and of items drawn for dataset construction, one
    /// sample each.
    pub entity_fraction: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub max_hist: usize,
    pub chunk_size: usize,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            passes: 1,
            entity_fraction: 0.4,
            n_pos: DEFAULT_N_POS,
            n_neg: DEFAULT_N_NEG,
            max_hist: DEFAULT_MAX_HIST,
            chunk_size: 64,
        }
    }
}

impl BuilderConfig {
    pub fn item_samples(&self) -> ItemSampleConfig {
        ItemSampleConfig {
            n_pos: self.n_pos,
            n_neg: self.n_neg,
            targets_per_item: 1,
            max_hist: self.max_hist,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesConfig {
    /// Directory holding `<template_id>.txt` for all six templates; the
    /// built-in templates are used when absent.
    pub dir: Option<PathBuf>,
}

/// Where one model role gets its replies: a scripted table or an endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub scripted: Option<PathBuf>,
    #[serde(default)]
    pub http: Option<HttpConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub user_actor: Option<BackendConfig>,
    pub user_reflector: Option<BackendConfig>,
    pub item_actor: Option<BackendConfig>,
    pub item_reflector: Option<BackendConfig>,
}

impl BackendsConfig {
    pub fn roles(&self) -> [(&'static str, Option<&BackendConfig>); 4] {
        [
            ("user_actor", self.user_actor.as_ref()),
            ("user_reflector", self.user_reflector.as_ref()),
            ("item_actor", self.item_actor.as_ref()),
            ("item_reflector", self.item_reflector.as_ref()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderConfig {
    Hash {
        #[serde(default = "default_dims")]
        dims: usize,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Remote {
        dims: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        http: HttpConfig,
    },
}

fn default_dims() -> usize {
    HashEncoderConfig::default().dims
}

fn default_true() -> bool {
    true
}

fn default_batch() -> usize {
    32
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let d = HashEncoderConfig::default();
        EncoderConfig::Hash {
            dims: d.dims,
            normalize: d.normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtrConfig {
    /// Categorical fields: `user_id`, `item_id`, `title`, or any item
    /// attribute key.
    pub fields: Vec<String>,
    /// Training hyperparameters; `seed` is replaced by the global seed.
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            fields: vec!["user_id".into(), "item_id".into()],
            train: TrainConfig::default(),
        }
    }
}

/// Resolves relative paths against `base`.
fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.out_dir);
        rebase(base, &mut cfg.data.interactions);
        if let Some(p) = cfg.data.items.as_mut() {
            rebase(base, p);
        }
        if let Some(p) = cfg.templates.dir.as_mut() {
            rebase(base, p);
        }
        for b in [
            &mut cfg.backends.user_actor,
            &mut cfg.backends.user_reflector,
            &mut cfg.backends.item_actor,
            &mut cfg.backends.item_reflector,
        ]
        .into_iter()
        .flatten()
        {
            if let Some(p) = b.scripted.as_mut() {
                rebase(base, p);
            }
        }
        Ok(cfg)
    }

    /// Static checks shared by every subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.split
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(m) = self.data.min_positive {
            if !(1..=5).contains(&m) {
                return bad(format!("data.min_positive must lie in 1..=5, got {m}"));
            }
        }
        let b = &self.builder;
        if b.passes == 0 || b.chunk_size == 0 {
            return bad("builder.passes and builder.chunk_size must be positive".into());
        }
        if !(b.entity_fraction > 0.0 && b.entity_fraction <= 1.0) {
            return bad(format!(
                "builder.entity_fraction must lie in (0, 1], got {}",
                b.entity_fraction
            ));
        }
        if b.n_pos == 0 || b.n_neg == 0 || b.max_hist == 0 {
            return bad("builder.n_pos, n_neg and max_hist must be positive".into());
        }
        let s = &self.strategy;
        if s.strategy == Strategy::Filter && (s.k == 0 || !(s.temperature > 0.0)) {
            return bad("filter strategy needs k >= 1 and temperature > 0".into());
        }
        match &self.encoder {
            EncoderConfig::Hash { dims, .. } | EncoderConfig::Remote { dims, .. } if *dims == 0 => {
                return bad("encoder.dims must be positive".into())
            }
            _ => {}
        }
        if self.ctr.fields.is_empty() {
            return bad("ctr.fields must name at least one field".into());
        }
        self.ctr
            .train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for (role, b) in self.backends.roles() {
            if let Some(b) = b {
                if b.scripted.is_some() == b.http.is_some() {
                    return bad(format!(
                        "backends.{role}: set exactly one of `scripted` or `http`"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every model role must be configured and scripted tables must exist.
    pub fn check_backends(&self) -> Result<(), CliError> {
        for (role, b) in self.backends.roles() {
            match b {
                None => {
                    return Err(CliError::Config(format!(
                        "backends.{role} is not configured"
                    )))
                }
                Some(BackendConfig {
                    scripted: Some(p), ..
                }) if !p.is_file() => {
                    return Err(CliError::Config(format!(
                        "backends.{role}: scripted file {} not found",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// A configured template directory must hold all six templates.
    pub fn check_templates(&self) -> Result<(), CliError> {
        if let Some(dir) = &self.templates.dir {
            for id in TemplateId::ALL {
                let p = dir.join(format!("{id}.txt"));
                if !p.is_file() {
                    return Err(CliError::Config(format!(
                        "template file {} not found",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_data_inputs(&self) -> Result<(), CliError> {
        let mut paths = vec![&self.data.interactions];
        paths.extend(self.data.items.as_ref());
        for p in paths {
            if !p.is_file() {
                return Err(CliError::Config(format!(
                    "data file {} not found",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Every default spelled out; `knowrec` does not read this, it documents
/// the format.
pub const EXAMPLE: &str = r#"seed = 2024
out_dir = "out"

[data]
kind = "movielens"            # movielens: positive iff rating > 3; amazon: rating == 5
interactions = "ratings.dat"  # user::item::rating::timestamp
items = "movies.dat"          # item::title::attributes
# min_positive = 4

[data.format]
delimiter = "::"
attribute_separator = "|"
skip_header = false

[split]
train_fraction = 0.8          # first 80% of interactions in time order

[builder]
passes = 1                    # one supervision sample per user/item per pass
entity_fraction = 0.4         # 40% of users and items
n_pos = 3
n_neg = 3
max_hist = 15
chunk_size = 64

[templates]
# dir = "templates"           # user_reason.txt ... item_refine.txt

[backends.user_actor]
model = "actor"
scripted = "scripts/user_actor.jsonl"

[backends.user_reflector]
model = "reflector"
scripted = "scripts/user_reflector.jsonl"

[backends.item_actor]
model = "actor"
http = { url = "http://localhost:8000/v1/chat/completions", api_key_env = "KNOWREC_API_KEY" }

[backends.item_reflector]
model = "reflector"
scripted = "scripts/item_reflector.jsonl"

[strategy]
strategy = "iterative"        # or "filter"
max_retries = 1               # one refinement step
k = 3
temperature = 0.7

[encoder]
kind = "hash"
dims = 64
normalize = true

[ctr]
fields = ["user_id", "item_id"]
emb_dim = 8
hidden = [32]
connector_hidden = 16
learning_rate = 0.1
epochs = 30
batch_size = 16
clamp_eps = 1e-7
backbone = "mlp"              # or "deepfm"
"#;
