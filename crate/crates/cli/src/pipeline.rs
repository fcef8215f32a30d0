//! The five subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use knowrec_core::builder::{
    BuildConfig, Builder, Datasets, ReasonSample, RefineSample, ReflectSample,
};
use knowrec_core::context::{item_inference_slots, item_slots, user_inference_slots, user_slots};
use knowrec_core::ctr::{
    self, relative_improvement, relative_reduction, Checkpoint, CtrExample, FeatureSpace, Metrics,
    TrainReport,
};
use knowrec_core::encoder::{
    EmbeddingStore, EmbeddingVector, HashEncoder, HashEncoderConfig, RemoteEncoder, TextEncoder,
};
use knowrec_core::gateway::{
    Backend, EntityKind, HttpBackend, ModelHandle, ScriptedBackend, Slots, TemplateSet,
};
use knowrec_core::inference::{infer_all, KnowledgeRecord, Models};
use knowrec_core::ingest::{
    build_item_samples, build_user_samples_grouped, chronological_split, item_neighbourhoods,
    load_catalog, load_interactions, select_per_entity, user_histories, Catalog, Interaction,
};
use knowrec_core::jsonl::{read_jsonl, write_json, write_jsonl};
use knowrec_core::sft::{assemble, write_metadata, write_sft_files, SftMetadata};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{BackendConfig, EncoderConfig, PipelineConfig};
use crate::{config_err, runtime, CliError, Logger};

/// One backend per model role.
#[derive(Clone)]
pub struct Backends {
    pub user_actor: Arc<dyn Backend>,
    pub user_reflector: Arc<dyn Backend>,
    pub item_actor: Arc<dyn Backend>,
    pub item_reflector: Arc<dyn Backend>,
}

/// Stats file contents: routing counters plus the abort reason, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub entity_kind: EntityKind,
    #[serde(flatten)]
    pub stats: knowrec_core::builder::BuildStats,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub base: Metrics,
    pub fused: Metrics,
    /// `(fused - base) / base * 100`.
    pub auc_rel_impr_pct: f64,
    /// `(base - fused) / base * 100`; positive means lower loss.
    pub logloss_rel_impr_pct: f64,
}

impl Comparison {
    pub fn new(base: Metrics, fused: Metrics) -> Self {
        Self {
            base,
            fused,
            auc_rel_impr_pct: relative_improvement(base.auc, fused.auc),
            logloss_rel_impr_pct: relative_reduction(base.logloss, fused.logloss),
        }
    }

    pub fn table(&self) -> String {
        format!(
            "| model | AUC | LogLoss | AUC Rel. Impr. | LogLoss Rel. Impr. |\n\
             |---|---|---|---|---|\n\
             | base | {:.4} | {:.4} | | |\n\
             | fused | {:.4} | {:.4} | {:+.2}% | {:+.2}% |\n",
            self.base.auc,
            self.base.logloss,
            self.fused.auc,
            self.fused.logloss,
            self.auc_rel_impr_pct,
            self.logloss_rel_impr_pct,
        )
    }
}

struct Data {
    catalog: Catalog,
    train: Vec<Interaction>,
    test: Vec<Interaction>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub log: Logger,
    backends: Option<Backends>,
}

const DATASETS: &str = "datasets";
const SFT: &str = "sft";
const KNOWLEDGE: &str = "knowledge";
const MODELS: &str = "models";
const METRICS: &str = "metrics";

fn kinds() -> [EntityKind; 2] {
    [EntityKind::User, EntityKind::Item]
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{} not found; {hint}",
            path.display()
        )))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_backend(role: &str, cfg: &BackendConfig) -> Result<Arc<dyn Backend>, CliError> {
    let err = |e: knowrec_core::Error| CliError::Config(format!("backends.{role}: {e}"));
    match (&cfg.scripted, &cfg.http) {
        (Some(path), None) => Ok(Arc::new(ScriptedBackend::load(path).map_err(err)?)),
        (None, Some(http)) => Ok(Arc::new(HttpBackend::new(http.clone()).map_err(err)?)),
        _ => Err(CliError::Config(format!(
            "backends.{role}: set exactly one of `scripted` or `http`"
        ))),
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, log: Logger) -> Self {
        Self {
            cfg,
            log,
            backends: None,
        }
    }

    /// Uses the given backends instead of the configured ones.
    pub fn with_backends(mut self, backends: Backends) -> Self {
        self.backends = Some(backends);
        self
    }

    fn out(&self, sub: &str) -> PathBuf {
        self.cfg.out_dir.join(sub)
    }

    fn templates(&self) -> Result<TemplateSet, CliError> {
        self.cfg.check_templates()?;
        match &self.cfg.templates.dir {
            Some(dir) => TemplateSet::from_dir(dir).map_err(config_err),
            None => Ok(TemplateSet::default()),
        }
    }

    fn backends(&self) -> Result<Backends, CliError> {
        if let Some(b) = &self.backends {
            return Ok(b.clone());
        }
        self.cfg.check_backends()?;
        let b = &self.cfg.backends;
        let get = |role: &str, c: &Option<BackendConfig>| {
            load_backend(role, c.as_ref().expect("checked above"))
        };
        Ok(Backends {
            user_actor: get("user_actor", &b.user_actor)?,
            user_reflector: get("user_reflector", &b.user_reflector)?,
            item_actor: get("item_actor", &b.item_actor)?,
            item_reflector: get("item_reflector", &b.item_reflector)?,
        })
    }

    /// Model names and temperatures per role; injected backends without a
    /// configured role get the role name at temperature 0.
    fn role(&self, role: &'static str) -> (&str, f64) {
        let b = &self.cfg.backends;
        let c = match role {
            "user_actor" => &b.user_actor,
            "user_reflector" => &b.user_reflector,
            "item_actor" => &b.item_actor,
            _ => &b.item_reflector,
        };
        match c {
            Some(c) => (c.model.as_str(), c.temperature),
            None => (role, 0.0),
        }
    }

    fn handles<'a>(
        &'a self,
        backends: &'a Backends,
        kind: EntityKind,
    ) -> (ModelHandle<'a>, ModelHandle<'a>) {
        let (actor, reflector, a_role, r_role) = match kind {
            EntityKind::User => (
                &backends.user_actor,
                &backends.user_reflector,
                "user_actor",
                "user_reflector",
            ),
            EntityKind::Item => (
                &backends.item_actor,
                &backends.item_reflector,
                "item_actor",
                "item_reflector",
            ),
        };
        let (a_model, a_temp) = self.role(a_role);
        let (r_model, r_temp) = self.role(r_role);
        (
            ModelHandle::new(actor.as_ref(), a_model).with_temperature(a_temp),
            ModelHandle::new(reflector.as_ref(), r_model).with_temperature(r_temp),
        )
    }

    fn load_data(&self) -> Result<Data, CliError> {
        self.cfg.check_data_inputs()?;
        let d = &self.cfg.data;
        let interactions = load_interactions(&d.interactions, &d.format).map_err(config_err)?;
        let catalog = match &d.items {
            Some(p) => load_catalog(p, &d.format).map_err(config_err)?,
            None => Catalog::default(),
        };
        let (train, test) =
            chronological_split(&interactions, &self.cfg.split).map_err(config_err)?;
        self.log.event(
            "data",
            json!({ "interactions": interactions.len(), "train": train.len(), "test": test.len(), "items": catalog.len() }),
        );
        Ok(Data {
            catalog,
            train,
            test,
        })
    }

    pub fn build(&self) -> Result<(), CliError> {
        let templates = self.templates()?;
        let backends = self.backends()?;
        let data = self.load_data()?;
        let cfg = &self.cfg;
        let policy = cfg.data.policy();
        let b = &cfg.builder;

        let users =
            build_user_samples_grouped(&data.train, b.max_hist, policy).map_err(config_err)?;
        let user_inputs: Vec<(String, Slots, bool)> =
            select_per_entity(&users, b.entity_fraction, cfg.seed)
                .map_err(config_err)?
                .into_iter()
                .map(|(id, s)| (format!("user:{id}"), user_slots(&s, &data.catalog), s.label))
                .collect();

        let mut items = BTreeMap::<String, Vec<_>>::new();
        for s in build_item_samples(&data.train, &b.item_samples(), policy, cfg.seed)
            .map_err(config_err)?
        {
            items.entry(s.item.clone()).or_default().push(s);
        }
        let item_inputs: Vec<(String, Slots, bool)> =
            select_per_entity(&items, b.entity_fraction, cfg.seed.wrapping_add(1))
                .map_err(config_err)?
                .into_iter()
                .map(|(id, s)| (format!("item:{id}"), item_slots(&s, &data.catalog), s.label))
                .collect();

        let dir = self.out(DATASETS);
        create_dir(&dir)?;
        for (kind, inputs) in [
            (EntityKind::User, &user_inputs),
            (EntityKind::Item, &item_inputs),
        ] {
            let (actor, reflector) = self.handles(&backends, kind);
            let builder = Builder {
                templates: &templates,
                actor,
                reflector,
                config: BuildConfig {
                    passes: b.passes,
                    chunk_size: b.chunk_size,
                },
            };
            self.log.event(
                "build_start",
                json!({ "entity_kind": kind, "inputs": inputs.len() }),
            );
            let ds = builder.build(kind, inputs);
            write_datasets(&dir, kind, &ds)?;
            self.log.event(
                "build_done",
                json!({ "entity_kind": kind, "stats": ds.stats }),
            );
            if let Some(e) = ds.aborted {
                return Err(runtime(format!("{kind} dataset construction: {e}")));
            }
        }
        Ok(())
    }

    pub fn export(&self) -> Result<(), CliError> {
        let templates = self.templates()?;
        let src = self.out(DATASETS);
        let mut loaded = Vec::new();
        for kind in kinds() {
            let path = |stage: &str| src.join(format!("{kind}_{stage}.jsonl"));
            for stage in ["reason", "reflect", "refine"] {
                require(&path(stage), "run `knowrec build` first")?;
            }
            let reason: Vec<ReasonSample> = read_jsonl(&path("reason")).map_err(config_err)?;
            let reflect: Vec<ReflectSample> = read_jsonl(&path("reflect")).map_err(config_err)?;
            let refine: Vec<RefineSample> = read_jsonl(&path("refine")).map_err(config_err)?;
            loaded.push((kind, reason, reflect, refine));
        }

        let dir = self.out(SFT);
        create_dir(&dir)?;
        let mut meta = SftMetadata::default();
        for (kind, reason, reflect, refine) in loaded {
            let pairs = assemble(kind, &reason, &reflect, &refine, &templates).map_err(runtime)?;
            let files = write_sft_files(&dir, kind, &pairs).map_err(runtime)?;
            for f in &files {
                self.log
                    .event("sft_file", json!({ "file": f.file, "pairs": f.n_pairs }));
            }
            meta.files.extend(files);
        }
        write_metadata(&dir, &meta).map_err(runtime)?;
        Ok(())
    }

    fn encoder(&self) -> Result<Box<dyn TextEncoder>, CliError> {
        Ok(match &self.cfg.encoder {
            EncoderConfig::Hash { dims, normalize } => Box::new(
                HashEncoder::new(HashEncoderConfig {
                    dims: *dims,
                    normalize: *normalize,
                })
                .map_err(config_err)?,
            ),
            EncoderConfig::Remote {
                dims,
                batch_size,
                http,
            } => {
                Box::new(RemoteEncoder::new(http.clone(), *dims, *batch_size).map_err(config_err)?)
            }
        })
    }

    pub fn infer(&self) -> Result<(), CliError> {
        let templates = self.templates()?;
        let backends = self.backends()?;
        let encoder = self.encoder()?;
        let data = self.load_data()?;
        let cfg = &self.cfg;
        let policy = cfg.data.policy();

        let users: Vec<(String, Slots)> = user_histories(&data.train, cfg.builder.max_hist)
            .into_iter()
            .map(|(id, hist)| {
                let ctx = user_inference_slots(&hist, &data.catalog);
                (id, ctx)
            })
            .collect();
        let items: Vec<(String, Slots)> =
            item_neighbourhoods(&data.train, &cfg.builder.item_samples(), policy, cfg.seed)
                .map_err(config_err)?
                .into_iter()
                .map(|(id, n)| {
                    let ctx = item_inference_slots(&id, &n.pos, &n.neg, &data.catalog);
                    (id, ctx)
                })
                .collect();

        let mut records: Vec<KnowledgeRecord> = Vec::new();
        let mut store = EmbeddingStore::new(encoder.dims(), encoder.encoder_id());
        for (kind, entities) in [(EntityKind::User, &users), (EntityKind::Item, &items)] {
            let (actor, reflector) = self.handles(&backends, kind);
            let models = Models {
                templates: &templates,
                kind,
                actor,
                reflector,
            };
            self.log.event(
                "infer_start",
                json!({ "entity_kind": kind, "entities": entities.len() }),
            );
            let out = infer_all(&models, entities, &cfg.strategy, encoder.as_ref())
                .map_err(|e| runtime(format!("{kind} inference: {e}")))?;
            for (record, vector) in out {
                store
                    .insert(kind, record.entity_id.clone(), vector)
                    .map_err(runtime)?;
                records.push(record);
            }
        }

        let dir = self.out(KNOWLEDGE);
        create_dir(&dir)?;
        write_jsonl(&dir.join("knowledge.jsonl"), &records).map_err(runtime)?;
        store.save(&dir.join("embeddings.jsonl")).map_err(runtime)?;
        self.log.event(
            "infer_done",
            json!({ "users": store.count(EntityKind::User), "items": store.count(EntityKind::Item) }),
        );
        Ok(())
    }

    fn store(&self) -> Result<EmbeddingStore, CliError> {
        let path = self.out(KNOWLEDGE).join("embeddings.jsonl");
        require(&path, "run `knowrec infer` first")?;
        EmbeddingStore::load(&path).map_err(config_err)
    }

    fn rows(&self, data: &Data, interactions: &[Interaction]) -> Vec<Vec<String>> {
        interactions
            .iter()
            .map(|it| {
                self.cfg
                    .ctr
                    .fields
                    .iter()
                    .map(|f| field_value(f, it, &data.catalog))
                    .collect()
            })
            .collect()
    }

    fn examples(
        &self,
        features: &FeatureSpace,
        rows: &[Vec<String>],
        interactions: &[Interaction],
        store: Option<&EmbeddingStore>,
    ) -> Result<Vec<CtrExample>, CliError> {
        let policy = self.cfg.data.policy();
        rows.iter()
            .zip(interactions)
            .map(|(row, it)| {
                let vector = |kind, id: &str, s: &EmbeddingStore| {
                    s.get(kind, id)
                        .cloned()
                        .unwrap_or_else(|| EmbeddingVector::zeros(s.dims))
                };
                Ok(CtrExample {
                    cat_features: features.encode(row).map_err(runtime)?,
                    e_u: store.map(|s| vector(EntityKind::User, &it.user_id, s)),
                    e_i: store.map(|s| vector(EntityKind::Item, &it.item_id, s)),
                    label: policy.binarize(it.rating).map_err(runtime)?,
                })
            })
            .collect()
    }

    pub fn train(&self) -> Result<(), CliError> {
        let store = self.store()?;
        let data = self.load_data()?;
        let rows = self.rows(&data, &data.train);
        let features = FeatureSpace::fit(
            self.cfg.ctr.fields.clone(),
            rows.iter().map(|r| r.as_slice()),
        )
        .map_err(runtime)?;
        let sizes = features.field_sizes();
        let train_cfg = ctr::TrainConfig {
            seed: self.cfg.seed,
            ..self.cfg.ctr.train.clone()
        };

        let dir = self.out(MODELS);
        create_dir(&dir)?;
        let mut reports = BTreeMap::<&str, TrainReport>::new();
        for (name, store) in [("base", None), ("fused", Some(&store))] {
            let examples = self.examples(&features, &rows, &data.train, store)?;
            self.log.event(
                "train_start",
                json!({ "model": name, "examples": examples.len() }),
            );
            let (params, report) = ctr::train(&examples, &sizes, &train_cfg).map_err(runtime)?;
            Checkpoint::new(features.clone(), &params)
                .save(&dir.join(format!("{name}.json")))
                .map_err(runtime)?;
            self.log.event(
                "train_done",
                json!({ "model": name, "final_loss": report.epoch_losses.last(), "steps": report.steps }),
            );
            reports.insert(name, report);
        }
        write_json(&dir.join("train_log.json"), &reports).map_err(runtime)?;
        Ok(())
    }

    pub fn eval(&self) -> Result<(), CliError> {
        let models = self.out(MODELS);
        let mut checkpoints = Vec::new();
        for name in ["base", "fused"] {
            let path = models.join(format!("{name}.json"));
            require(&path, "run `knowrec train` first")?;
            checkpoints.push(Checkpoint::load(&path).map_err(config_err)?);
        }
        let store = self.store()?;
        let data = self.load_data()?;
        let rows = self.rows(&data, &data.test);

        let mut metrics = Vec::new();
        for (ckpt, store) in checkpoints.iter().zip([None, Some(&store)]) {
            let params = ckpt.model().map_err(config_err)?;
            let examples = self.examples(&ckpt.features, &rows, &data.test, store)?;
            metrics.push(
                ctr::evaluate(&params, &examples, self.cfg.ctr.train.clamp_eps).map_err(runtime)?,
            );
        }
        let cmp = Comparison::new(metrics[0], metrics[1]);

        let dir = self.out(METRICS);
        create_dir(&dir)?;
        write_json(&dir.join("base.json"), &cmp.base).map_err(runtime)?;
        write_json(&dir.join("fused.json"), &cmp.fused).map_err(runtime)?;
        write_json(&dir.join("comparison.json"), &cmp).map_err(runtime)?;
        std::fs::write(dir.join("comparison.md"), cmp.table()).map_err(runtime)?;
        self.log
            .event("eval_done", serde_json::to_value(&cmp).map_err(runtime)?);
        Ok(())
    }
}

fn field_value(field: &str, it: &Interaction, catalog: &Catalog) -> String {
    match field {
        "user_id" => it.user_id.clone(),
        "item_id" => it.item_id.clone(),
        "title" => catalog.title(&it.item_id),
        key => catalog
            .get(&it.item_id)
            .and_then(|m| m.attribute(key))
            .unwrap_or("")
            .to_string(),
    }
}

fn write_datasets(dir: &Path, kind: EntityKind, ds: &Datasets) -> Result<(), CliError> {
    let path = |stage: &str| dir.join(format!("{kind}_{stage}.jsonl"));
    write_jsonl(&path("reason"), &ds.reason).map_err(runtime)?;
    write_jsonl(&path("reflect"), &ds.reflect).map_err(runtime)?;
    write_jsonl(&path("refine"), &ds.refine).map_err(runtime)?;
    let stats = StatsFile {
        entity_kind: kind,
        stats: ds.stats,
        aborted: ds.aborted.as_ref().map(|e| e.to_string()),
    };
    write_json(&dir.join(format!("{kind}_stats.json")), &stats).map_err(runtime)
}
