use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::jsonl;

/// Value id every unseen categorical value maps to.
pub const OOV: usize = 0;

/// Per-field vocabularies fitted on training rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub fields: Vec<String>,
    /// Per field: raw value -> id, ids starting at 1 in sorted value order.
    pub vocab: Vec<BTreeMap<String, usize>>,
}

impl FeatureSpace {
    pub fn fit<'a, R>(fields: Vec<String>, rows: R) -> Result<Self>
    where
        R: IntoIterator<Item = &'a [String]>,
    {
        let mut seen: Vec<std::collections::BTreeSet<&str>> =
            vec![Default::default(); fields.len()];
        for row in rows {
            if row.len() != fields.len() {
                return Err(Error::Validation(format!(
                    "feature row has {} values, expected {}",
                    row.len(),
                    fields.len()
                )));
            }
            for (set, v) in seen.iter_mut().zip(row) {
                set.insert(v.as_str());
            }
        }
        let vocab = seen
            .into_iter()
            .map(|set| {
                set.into_iter()
                    .zip(1..)
                    .map(|(v, id)| (v.to_string(), id))
                    .collect()
            })
            .collect();
        Ok(Self { fields, vocab })
    }

    /// Table sizes including the OOV slot.
    pub fn field_sizes(&self) -> Vec<usize> {
        self.vocab.iter().map(|v| v.len() + 1).collect()
    }

    pub fn encode(&self, row: &[String]) -> Result<Vec<(usize, usize)>> {
        if row.len() != self.fields.len() {
            return Err(Error::Validation(format!(
                "feature row has {} values, expected {}",
                row.len(),
                self.fields.len()
            )));
        }
        Ok(row
            .iter()
            .zip(&self.vocab)
            .enumerate()
            .map(|(k, (v, vocab))| (k, vocab.get(v).copied().unwrap_or(OOV)))
            .collect())
    }
}

/// Serialized model: config, vocabularies, tensor shapes and a flat
/// parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub features: FeatureSpace,
    pub shapes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(features: FeatureSpace, params: &ModelParams) -> Self {
        Self {
            config: params.config.clone(),
            features,
            shapes: params.shapes(),
            params: params.flatten(),
        }
    }

    pub fn model(&self) -> Result<ModelParams> {
        let mut p = ModelParams::zeros(self.config.clone())?;
        if p.shapes() != self.shapes {
            return Err(Error::Model(
                "checkpoint shapes disagree with its config".into(),
            ));
        }
        if self.features.field_sizes() != self.config.field_sizes {
            return Err(Error::Model(
                "checkpoint vocabulary disagrees with its config".into(),
            ));
        }
        p.load_flat(&self.params)?;
        if !p.all_finite() {
            return Err(Error::Model(
                "checkpoint holds non-finite parameters".into(),
            ));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        jsonl::read_json(path)
    }
}
