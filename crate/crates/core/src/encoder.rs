//! Knowledge text → dense vectors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gateway::{EntityKind, HttpConfig, JsonClient};
use crate::hashing::stable_hash;

const INDEX_SEED: u64 = 0x5eed_0001;
const SIGN_SEED: u64 = 0x5eed_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn zeros(dims: usize) -> Self {
        Self {
            values: vec![0.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Component-wise arithmetic mean. Panics on an empty slice or mixed dims.
    pub fn mean(vectors: &[&EmbeddingVector]) -> EmbeddingVector {
        assert!(!vectors.is_empty(), "mean of no vectors");
        let dims = vectors[0].dims();
        let mut values = vec![0.0; dims];
        for v in vectors {
            assert_eq!(v.dims(), dims, "mixed embedding dims");
            for (acc, x) in values.iter_mut().zip(&v.values) {
                *acc += x;
            }
        }
        let n = vectors.len() as f64;
        values.iter_mut().for_each(|x| *x /= n);
        EmbeddingVector { values }
    }
}

pub trait TextEncoder: Sync {
    fn dims(&self) -> usize;
    fn encoder_id(&self) -> String;
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn encode_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashEncoderConfig {
    pub dims: usize,
    pub normalize: bool,
}

impl Default for HashEncoderConfig {
    fn default() -> Self {
        Self {
            dims: 64,
            normalize: true,
        }
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing: token `t` adds `±1` at `h1(t) mod dims`, the sign
/// taken from a second, independent hash.
pub fn encode(text: &str, cfg: &HashEncoderConfig) -> EmbeddingVector {
    assert!(cfg.dims >= 1, "dims must be at least 1");
    let mut v = EmbeddingVector::zeros(cfg.dims);
    for token in tokenize(text) {
        let idx = (stable_hash(&token, INDEX_SEED) % cfg.dims as u64) as usize;
        let sign = if stable_hash(&token, SIGN_SEED) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        v.values[idx] += sign;
    }
    if cfg.normalize {
        let norm = v.norm();
        if norm > 0.0 {
            v.values.iter_mut().for_each(|x| *x /= norm);
        }
    }
    v
}

#[derive(Debug, Clone, Copy)]
pub struct HashEncoder {
    pub cfg: HashEncoderConfig,
}

impl HashEncoder {
    pub fn new(cfg: HashEncoderConfig) -> Result<Self> {
        if cfg.dims == 0 {
            return Err(Error::Validation("encoder dims must be at least 1".into()));
        }
        Ok(Self { cfg })
    }
}

impl TextEncoder for HashEncoder {
    fn dims(&self) -> usize {
        self.cfg.dims
    }

    fn encoder_id(&self) -> String {
        format!(
            "signed-hash-v1/d{}/{}",
            self.cfg.dims,
            if self.cfg.normalize { "l2" } else { "raw" }
        )
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| encode(t, &self.cfg)).collect())
    }
}

/// Client for embedding services speaking
/// `{"input": [...]}` → `{"data": [{"embedding": [...]}, ...]}`.
pub struct RemoteEncoder {
    client: JsonClient,
    dims: usize,
    batch_size: usize,
    id: String,
}

impl RemoteEncoder {
    pub fn new(http: HttpConfig, dims: usize, batch_size: usize) -> Result<Self> {
        let id = format!("remote/{}", http.url);
        Ok(Self {
            client: JsonClient::new(http)?,
            dims,
            batch_size: batch_size.max(1),
            id,
        })
    }

    pub fn encode_remote(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for (b, batch) in texts.chunks(self.batch_size).enumerate() {
            let start = b * self.batch_size;
            let span = format!("indices {start}..{}", start + batch.len());
            let body = serde_json::json!({ "input": batch });
            let vectors = self
                .client
                .post(&body, embeddings_of)
                .map_err(|e| match e {
                    Error::Transport { attempts, message } => Error::Transport {
                        attempts,
                        message: format!("{span}: {message}"),
                    },
                    other => other,
                })?;
            if vectors.len() != batch.len() {
                return Err(Error::Shape(format!(
                    "{span}: expected {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for (k, v) in vectors.into_iter().enumerate() {
                if v.dims() != self.dims {
                    return Err(Error::Shape(format!(
                        "index {}: expected {} dims, got {}",
                        start + k,
                        self.dims,
                        v.dims()
                    )));
                }
                if v.values.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Shape(format!(
                        "index {}: non-finite value",
                        start + k
                    )));
                }
                out.push(v);
            }
        }
        Ok(out)
    }
}

fn embeddings_of(v: Value) -> Result<Vec<EmbeddingVector>> {
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Shape("response lacks a data array".into()))?;
    data.iter()
        .map(|d| {
            d.get("embedding")
                .and_then(Value::as_array)
                .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                .map(|values| EmbeddingVector { values })
                .ok_or_else(|| Error::Shape("data entry lacks a numeric embedding".into()))
        })
        .collect()
}

impl TextEncoder for RemoteEncoder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn encoder_id(&self) -> String {
        self.id.clone()
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        self.encode_remote(texts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StoreHeader {
    dims: usize,
    encoder_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreRecord {
    entity_kind: EntityKind,
    entity_id: String,
    values: Vec<f64>,
}

/// Vectors keyed by `(entity_kind, entity_id)`. On disk: a JSON header
/// line `{dims, encoder_id}` followed by one record per line, in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dims: usize,
    pub encoder_id: String,
    records: BTreeMap<(EntityKind, String), EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn new(dims: usize, encoder_id: impl Into<String>) -> Self {
        Self {
            dims,
            encoder_id: encoder_id.into(),
            records: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        kind: EntityKind,
        id: impl Into<String>,
        v: EmbeddingVector,
    ) -> Result<()> {
        if v.dims() != self.dims {
            return Err(Error::Shape(format!(
                "embedding has {} dims, store expects {}",
                v.dims(),
                self.dims
            )));
        }
        self.records.insert((kind, id.into()), v);
        Ok(())
    }

    pub fn get(&self, kind: EntityKind, id: &str) -> Option<&EmbeddingVector> {
        self.records.get(&(kind, id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, kind: EntityKind) -> usize {
        self.records.keys().filter(|(k, _)| *k == kind).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut out,
            &StoreHeader {
                dims: self.dims,
                encoder_id: self.encoder_id.clone(),
            },
        )?;
        out.write_all(b"\n")?;
        for ((kind, id), v) in &self.records {
            serde_json::to_writer(
                &mut out,
                &StoreRecord {
                    entity_kind: *kind,
                    entity_id: id.clone(),
                    values: v.values.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header: StoreHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => {
                return Err(Error::Validation(format!(
                    "{}: empty embedding store",
                    path.display()
                )))
            }
        };
        let mut store = Self::new(header.dims, header.encoder_id);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: StoreRecord = serde_json::from_str(&line)?;
            store.insert(
                r.entity_kind,
                r.entity_id,
                EmbeddingVector { values: r.values },
            )?;
        }
        Ok(store)
    }
}
