use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CtrExample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// MLP over the concatenated slot embeddings.
    Mlp,
    /// MLP plus a factorization-machine pairwise term over the slots.
    DeepFm,
}

/// Static shape of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Value count per categorical field, including the OOV id 0.
    pub field_sizes: Vec<usize>,
    pub emb_dim: usize,
    pub hidden: Vec<usize>,
    pub connector_hidden: usize,
    /// `Some(dims)` builds the fused model with knowledge connectors.
    pub knowledge_dims: Option<usize>,
    pub backbone: Backbone,
}

impl ModelConfig {
    pub fn fused(&self) -> bool {
        self.knowledge_dims.is_some()
    }

    /// Embedding slots entering the backbone.
    pub fn n_slots(&self) -> usize {
        self.field_sizes.len() + if self.fused() { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Model(m.to_string()));
        if self.field_sizes.is_empty() && !self.fused() {
            return bad("model needs at least one input slot");
        }
        if self.field_sizes.contains(&0) {
            return bad("every field needs at least the OOV value");
        }
        if self.emb_dim == 0 || self.hidden.contains(&0) || self.connector_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if self.knowledge_dims == Some(0) {
            return bad("knowledge dims must be positive");
        }
        Ok(())
    }
}

/// Fully connected layer; `w` is `output × input`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            w: vec![0.0; input * output],
            b: vec![0.0; output],
        }
    }

    fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let mut d = Self::zeros(input, output);
        d.w.iter_mut().for_each(|w| *w = rng.gen_range(-a..a));
        d
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.b.iter().enumerate().map(|(o, b)| {
            let row = &self.w[o * self.input..(o + 1) * self.input];
            b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
        }));
    }
}

/// ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Default, Clone)]
pub struct MlpCache {
    /// Input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    fn new(widths: &[usize], rng: Option<&mut ChaCha8Rng>) -> Self {
        let pairs = widths.windows(2);
        let layers = match rng {
            Some(rng) => pairs.map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
            None => pairs.map(|w| Dense::zeros(w[0], w[1])).collect(),
        };
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, x: &[f64], cache: &mut MlpCache) -> Vec<f64> {
        cache.inputs.clear();
        cache.pre.clear();
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.output);
            layer.apply(&h, &mut z);
            cache.inputs.push(std::mem::take(&mut h));
            h = if k == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            cache.pre.push(z);
        }
        h
    }

    /// Accumulates parameter gradients into `grad`, returns d(loss)/d(input).
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta = dout.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k != last {
                for (d, z) in delta.iter_mut().zip(&cache.pre[k]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.inputs[k];
            let g = &mut grad.layers[k];
            let mut dinput = vec![0.0; layer.input];
            for o in 0..layer.output {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g.b[o] += d;
                let row = o * layer.input;
                for i in 0..layer.input {
                    g.w[row + i] += d * input[i];
                    dinput[i] += layer.w[row + i] * d;
                }
            }
            delta = dinput;
        }
        delta
    }

    fn tensors<'a>(&'a self, out: &mut Vec<&'a Vec<f64>>) {
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<f64>>) {
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
    }
}

/// All trainable parameters of the CTR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Per field: `value_count × emb_dim`, row-major.
    pub embeddings: Vec<Vec<f64>>,
    pub user_connector: Option<Mlp>,
    pub item_connector: Option<Mlp>,
    pub backbone: Mlp,
}

#[derive(Debug, Default)]
pub struct ForwardCache {
    slots: Vec<f64>,
    user: MlpCache,
    item: MlpCache,
    backbone: MlpCache,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ModelParams {
    fn build(config: ModelConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let d = config.emb_dim;
        let embeddings = config
            .field_sizes
            .iter()
            .map(|&n| match rng.as_deref_mut() {
                // one active row per lookup: fan_in 1, fan_out emb_dim
                Some(rng) => {
                    let a = (6.0 / (1 + d) as f64).sqrt();
                    (0..n * d).map(|_| rng.gen_range(-a..a)).collect()
                }
                None => vec![0.0; n * d],
            })
            .collect();
        let connector = |rng: Option<&mut ChaCha8Rng>| {
            config
                .knowledge_dims
                .map(|kd| Mlp::new(&[kd, config.connector_hidden, d], rng))
        };
        let user_connector = connector(rng.as_deref_mut());
        let item_connector = connector(rng.as_deref_mut());
        let mut widths = vec![config.n_slots() * d];
        widths.extend(&config.hidden);
        widths.push(1);
        let backbone = Mlp::new(&widths, rng);
        Ok(Self {
            config,
            embeddings,
            user_connector,
            item_connector,
            backbone,
        })
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    /// Parameter tensors in a fixed order: embeddings, user connector,
    /// item connector, backbone.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = self.embeddings.iter().collect();
        for m in [&self.user_connector, &self.item_connector]
            .into_iter()
            .flatten()
        {
            m.tensors(&mut out);
        }
        self.backbone.tensors(&mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = self.embeddings.iter_mut().collect();
        for m in [&mut self.user_connector, &mut self.item_connector]
            .into_iter()
            .flatten()
        {
            m.tensors_mut(&mut out);
        }
        self.backbone.tensors_mut(&mut out);
        out
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.shapes().iter().sum();
        if flat.len() != total {
            return Err(Error::Model(format!(
                "flat parameter array has {} values, model needs {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (t, o) in self.tensors_mut().into_iter().zip(other.tensors()) {
            t.iter_mut().zip(o).for_each(|(a, b)| *a += alpha * b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check(&self, x: &CtrExample) -> Result<()> {
        let fields = &self.config.field_sizes;
        if x.cat_features.len() != fields.len() {
            return Err(Error::Model(format!(
                "example has {} categorical features, model expects {}",
                x.cat_features.len(),
                fields.len()
            )));
        }
        for (k, &(field, value)) in x.cat_features.iter().enumerate() {
            if field != k {
                return Err(Error::Model(format!(
                    "feature {k} has field id {field}; expected {k}"
                )));
            }
            if value >= fields[field] {
                return Err(Error::Model(format!(
                    "field {field}: value id {value} outside table of {}",
                    fields[field]
                )));
            }
        }
        match (self.config.knowledge_dims, &x.e_u, &x.e_i) {
            (None, None, None) => Ok(()),
            (None, _, _) => Err(Error::Model("base model given knowledge vectors".into())),
            (Some(kd), Some(u), Some(i)) if u.dims() == kd && i.dims() == kd => Ok(()),
            (Some(kd), _, _) => Err(Error::Model(format!(
                "fused model needs user and item knowledge vectors of {kd} dims"
            ))),
        }
    }

    fn fm_term(&self, slots: &[f64]) -> f64 {
        let d = self.config.emb_dim;
        let n = self.config.n_slots();
        let mut total = 0.0;
        for k in 0..d {
            let (mut s, mut sq) = (0.0, 0.0);
            for j in 0..n {
                let v = slots[j * d + k];
                s += v;
                sq += v * v;
            }
            total += 0.5 * (s * s - sq);
        }
        total
    }

    /// Logit of one example, keeping what backprop needs.
    pub fn logit_cached(&self, x: &CtrExample, cache: &mut ForwardCache) -> Result<f64> {
        self.check(x)?;
        let d = self.config.emb_dim;
        cache.slots.clear();
        for &(field, value) in &x.cat_features {
            cache
                .slots
                .extend_from_slice(&self.embeddings[field][value * d..(value + 1) * d]);
        }
        if let (Some(fu), Some(fi), Some(eu), Some(ei)) =
            (&self.user_connector, &self.item_connector, &x.e_u, &x.e_i)
        {
            let u = fu.forward(&eu.values, &mut cache.user);
            cache.slots.extend_from_slice(&u);
            let i = fi.forward(&ei.values, &mut cache.item);
            cache.slots.extend_from_slice(&i);
        }
        let mut logit = self.backbone.forward(&cache.slots, &mut cache.backbone)[0];
        if self.config.backbone == Backbone::DeepFm {
            logit += self.fm_term(&cache.slots);
        }
        Ok(logit)
    }

    pub fn logit(&self, x: &CtrExample) -> Result<f64> {
        self.logit_cached(x, &mut ForwardCache::default())
    }

    /// Click probability.
    pub fn forward(&self, x: &CtrExample) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }

    /// Backpropagates `dlogit` for the example cached by `logit_cached`.
    pub fn backward(
        &self,
        x: &CtrExample,
        cache: &ForwardCache,
        dlogit: f64,
        grad: &mut ModelParams,
    ) {
        let d = self.config.emb_dim;
        let n = self.config.n_slots();
        let mut dslots = self
            .backbone
            .backward(&cache.backbone, &[dlogit], &mut grad.backbone);
        if self.config.backbone == Backbone::DeepFm {
            for k in 0..d {
                let s: f64 = (0..n).map(|j| cache.slots[j * d + k]).sum();
                for j in 0..n {
                    dslots[j * d + k] += dlogit * (s - cache.slots[j * d + k]);
                }
            }
        }
        for (slot, &(field, value)) in x.cat_features.iter().enumerate() {
            let row = &mut grad.embeddings[field][value * d..(value + 1) * d];
            row.iter_mut()
                .zip(&dslots[slot * d..(slot + 1) * d])
                .for_each(|(g, ds)| *g += ds);
        }
        if let (Some(fu), Some(fi)) = (&self.user_connector, &self.item_connector) {
            let base = x.cat_features.len() * d;
            let gu = grad.user_connector.as_mut().expect("grad mirrors params");
            fu.backward(&cache.user, &dslots[base..base + d], gu);
            let gi = grad.item_connector.as_mut().expect("grad mirrors params");
            fi.backward(&cache.item, &dslots[base + d..base + 2 * d], gi);
        }
    }
}
