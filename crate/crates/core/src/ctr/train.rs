use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, CtrExample, ForwardCache, ModelConfig, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub emb_dim: usize,
    pub hidden: Vec<usize>,
    pub connector_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clamp_eps: f64,
    pub backbone: Backbone,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            emb_dim: 8,
            hidden: vec![32],
            connector_hidden: 16,
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 16,
            seed: 2024,
            clamp_eps: 1e-7,
            backbone: Backbone::Mlp,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Validation(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(
        &self,
        field_sizes: Vec<usize>,
        knowledge_dims: Option<usize>,
    ) -> ModelConfig {
        ModelConfig {
            field_sizes,
            emb_dim: self.emb_dim,
            hidden: self.hidden.clone(),
            connector_hidden: self.connector_hidden,
            knowledge_dims,
            backbone: self.backbone,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training BCE seen during each epoch.
    pub epoch_losses: Vec<f64>,
    pub n_examples: usize,
    pub steps: usize,
}

/// `softplus(z) - y z`, the BCE of `sigmoid(z)` against `y`.
fn bce_from_logit(z: f64, y: bool) -> f64 {
    let y = if y { 1.0 } else { 0.0 };
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean BCE over the batch and its gradient.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[&CtrExample],
) -> Result<(f64, ModelParams)> {
    let mut grad = params.zeros_like();
    let mut cache = ForwardCache::default();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for x in batch {
        let z = params.logit_cached(x, &mut cache)?;
        loss += bce_from_logit(z, x.label);
        let y = if x.label { 1.0 } else { 0.0 };
        let dz = (super::sigmoid(z) - y) * scale;
        params.backward(x, &cache, dz, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Mini-batch SGD on mean BCE. Knowledge dims come from the examples: all
/// must carry vectors (fused model) or none (base model).
pub fn train(
    examples: &[CtrExample],
    field_sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    let n_pos = examples.iter().filter(|x| x.label).count();
    if n_pos == 0 || n_pos == examples.len() {
        return Err(Error::Training(
            "training data contains a single class".into(),
        ));
    }
    let knowledge_dims = examples[0].e_u.as_ref().map(|e| e.dims());
    let config = cfg.model_config(field_sizes.to_vec(), knowledge_dims);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(config, &mut rng)?;
    for x in examples {
        params.logit(x)?;
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        n_examples: examples.len(),
        steps: 0,
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&CtrExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grad) = batch_loss_and_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * batch.len() as f64;
            params.axpy(-cfg.learning_rate, &grad);
            report.steps += 1;
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() || !params.all_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        report.epoch_losses.push(mean);
    }
    Ok((params, report))
}
