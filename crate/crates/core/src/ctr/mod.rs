//! CTR prediction: categorical embeddings, knowledge connectors, an MLP or
//! DeepFM backbone, BCE training and AUC/LogLoss evaluation.

mod features;
mod metrics;
mod model;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingVector;
use crate::error::Result;

pub use features::{Checkpoint, FeatureSpace, OOV};
pub use metrics::{auc, logloss, relative_improvement, relative_reduction, Metrics};
pub use model::{sigmoid, Backbone, Dense, ForwardCache, Mlp, MlpCache, ModelConfig, ModelParams};
pub use train::{batch_loss_and_grad, train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrExample {
    /// `(field_id, value_id)`, one per field in field order.
    pub cat_features: Vec<(usize, usize)>,
    pub e_u: Option<EmbeddingVector>,
    pub e_i: Option<EmbeddingVector>,
    pub label: bool,
}

/// Click probabilities for every example, in input order.
pub fn predict(params: &ModelParams, examples: &[CtrExample]) -> Result<Vec<f64>> {
    examples.par_iter().map(|x| params.forward(x)).collect()
}

pub fn evaluate(params: &ModelParams, examples: &[CtrExample], clamp_eps: f64) -> Result<Metrics> {
    let scores = predict(params, examples)?;
    let labels: Vec<bool> = examples.iter().map(|x| x.label).collect();
    Ok(Metrics {
        auc: auc(&scores, &labels)?,
        logloss: logloss(&scores, &labels, clamp_eps)?,
        n: examples.len(),
    })
}
