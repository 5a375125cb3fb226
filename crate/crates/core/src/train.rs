//! Mini-batch Adam training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_prepared, BucketMode, Metrics};
use crate::graph::{KnowledgeGraph, Query};
use crate::model::{batch_gradient, prepare_all, Model, ModelParams, PreparedQuery, TrainConfig};
use crate::path::build_path_vocab;
use crate::prior::EmbeddingStore;
use crate::tensor::Tensor;

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(&t.shape))
            .collect();
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads = grad.tensors();
        for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].1;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / c1;
                let vhat = v.data[j] / c2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example cross-entropy over the epoch.
    pub train_loss: f64,
    pub valid: Option<Metrics>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&serde_json::to_value(self).expect("record serializes"))
            .expect("record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

/// Train queries: every train edge, hiding itself from its own context.
pub fn train_queries(g: &KnowledgeGraph) -> Vec<Query> {
    (0..g.train().len()).map(|e| Query::train(g, e)).collect()
}

pub fn train(
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(g, store, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
///
/// Uses the ambient rayon pool for per-example work; results are identical
/// for any pool size.
pub fn train_with(
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let queries = train_queries(g);
    let vocab = build_path_vocab(g, &queries, cfg.max_path_len);
    let prepared = prepare_all(g, &vocab, cfg, &queries);
    let valid_queries: Vec<Query> = g.valid().iter().map(|t| Query::eval(g, *t)).collect();
    let valid = prepare_all(g, &vocab, cfg, &valid_queries);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(g.num_relations(), store.dim(), vocab.size(), cfg, &mut rng);
    let mut adam = Adam::new(&params, cfg);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batch: Vec<PreparedQuery> = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| prepared[i].clone()));
            let (loss, grad) = batch_gradient(&batch, store, &params, cfg);
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss });
            }
            epoch_loss += loss;
            adam.step(&mut params, &grad, cfg.learning_rate);
        }
        let valid_metrics = if valid.is_empty() {
            None
        } else {
            Some(evaluate_prepared(g, &valid, store, &params, cfg, BucketMode::None)?.metrics())
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / prepared.len() as f64,
            valid: valid_metrics,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        model: Model {
            params,
            path_vocab: vocab,
            config: cfg.clone(),
        },
        log,
    })
}
