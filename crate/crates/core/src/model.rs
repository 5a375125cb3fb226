//! Score fusion, cross-entropy loss and exact gradients.
//!
//! The three branches each emit one logit per relation; the prediction is
//! `softmax(S_prior + S_context + S_path)` and the loss is the summed
//! negative log-probability of the true relation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{
    context_backward, context_forward, head_backward, head_forward, ContextBranchParams,
    ContextTrace, Neighborhood,
};
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, Query, RelationId, Triplet};
use crate::path::{enumerate_paths, path_backward, path_forward, PathBranchParams, PathVocabulary};
use crate::prior::{prior_backward, prior_forward, EmbeddingStore, PriorBranchParams};
use crate::tensor::{log_sum_exp, softmax, Tensor};

/// Probabilities below this are clamped inside the log.
pub const LOG_CLAMP: f64 = 1e-30;

/// Examples per gradient chunk. Chunk boundaries are fixed so the reduction
/// order, and therefore every float, is independent of the worker count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchMask {
    pub prior: bool,
    pub context: bool,
    pub path: bool,
}

impl BranchMask {
    pub const ALL: BranchMask = BranchMask {
        prior: true,
        context: true,
        path: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.prior || self.context || self.path)
    }

    pub fn count(&self) -> usize {
        [self.prior, self.context, self.path]
            .iter()
            .filter(|b| **b)
            .count()
    }

    /// All seven nonempty subsets: singles, then pairs, then the full model.
    pub fn nonempty_subsets() -> Vec<BranchMask> {
        let mut all: Vec<BranchMask> = (1u8..8)
            .map(|bits| BranchMask {
                prior: bits & 1 != 0,
                context: bits & 2 != 0,
                path: bits & 4 != 0,
            })
            .collect();
        all.sort_by_key(|m| (m.count(), !m.prior, !m.context, !m.path));
        all
    }

    /// Whether `self` enables every branch `other` enables.
    pub fn contains(&self, other: &BranchMask) -> bool {
        (self.prior || !other.prior)
            && (self.context || !other.context)
            && (self.path || !other.path)
    }

    fn needs_context_trace(&self) -> bool {
        self.context || self.path
    }
}

impl fmt::Display for BranchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.prior, "prior"),
            (self.context, "context"),
            (self.path, "path"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for BranchMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = BranchMask {
            prior: false,
            context: false,
            path: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "prior" => m.prior = true,
                "context" => m.context = true,
                "path" => m.path = true,
                "all" => m = BranchMask::ALL,
                other => {
                    return Err(Error::Config(format!(
                        "unknown branch {other:?} (expected prior, context, path or all)"
                    )))
                }
            }
        }
        if m.is_empty() {
            return Err(Error::Config(
                "branch mask must name at least one branch".into(),
            ));
        }
        Ok(m)
    }
}

/// Serde adapter that writes a mask as `"prior,context,path"`.
mod mask_serde {
    use super::*;

    pub fn serialize<S: serde::Serializer>(
        m: &BranchMask,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&m.to_string())
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BranchMask, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Training and architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    /// Message-passing iterations.
    pub k_iters: usize,
    /// Hop radius of the edge neighborhood.
    pub context_layers: usize,
    pub max_path_len: usize,
    pub seed: u64,
    #[serde(with = "mask_serde")]
    pub branches: BranchMask,
    /// Scalar multiplier on each branch's logits (prior, context, path).
    pub branch_weights: [f64; 3],
    /// Dimension of fallback prior embeddings when no embedding file is given.
    pub prior_dim: usize,
    pub fallback_seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 60,
            hidden: 64,
            k_iters: 2,
            context_layers: 2,
            max_path_len: 3,
            seed: 0,
            branches: BranchMask::ALL,
            branch_weights: [1.0; 3],
            prior_dim: 64,
            fallback_seed: crate::prior::DEFAULT_FALLBACK_SEED,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Per-dataset context layers, max path length and learning rate for the
    /// four standard benchmarks. Unknown names get the defaults.
    pub fn for_dataset(name: &str) -> Self {
        let (context_layers, max_path_len, learning_rate) = match name.to_ascii_lowercase().as_str()
        {
            "fb15k-237" | "fb15k237" => (2, 3, 1e-4),
            "wn18" => (3, 3, 1e-4),
            "wn18rr" => (3, 4, 5e-4),
            "nell995" | "nell-995" => (2, 5, 1e-4),
            _ => return TrainConfig::default(),
        };
        TrainConfig {
            context_layers,
            max_path_len,
            learning_rate,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("hidden", self.hidden),
            ("k_iters", self.k_iters),
            ("context_layers", self.context_layers),
            ("max_path_len", self.max_path_len),
            ("prior_dim", self.prior_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("branch mask must be nonempty".into()));
        }
        if self.branch_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("branch weights must be finite".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor. Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub prior: PriorBranchParams,
    pub context: ContextBranchParams,
    pub path: PathBranchParams,
}

impl ModelParams {
    pub fn init<R: Rng>(
        num_relations: usize,
        prior_dim: usize,
        path_vocab_size: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Self {
        ModelParams {
            prior: PriorBranchParams::init(prior_dim, cfg.hidden, num_relations, rng),
            context: ContextBranchParams::init(
                num_relations,
                cfg.hidden,
                cfg.k_iters,
                prior_dim,
                rng,
            ),
            path: PathBranchParams::init(path_vocab_size, cfg.hidden, num_relations, rng),
        }
    }

    pub fn zeros(
        num_relations: usize,
        prior_dim: usize,
        path_vocab_size: usize,
        hidden: usize,
        k_iters: usize,
    ) -> Self {
        ModelParams {
            prior: PriorBranchParams::zeros(prior_dim, hidden, num_relations),
            context: ContextBranchParams::zeros(num_relations, hidden, k_iters, prior_dim),
            path: PathBranchParams::zeros(path_vocab_size, hidden, num_relations),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named tensors in a fixed order (also the checkpoint order).
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("prior.mlp_w1".to_string(), &self.prior.mlp_w1),
            ("prior.mlp_b1".to_string(), &self.prior.mlp_b1),
            ("prior.mlp_w2".to_string(), &self.prior.mlp_w2),
            ("prior.mlp_b2".to_string(), &self.prior.mlp_b2),
            ("context.rel_embed".to_string(), &self.context.rel_embed),
        ];
        for (d, l) in self.context.layers.iter().enumerate() {
            out.push((format!("context.layer{d}.w"), &l.w));
            out.push((format!("context.layer{d}.b"), &l.b));
        }
        out.extend([
            ("context.w_pair".to_string(), &self.context.w_pair),
            ("context.b_pair".to_string(), &self.context.b_pair),
            ("context.attn_proj".to_string(), &self.context.attn_proj),
            ("context.out_proj".to_string(), &self.context.out_proj),
            ("context.out_bias".to_string(), &self.context.out_bias),
            ("path.path_embed".to_string(), &self.path.path_embed),
            ("path.out_proj".to_string(), &self.path.out_proj),
            ("path.out_bias".to_string(), &self.path.out_bias),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("prior.mlp_w1".to_string(), &mut self.prior.mlp_w1),
            ("prior.mlp_b1".to_string(), &mut self.prior.mlp_b1),
            ("prior.mlp_w2".to_string(), &mut self.prior.mlp_w2),
            ("prior.mlp_b2".to_string(), &mut self.prior.mlp_b2),
            ("context.rel_embed".to_string(), &mut self.context.rel_embed),
        ];
        for (d, l) in self.context.layers.iter_mut().enumerate() {
            out.push((format!("context.layer{d}.w"), &mut l.w));
            out.push((format!("context.layer{d}.b"), &mut l.b));
        }
        out.extend([
            ("context.w_pair".to_string(), &mut self.context.w_pair),
            ("context.b_pair".to_string(), &mut self.context.b_pair),
            ("context.attn_proj".to_string(), &mut self.context.attn_proj),
            ("context.out_proj".to_string(), &mut self.context.out_proj),
            ("context.out_bias".to_string(), &mut self.context.out_bias),
            ("path.path_embed".to_string(), &mut self.path.path_embed),
            ("path.out_proj".to_string(), &mut self.path.out_proj),
            ("path.out_bias".to_string(), &mut self.path.out_bias),
        ]);
        out
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_relations(&self) -> usize {
        self.prior.num_relations()
    }
}

/// A query with its neighborhood and path-type ids resolved once up front.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub query: Query,
    pub neighborhood: Neighborhood,
    pub path_ids: Vec<usize>,
}

impl PreparedQuery {
    pub fn new(
        g: &KnowledgeGraph,
        vocab: &PathVocabulary,
        cfg: &TrainConfig,
        query: Query,
    ) -> Self {
        let Triplet { head, tail, .. } = query.triplet;
        let neighborhood = Neighborhood::build(g, head, tail, cfg.context_layers, query.exclude);
        let path_ids = enumerate_paths(g, head, tail, cfg.max_path_len, query.exclude)
            .iter()
            .map(|p| vocab.id(&p.steps))
            .collect();
        PreparedQuery {
            query,
            neighborhood,
            path_ids,
        }
    }

    pub fn num_paths(&self) -> usize {
        self.path_ids.len()
    }
}

pub fn prepare_all(
    g: &KnowledgeGraph,
    vocab: &PathVocabulary,
    cfg: &TrainConfig,
    queries: &[Query],
) -> Vec<PreparedQuery> {
    queries
        .par_iter()
        .map(|q| PreparedQuery::new(g, vocab, cfg, *q))
        .collect()
}

/// Per-branch logits of one query. Masked branches are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLogits {
    pub prior: Option<Vec<f64>>,
    pub context: Option<Vec<f64>>,
    pub path: Option<Vec<f64>>,
    pub total: Vec<f64>,
}

struct ForwardTrace {
    prior: Option<crate::prior::PriorTrace>,
    context: Option<ContextTrace>,
    path: Option<crate::path::PathTrace>,
    total: Vec<f64>,
}

fn forward_trace(
    pq: &PreparedQuery,
    store: &EmbeddingStore,
    params: &ModelParams,
    mask: BranchMask,
    weights: [f64; 3],
) -> ForwardTrace {
    let Triplet { head, tail, .. } = pq.query.triplet;
    let mut total = vec![0.0; params.num_relations()];
    let mut add = |logits: &[f64], w: f64| {
        for (t, l) in total.iter_mut().zip(logits) {
            *t += w * l;
        }
    };
    let prior = mask
        .prior
        .then(|| prior_forward(head, tail, store, &params.prior));
    if let Some(p) = &prior {
        add(&p.logits, weights[0]);
    }
    let context = mask
        .needs_context_trace()
        .then(|| context_forward(&pq.neighborhood, store, &params.context));
    if mask.context {
        let c = context.as_ref().expect("context trace");
        let logits = head_forward(&c.s_ht, &params.context.out_proj, &params.context.out_bias);
        add(&logits, weights[1]);
    }
    let path = mask.path.then(|| {
        let s_ht = &context.as_ref().expect("context trace").s_ht;
        path_forward(&pq.path_ids, s_ht, &params.path)
    });
    if let Some(p) = &path {
        add(&p.logits, weights[2]);
    }
    ForwardTrace {
        prior,
        context,
        path,
        total,
    }
}

/// Per-branch and fused logits for one prepared query.
pub fn branch_logits(
    pq: &PreparedQuery,
    store: &EmbeddingStore,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> BranchLogits {
    let tr = forward_trace(pq, store, params, cfg.branches, cfg.branch_weights);
    let context = if cfg.branches.context {
        tr.context
            .as_ref()
            .map(|c| head_forward(&c.s_ht, &params.context.out_proj, &params.context.out_bias))
    } else {
        None
    };
    BranchLogits {
        prior: tr.prior.map(|p| p.logits),
        context,
        path: tr.path.map(|p| p.logits),
        total: tr.total,
    }
}

/// Relation distribution with a deterministic ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// Relation ids by descending probability, ties by ascending id.
    pub ranked: Vec<RelationId>,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let probs = softmax(logits);
        Self::from_probs(probs)
    }

    pub fn from_probs(probs: Vec<f64>) -> Self {
        let mut ranked: Vec<RelationId> = (0..probs.len()).collect();
        ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        Prediction { probs, ranked }
    }

    pub fn top_k(&self, k: usize) -> Vec<(RelationId, f64)> {
        self.ranked
            .iter()
            .take(k)
            .map(|&r| (r, self.probs[r]))
            .collect()
    }
}

pub fn forward(
    pq: &PreparedQuery,
    store: &EmbeddingStore,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Prediction {
    let tr = forward_trace(pq, store, params, cfg.branches, cfg.branch_weights);
    Prediction::from_logits(&tr.total)
}

/// `-ln max(p_r, LOG_CLAMP)` from logits, computed in log space.
fn example_loss(logits: &[f64], r: RelationId) -> f64 {
    (log_sum_exp(logits) - logits[r]).min(-LOG_CLAMP.ln())
}

/// Summed cross-entropy of the true relations over `batch`.
pub fn loss(
    batch: &[PreparedQuery],
    store: &EmbeddingStore,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> f64 {
    batch
        .iter()
        .map(|pq| {
            let tr = forward_trace(pq, store, params, cfg.branches, cfg.branch_weights);
            example_loss(&tr.total, pq.query.triplet.relation)
        })
        .sum()
}

fn example_gradient(
    pq: &PreparedQuery,
    store: &EmbeddingStore,
    params: &ModelParams,
    cfg: &TrainConfig,
    grad: &mut ModelParams,
) -> f64 {
    let mask = cfg.branches;
    let w = cfg.branch_weights;
    let tr = forward_trace(pq, store, params, mask, w);
    let r = pq.query.triplet.relation;
    let loss = example_loss(&tr.total, r);
    let mut dlogits = softmax(&tr.total);
    if dlogits[r] < LOG_CLAMP {
        // Clamped region: the loss is flat.
        return loss;
    }
    dlogits[r] -= 1.0;
    let scaled = |k: usize| -> Vec<f64> { dlogits.iter().map(|d| d * w[k]).collect() };

    if let Some(p) = &tr.prior {
        prior_backward(p, &scaled(0), &params.prior, &mut grad.prior);
    }
    if let Some(c) = &tr.context {
        let mut d_s_ht = vec![0.0; c.s_ht.len()];
        if mask.context {
            let d = head_backward(
                &c.s_ht,
                &scaled(1),
                &params.context.out_proj,
                &mut grad.context.out_proj,
                &mut grad.context.out_bias,
            );
            crate::tensor::axpy(1.0, &d, &mut d_s_ht);
        }
        if let Some(p) = &tr.path {
            let d = path_backward(p, &c.s_ht, &scaled(2), &params.path, &mut grad.path);
            crate::tensor::axpy(1.0, &d, &mut d_s_ht);
        }
        context_backward(
            c,
            &pq.neighborhood,
            store,
            &params.context,
            &d_s_ht,
            &mut grad.context,
        );
    }
    loss
}

/// Loss and exact gradient of the summed batch loss.
///
/// Runs on the current rayon pool; the result is bit-identical for any
/// number of workers.
pub fn batch_gradient(
    batch: &[PreparedQuery],
    store: &EmbeddingStore,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> (f64, ModelParams) {
    let partials: Vec<(f64, ModelParams)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = params.zeros_like();
            let loss = chunk
                .iter()
                .map(|pq| example_gradient(pq, store, params, cfg, &mut grad))
                .sum::<f64>();
            (loss, grad)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut grad) = iter.next().unwrap_or_else(|| (0.0, params.zeros_like()));
    for (l, g) in iter {
        loss += l;
        grad.add_assign(&g);
    }
    (loss, grad)
}

/// A trained model: parameters plus everything needed to score new queries.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub path_vocab: PathVocabulary,
    pub config: TrainConfig,
}

impl Model {
    pub fn prepare(&self, g: &KnowledgeGraph, triplet: Triplet) -> PreparedQuery {
        PreparedQuery::new(g, &self.path_vocab, &self.config, Query::eval(g, triplet))
    }

    pub fn predict_query(&self, pq: &PreparedQuery, store: &EmbeddingStore) -> Prediction {
        forward(pq, store, &self.params, &self.config)
    }

    /// Top-`k` relations for the pair `(h, t)`; `k` is clamped to `|R|`.
    pub fn predict(
        &self,
        g: &KnowledgeGraph,
        store: &EmbeddingStore,
        h: EntityId,
        t: EntityId,
        k: usize,
    ) -> Vec<(RelationId, f64)> {
        // The relation slot is irrelevant for scoring; it only matters for
        // finding a train fact to hide, and a bare pair hides nothing.
        let pq = PreparedQuery::new(
            g,
            &self.path_vocab,
            &self.config,
            Query {
                triplet: Triplet::new(h, 0, t),
                exclude: None,
            },
        );
        self.predict_query(&pq, store)
            .top_k(k.min(self.params.num_relations()))
    }

    /// Name-based [`Model::predict`]; unknown names are all reported at once.
    pub fn predict_names(
        &self,
        g: &KnowledgeGraph,
        store: &EmbeddingStore,
        head: &str,
        tail: &str,
        k: usize,
    ) -> Result<Vec<(String, f64)>> {
        let ids: Vec<Option<EntityId>> = [head, tail].iter().map(|n| g.entities().id(n)).collect();
        let missing: Vec<String> = [head, tail]
            .iter()
            .zip(&ids)
            .filter(|(_, id)| id.is_none())
            .map(|(n, _)| n.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnknownEntities(missing));
        }
        let (h, t) = (ids[0].unwrap_or_default(), ids[1].unwrap_or_default());
        Ok(self
            .predict(g, store, h, t, k)
            .into_iter()
            .map(|(r, p)| (g.relations().name(r).unwrap_or_default().to_string(), p))
            .collect())
    }
}
