//! Head-to-tail relational paths and their attention-weighted aggregation.

use std::collections::HashMap;

use rand::Rng;

use crate::context::{head_backward, head_forward};
use crate::error::{Error, Result};
use crate::graph::{Direction, EdgeId, EntityId, KnowledgeGraph, Query, RelationId};
use crate::tensor::{axpy, dot, softmax, softmax_backward, Tensor};

pub type PathStep = (RelationId, Direction);

/// Path-type id reserved for step sequences never seen while building the vocabulary.
pub const UNK_PATH: usize = 0;

/// An edge-distinct walk from head to tail.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationalPath {
    pub steps: Vec<PathStep>,
    pub edges: Vec<EdgeId>,
}

impl RelationalPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Every walk from `h` to `t` with 1..=`max_len` steps over train edges in
/// either direction, never reusing an edge and never using `exclude`.
///
/// Walks may pass through `t` and return to it; each arrival is a path.
/// Output is sorted by step sequence, then by edge sequence.
pub fn enumerate_paths(
    g: &KnowledgeGraph,
    h: EntityId,
    t: EntityId,
    max_len: usize,
    exclude: Option<EdgeId>,
) -> Vec<RelationalPath> {
    let mut out = Vec::new();
    let mut steps = Vec::with_capacity(max_len);
    let mut edges = Vec::with_capacity(max_len);
    walk(g, h, t, max_len, exclude, &mut steps, &mut edges, &mut out);
    out.sort();
    out
}

#[allow(clippy::too_many_arguments)]
fn walk(
    g: &KnowledgeGraph,
    at: EntityId,
    target: EntityId,
    max_len: usize,
    exclude: Option<EdgeId>,
    steps: &mut Vec<PathStep>,
    edges: &mut Vec<EdgeId>,
    out: &mut Vec<RelationalPath>,
) {
    if steps.len() == max_len {
        return;
    }
    for &(e, dir) in g.incident(at) {
        if Some(e) == exclude || edges.contains(&e) {
            continue;
        }
        let triplet = g.edge(e);
        let next = match dir {
            Direction::Forward => triplet.tail,
            Direction::Backward => triplet.head,
        };
        steps.push((triplet.relation, dir));
        edges.push(e);
        if next == target {
            out.push(RelationalPath {
                steps: steps.clone(),
                edges: edges.clone(),
            });
        }
        walk(g, next, target, max_len, exclude, steps, edges, out);
        steps.pop();
        edges.pop();
    }
}

/// Path types (step sequences) seen on train queries, with ids from 1 in
/// first-appearance order. Id 0 is [`UNK_PATH`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathVocabulary {
    ids: HashMap<Vec<PathStep>, usize>,
    types: Vec<Vec<PathStep>>,
}

impl PathVocabulary {
    /// Number of known path types, not counting UNK.
    pub fn size(&self) -> usize {
        self.types.len()
    }

    pub fn id(&self, steps: &[PathStep]) -> usize {
        self.ids.get(steps).copied().unwrap_or(UNK_PATH)
    }

    /// Step sequence for a known id.
    pub fn steps(&self, id: usize) -> Option<&[PathStep]> {
        id.checked_sub(1)
            .and_then(|i| self.types.get(i))
            .map(Vec::as_slice)
    }

    fn insert(&mut self, steps: &[PathStep]) {
        if !self.ids.contains_key(steps) {
            self.types.push(steps.to_vec());
            self.ids.insert(steps.to_vec(), self.types.len());
        }
    }

    pub fn from_types(types: impl IntoIterator<Item = Vec<PathStep>>) -> Self {
        let mut v = PathVocabulary::default();
        for t in types {
            v.insert(&t);
        }
        v
    }

    pub fn types(&self) -> &[Vec<PathStep>] {
        &self.types
    }
}

/// Vocabulary over the paths of `queries`, each with its own edge excluded.
pub fn build_path_vocab(g: &KnowledgeGraph, queries: &[Query], max_len: usize) -> PathVocabulary {
    let mut vocab = PathVocabulary::default();
    for q in queries {
        for p in enumerate_paths(g, q.triplet.head, q.triplet.tail, max_len, q.exclude) {
            vocab.insert(&p.steps);
        }
    }
    vocab
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBranchParams {
    /// One row per path type, row 0 for UNK: `(vocab_size + 1, hidden)`.
    pub path_embed: Tensor,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
}

impl PathBranchParams {
    pub fn zeros(vocab_size: usize, hidden: usize, num_relations: usize) -> Self {
        PathBranchParams {
            path_embed: Tensor::zeros(&[vocab_size + 1, hidden]),
            out_proj: Tensor::zeros(&[hidden, num_relations]),
            out_bias: Tensor::zeros(&[num_relations]),
        }
    }

    pub fn init<R: Rng>(
        vocab_size: usize,
        hidden: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Self {
        PathBranchParams {
            path_embed: Tensor::glorot(&[vocab_size + 1, hidden], rng),
            out_proj: Tensor::glorot(&[hidden, num_relations], rng),
            out_bias: Tensor::zeros(&[num_relations]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.path_embed.cols()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PathTrace {
    ids: Vec<usize>,
    alpha: Vec<f64>,
    rep: Vec<f64>,
    pub logits: Vec<f64>,
}

fn attend_paths(ids: &[usize], s_ht: &[f64], params: &PathBranchParams) -> (Vec<f64>, Vec<f64>) {
    let mut rep = vec![0.0; params.hidden()];
    if ids.is_empty() {
        return (Vec::new(), rep);
    }
    let scores: Vec<f64> = ids
        .iter()
        .map(|&id| dot(params.path_embed.row(id), s_ht))
        .collect();
    let alpha = softmax(&scores);
    for (&id, &a) in ids.iter().zip(&alpha) {
        axpy(a, params.path_embed.row(id), &mut rep);
    }
    (alpha, rep)
}

/// Attention weights of each path against `s_ht`, in input order.
pub fn path_attention(
    paths: &[RelationalPath],
    s_ht: &[f64],
    vocab: &PathVocabulary,
    params: &PathBranchParams,
) -> Vec<f64> {
    let ids: Vec<usize> = paths.iter().map(|p| vocab.id(&p.steps)).collect();
    attend_paths(&ids, s_ht, params).0
}

/// `Σ_P α_P · E_P` with `α = softmax_P(E_P · s_ht)`; zero when there are no paths.
pub fn aggregate_paths(
    paths: &[RelationalPath],
    s_ht: &[f64],
    vocab: &PathVocabulary,
    params: &PathBranchParams,
) -> Result<Vec<f64>> {
    if s_ht.len() != params.hidden() {
        return Err(Error::Shape(format!(
            "context representation has length {}, path embeddings {}",
            s_ht.len(),
            params.hidden()
        )));
    }
    let ids: Vec<usize> = paths.iter().map(|p| vocab.id(&p.steps)).collect();
    if let Some(bad) = ids.iter().find(|&&id| id >= params.path_embed.rows()) {
        return Err(Error::Shape(format!("path id {bad} has no embedding row")));
    }
    Ok(attend_paths(&ids, s_ht, params).1)
}

/// `out_projᵀ · rep + out_bias`.
pub fn path_logits(rep: &[f64], params: &PathBranchParams) -> Result<Vec<f64>> {
    if rep.len() != params.out_proj.rows() {
        return Err(Error::Shape(format!(
            "representation has length {}, projection expects {}",
            rep.len(),
            params.out_proj.rows()
        )));
    }
    Ok(head_forward(rep, &params.out_proj, &params.out_bias))
}

pub(crate) fn path_forward(ids: &[usize], s_ht: &[f64], params: &PathBranchParams) -> PathTrace {
    let (alpha, rep) = attend_paths(ids, s_ht, params);
    let logits = head_forward(&rep, &params.out_proj, &params.out_bias);
    PathTrace {
        ids: ids.to_vec(),
        alpha,
        rep,
        logits,
    }
}

/// Accumulates gradients and returns `∂loss/∂s_ht`.
pub(crate) fn path_backward(
    trace: &PathTrace,
    s_ht: &[f64],
    dlogits: &[f64],
    params: &PathBranchParams,
    grad: &mut PathBranchParams,
) -> Vec<f64> {
    let drep = head_backward(
        &trace.rep,
        dlogits,
        &params.out_proj,
        &mut grad.out_proj,
        &mut grad.out_bias,
    );
    let mut d_s_ht = vec![0.0; s_ht.len()];
    if trace.ids.is_empty() {
        return d_s_ht;
    }
    let dalpha: Vec<f64> = trace
        .ids
        .iter()
        .map(|&id| dot(&drep, params.path_embed.row(id)))
        .collect();
    let dscore = softmax_backward(&trace.alpha, &dalpha);
    for ((&id, &a), &ds) in trace.ids.iter().zip(&trace.alpha).zip(&dscore) {
        let row = grad.path_embed.row_mut(id);
        axpy(a, &drep, row);
        axpy(ds, s_ht, row);
        axpy(ds, params.path_embed.row(id), &mut d_s_ht);
    }
    d_s_ht
}
