//! Independent reference implementations for the model's forward pass and
//! a finite-difference gradient checker.
//!
//! Nothing here calls into the crate's numeric helpers: matrices are indexed
//! by hand, neighborhoods come from BFS distances instead of layered
//! expansion, and paths come from exhaustive enumeration of edge sequences.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::VecDeque;

use kgc_core::graph::{Direction, EdgeId, EntityId, KnowledgeGraph, Query, Triplet};
use kgc_core::model::{BranchMask, ModelParams, TrainConfig};
use kgc_core::path::PathVocabulary;
use kgc_core::tensor::Tensor;
use kgc_core::EmbeddingStore;
use rand::Rng;

pub type Step = (usize, Direction);

/// `x · W + b` with `W` stored row-major as `(in, out)`.
pub fn vecmat(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    assert_eq!(x.len(), rows);
    (0..cols)
        .map(|j| {
            let mut acc = b.map_or(0.0, |b| b.data[j]);
            for i in 0..rows {
                acc += x[i] * w.data[i * cols + j];
            }
            acc
        })
        .collect()
}

fn relu(v: &mut [f64], min_abs_pre: &mut f64) {
    for x in v.iter_mut() {
        *min_abs_pre = min_abs_pre.min(x.abs());
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Unweighted BFS distance from `{h, t}` over train edges minus `exclude`.
fn distances(g: &KnowledgeGraph, h: EntityId, t: EntityId, exclude: Option<EdgeId>) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.num_entities()];
    let mut queue = VecDeque::new();
    for v in [h, t] {
        dist[v] = 0;
        queue.push_back(v);
    }
    while let Some(v) = queue.pop_front() {
        for (e, tr) in g.train().iter().enumerate() {
            if Some(e) == exclude {
                continue;
            }
            for (a, b) in [(tr.head, tr.tail), (tr.tail, tr.head)] {
                if a == v && dist[b] == usize::MAX {
                    dist[b] = dist[v] + 1;
                    queue.push_back(b);
                }
            }
        }
    }
    dist
}

/// Edges with an endpoint at distance `< radius` from the query pair.
pub fn neighborhood_edges(
    g: &KnowledgeGraph,
    h: EntityId,
    t: EntityId,
    radius: usize,
    exclude: Option<EdgeId>,
) -> Vec<EdgeId> {
    let dist = distances(g, h, t, exclude);
    (0..g.train().len())
        .filter(|&e| Some(e) != exclude)
        .filter(|&e| {
            let tr = g.train()[e];
            dist[tr.head].min(dist[tr.tail]) < radius
        })
        .collect()
}

/// Context pair representation by dense recomputation. Also returns the
/// smallest |pre-activation| seen by any ReLU.
pub fn dense_pair_representation(
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    params: &ModelParams,
    query: &Query,
    k_iters: usize,
    radius: usize,
) -> (Vec<f64>, f64) {
    let c = &params.context;
    let hidden = c.rel_embed.shape[1];
    let Triplet {
        head: h, tail: t, ..
    } = query.triplet;
    let edges = neighborhood_edges(g, h, t, radius, query.exclude);
    let n = g.num_entities();
    // incidence[v][i]: how many endpoints of edge i are v (2 for a self-loop).
    let mut incidence = vec![vec![0.0; edges.len()]; n];
    for (i, &e) in edges.iter().enumerate() {
        let tr = g.train()[e];
        incidence[tr.head][i] += 1.0;
        incidence[tr.tail][i] += 1.0;
    }
    let mut states: Vec<Vec<f64>> = edges
        .iter()
        .map(|&e| c.rel_embed.data[g.train()[e].relation * hidden..][..hidden].to_vec())
        .collect();
    let mut min_pre = f64::INFINITY;
    for layer in c.layers.iter().take(k_iters) {
        let messages: Vec<Vec<f64>> = (0..n)
            .map(|v| {
                let mut m = vec![0.0; hidden];
                for (i, s) in states.iter().enumerate() {
                    for k in 0..hidden {
                        m[k] += incidence[v][i] * s[k];
                    }
                }
                m
            })
            .collect();
        states = edges
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let tr = g.train()[e];
                let mut x = messages[tr.head].clone();
                x.extend(&messages[tr.tail]);
                x.extend(&states[i]);
                let mut y = vecmat(&x, &layer.w, Some(&layer.b));
                relu(&mut y, &mut min_pre);
                y
            })
            .collect();
    }
    let mut pair_in = Vec::new();
    for v in [h, t] {
        let q = vecmat(store.get(v), &c.attn_proj, None);
        let mut keys = Vec::new();
        for (i, &e) in edges.iter().enumerate() {
            let tr = g.train()[e];
            for end in [tr.head, tr.tail] {
                if end == v {
                    keys.push(i);
                }
            }
        }
        let mut m = vec![0.0; hidden];
        if !keys.is_empty() {
            let scores: Vec<f64> = keys
                .iter()
                .map(|&i| (0..hidden).map(|k| states[i][k] * q[k]).sum())
                .collect();
            for (&i, a) in keys.iter().zip(softmax(&scores)) {
                for k in 0..hidden {
                    m[k] += a * states[i][k];
                }
            }
        }
        pair_in.extend(m);
    }
    let mut s_ht = vecmat(&pair_in, &c.w_pair, Some(&c.b_pair));
    relu(&mut s_ht, &mut min_pre);
    (s_ht, min_pre)
}

/// Every walk from `h` to `t` of length 1..=max_len, found by trying every
/// sequence of (edge, direction) choices. Sorted by (steps, edges).
pub fn brute_force_paths(
    g: &KnowledgeGraph,
    h: EntityId,
    t: EntityId,
    max_len: usize,
    exclude: Option<EdgeId>,
) -> Vec<(Vec<Step>, Vec<EdgeId>)> {
    let choices: Vec<(EdgeId, Direction)> = (0..g.train().len())
        .filter(|&e| Some(e) != exclude)
        .flat_map(|e| [(e, Direction::Forward), (e, Direction::Backward)])
        .collect();
    let mut out = Vec::new();
    for len in 1..=max_len {
        let total = choices.len().pow(len as u32);
        for mut code in 0..total {
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                seq.push(choices[code % choices.len()]);
                code /= choices.len();
            }
            let mut edges: Vec<EdgeId> = seq.iter().map(|c| c.0).collect();
            let mut sorted = edges.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != len {
                continue;
            }
            let mut at = h;
            let mut ok = true;
            let mut steps = Vec::with_capacity(len);
            for &(e, dir) in &seq {
                let tr = g.train()[e];
                let (from, to) = match dir {
                    Direction::Forward => (tr.head, tr.tail),
                    Direction::Backward => (tr.tail, tr.head),
                };
                if from != at {
                    ok = false;
                    break;
                }
                steps.push((tr.relation, dir));
                at = to;
            }
            if ok && at == t {
                out.push((steps, std::mem::take(&mut edges)));
            }
        }
    }
    out.sort();
    out
}

pub struct DenseOutput {
    pub prior: Vec<f64>,
    pub context: Vec<f64>,
    pub path: Vec<f64>,
    pub total: Vec<f64>,
    pub s_ht: Vec<f64>,
    /// Smallest |x| over every ReLU input; gradient checks resample below 1e-6.
    pub min_abs_pre: f64,
}

/// Full model forward by dense recomputation.
pub fn dense_forward(
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    params: &ModelParams,
    cfg: &TrainConfig,
    vocab: &PathVocabulary,
    query: &Query,
) -> DenseOutput {
    let Triplet {
        head: h, tail: t, ..
    } = query.triplet;
    let mut min_pre = f64::INFINITY;

    let p = &params.prior;
    let mut x = store.get(h).to_vec();
    x.extend(store.get(t));
    let mut hid = vecmat(&x, &p.mlp_w1, Some(&p.mlp_b1));
    relu(&mut hid, &mut min_pre);
    let prior = vecmat(&hid, &p.mlp_w2, Some(&p.mlp_b2));

    let (s_ht, m) =
        dense_pair_representation(g, store, params, query, cfg.k_iters, cfg.context_layers);
    min_pre = min_pre.min(m);
    let context = vecmat(
        &s_ht,
        &params.context.out_proj,
        Some(&params.context.out_bias),
    );

    let pp = &params.path;
    let hidden = s_ht.len();
    let ids: Vec<usize> = brute_force_paths(g, h, t, cfg.max_path_len, query.exclude)
        .iter()
        .map(|(steps, _)| vocab.id(steps))
        .collect();
    let row = |id: usize| &pp.path_embed.data[id * hidden..(id + 1) * hidden];
    let mut rep = vec![0.0; hidden];
    if !ids.is_empty() {
        let scores: Vec<f64> = ids
            .iter()
            .map(|&id| (0..hidden).map(|k| row(id)[k] * s_ht[k]).sum())
            .collect();
        for (&id, a) in ids.iter().zip(softmax(&scores)) {
            for k in 0..hidden {
                rep[k] += a * row(id)[k];
            }
        }
    }
    let path = vecmat(&rep, &pp.out_proj, Some(&pp.out_bias));

    let mask = cfg.branches;
    let w = cfg.branch_weights;
    let total = (0..prior.len())
        .map(|r| {
            let mut z = 0.0;
            if mask.prior {
                z += w[0] * prior[r];
            }
            if mask.context {
                z += w[1] * context[r];
            }
            if mask.path {
                z += w[2] * path[r];
            }
            z
        })
        .collect();
    DenseOutput {
        prior,
        context,
        path,
        total,
        s_ht,
        min_abs_pre: min_pre,
    }
}

/// Summed cross-entropy over `queries`, from the dense forward.
pub fn dense_loss(
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    params: &ModelParams,
    cfg: &TrainConfig,
    vocab: &PathVocabulary,
    queries: &[Query],
) -> f64 {
    queries
        .iter()
        .map(|q| {
            let z = dense_forward(g, store, params, cfg, vocab, q).total;
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[q.triplet.relation]
        })
        .sum()
}

/// Random multigraph; self-loops and parallel edges are allowed.
pub fn random_graph<R: Rng>(
    rng: &mut R,
    max_nodes: usize,
    max_edges: usize,
    num_relations: usize,
) -> KnowledgeGraph {
    let n = rng.gen_range(2..=max_nodes);
    let m = rng.gen_range(1..=max_edges);
    let train = (0..m)
        .map(|_| {
            Triplet::new(
                rng.gen_range(0..n),
                rng.gen_range(0..num_relations),
                rng.gen_range(0..n),
            )
        })
        .collect();
    KnowledgeGraph::from_ids(n, num_relations, train, vec![], vec![]).expect("valid ids")
}

/// Every parameter perturbed with uniform(-scale, scale) noise so that no
/// bias sits exactly at zero.
pub fn jitter<R: Rng>(params: &mut ModelParams, rng: &mut R, scale: f64) {
    for (_, t) in params.tensors_mut() {
        for x in &mut t.data {
            *x += rng.gen_range(-scale..scale);
        }
    }
}

pub struct FdResult {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdResult {
    /// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps coordinates whose
    /// true gradient is zero from dividing by rounding noise.
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

pub const FD_EPS: f64 = 1e-4;

/// Central differences of `loss` at `per_tensor` random coordinates of every
/// tensor, compared against `analytic`.
pub fn finite_difference_check<R: Rng>(
    params: &ModelParams,
    analytic: &ModelParams,
    per_tensor: usize,
    rng: &mut R,
    loss: impl Fn(&ModelParams) -> f64,
) -> Vec<FdResult> {
    let mut out = Vec::new();
    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.data.len()))
        .collect();
    let grads = analytic.tensors();
    for (ti, (name, len)) in names.iter().enumerate() {
        if *len == 0 {
            continue;
        }
        for _ in 0..per_tensor {
            let idx = rng.gen_range(0..*len);
            let mut probe = params.clone();
            let base = probe.tensors()[ti].1.data[idx];
            probe.tensors_mut()[ti].1.data[idx] = base + FD_EPS;
            let up = loss(&probe);
            probe.tensors_mut()[ti].1.data[idx] = base - FD_EPS;
            let down = loss(&probe);
            out.push(FdResult {
                tensor: name.clone(),
                index: idx,
                analytic: grads[ti].1.data[idx],
                numeric: (up - down) / (2.0 * FD_EPS),
            });
        }
    }
    out
}

pub fn all_masks() -> Vec<BranchMask> {
    BranchMask::nonempty_subsets()
}
