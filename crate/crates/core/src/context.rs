//! Edge-based relational message passing around a query pair.
//!
//! Every train edge near the query carries a hidden state. Each iteration a
//! node's message is the sum of its incident edge states, and each edge is
//! rebuilt from the messages at its two endpoints plus its own state:
//!
//! ```text
//! m_v^d     = Σ_{e ∈ N(v)} s_e^d
//! s_e^{d+1} = relu([m_head(e)^d ; m_tail(e)^d ; s_e^d] · W_d + b_d)
//! ```
//!
//! After the last iteration the head and tail each pool their incident edges
//! with attention keyed by their (projected) prior embedding, and the pair
//! representation is `relu([m_h ; m_t] · W_pair + b_pair)`.
//!
//! The query edge, when it is a train fact, is removed from the neighborhood.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{EdgeId, EntityId, KnowledgeGraph, Triplet};
use crate::prior::EmbeddingStore;
use crate::tensor::{
    add_outer, affine, affine_input_grad, axpy, dot, relu_backward, relu_in_place, softmax,
    softmax_backward, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextBranchParams {
    /// Initial edge state per relation type, `(|R|, hidden)`.
    pub rel_embed: Tensor,
    /// One aggregation layer per iteration, `W_d: (3·hidden, hidden)`.
    pub layers: Vec<EdgeLayer>,
    pub w_pair: Tensor,
    pub b_pair: Tensor,
    /// Projects prior embeddings into edge-state space, `(prior_dim, hidden)`.
    pub attn_proj: Tensor,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
}

impl ContextBranchParams {
    pub fn zeros(num_relations: usize, hidden: usize, k_iters: usize, prior_dim: usize) -> Self {
        ContextBranchParams {
            rel_embed: Tensor::zeros(&[num_relations, hidden]),
            layers: (0..k_iters)
                .map(|_| EdgeLayer {
                    w: Tensor::zeros(&[3 * hidden, hidden]),
                    b: Tensor::zeros(&[hidden]),
                })
                .collect(),
            w_pair: Tensor::zeros(&[2 * hidden, hidden]),
            b_pair: Tensor::zeros(&[hidden]),
            attn_proj: Tensor::zeros(&[prior_dim, hidden]),
            out_proj: Tensor::zeros(&[hidden, num_relations]),
            out_bias: Tensor::zeros(&[num_relations]),
        }
    }

    pub fn init<R: Rng>(
        num_relations: usize,
        hidden: usize,
        k_iters: usize,
        prior_dim: usize,
        rng: &mut R,
    ) -> Self {
        ContextBranchParams {
            rel_embed: Tensor::glorot(&[num_relations, hidden], rng),
            layers: (0..k_iters)
                .map(|_| EdgeLayer {
                    w: Tensor::glorot(&[3 * hidden, hidden], rng),
                    b: Tensor::zeros(&[hidden]),
                })
                .collect(),
            w_pair: Tensor::glorot(&[2 * hidden, hidden], rng),
            b_pair: Tensor::zeros(&[hidden]),
            attn_proj: Tensor::glorot(&[prior_dim, hidden], rng),
            out_proj: Tensor::glorot(&[hidden, num_relations], rng),
            out_bias: Tensor::zeros(&[num_relations]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.rel_embed.cols()
    }

    pub fn k_iters(&self) -> usize {
        self.layers.len()
    }

    pub fn num_relations(&self) -> usize {
        self.rel_embed.rows()
    }
}

/// Hidden state of every edge in a query neighborhood at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeStateTable {
    edges: Vec<EdgeId>,
    states: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl EdgeStateTable {
    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn get(&self, e: EdgeId) -> Option<&[f64]> {
        self.edges
            .binary_search(&e)
            .ok()
            .map(|i| self.states[i].as_slice())
    }

    pub fn contains(&self, e: EdgeId) -> bool {
        self.edges.binary_search(&e).is_ok()
    }
}

/// Train edges within `radius` hops of a query's endpoints, with local
/// incidence precomputed for the message-passing loop.
///
/// Layer 1 holds the edges touching the head or tail; layer `l + 1` adds the
/// edges touching any endpoint reached by layer `l`.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub head: EntityId,
    pub tail: EntityId,
    pub exclude: Option<EdgeId>,
    /// Ascending edge ids.
    pub edges: Vec<EdgeId>,
    relations: Vec<usize>,
    /// Local node indices of each edge's head and tail.
    endpoints: Vec<(usize, usize)>,
    nodes: Vec<EntityId>,
    /// Local edge indices incident to each local node; self-loops twice.
    node_edges: Vec<Vec<usize>>,
    head_node: usize,
    tail_node: usize,
}

impl Neighborhood {
    pub fn build(
        g: &KnowledgeGraph,
        head: EntityId,
        tail: EntityId,
        radius: usize,
        exclude: Option<EdgeId>,
    ) -> Self {
        let mut edge_set = BTreeSet::new();
        let mut seen = BTreeSet::from([head, tail]);
        let mut frontier: Vec<EntityId> = seen.iter().copied().collect();
        for _ in 0..radius {
            let mut next = Vec::new();
            for &v in &frontier {
                for &(e, _) in g.incident(v) {
                    if Some(e) == exclude || !edge_set.insert(e) {
                        continue;
                    }
                    let t = g.edge(e);
                    for u in [t.head, t.tail] {
                        if seen.insert(u) {
                            next.push(u);
                        }
                    }
                }
            }
            frontier = next;
        }
        let edges: Vec<EdgeId> = edge_set.into_iter().collect();

        let mut nodes = vec![head];
        let mut node_index = HashMap::from([(head, 0usize)]);
        let mut local = |v: EntityId, nodes: &mut Vec<EntityId>| -> usize {
            *node_index.entry(v).or_insert_with(|| {
                nodes.push(v);
                nodes.len() - 1
            })
        };
        let head_node = 0;
        let tail_node = local(tail, &mut nodes);
        let mut endpoints = Vec::with_capacity(edges.len());
        let mut relations = Vec::with_capacity(edges.len());
        for &e in &edges {
            let t = g.edge(e);
            endpoints.push((local(t.head, &mut nodes), local(t.tail, &mut nodes)));
            relations.push(t.relation);
        }
        let node_edges = nodes
            .iter()
            .map(|&v| {
                g.incident(v)
                    .iter()
                    .filter_map(|(e, _)| edges.binary_search(e).ok())
                    .collect()
            })
            .collect();
        Neighborhood {
            head,
            tail,
            exclude,
            edges,
            relations,
            endpoints,
            nodes,
            node_edges,
            head_node,
            tail_node,
        }
    }

    /// Neighborhood of `query`, excluding it when it is a train fact.
    pub fn for_query(g: &KnowledgeGraph, query: &Triplet, radius: usize) -> Self {
        Self::build(g, query.head, query.tail, radius, g.train_edge_of(query))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn nodes(&self) -> &[EntityId] {
        &self.nodes
    }
}

/// Initial states: every neighborhood edge takes its relation's embedding row.
pub fn init_edge_states(
    g: &KnowledgeGraph,
    query: &Triplet,
    k_hops: usize,
    params: &ContextBranchParams,
) -> EdgeStateTable {
    let nb = Neighborhood::for_query(g, query, k_hops);
    EdgeStateTable {
        states: nb
            .relations
            .iter()
            .map(|&r| params.rel_embed.row(r).to_vec())
            .collect(),
        edges: nb.edges,
        iteration: 0,
    }
}

/// Sum of the states of `v`'s incident edges that are present in `table`.
pub fn node_message(
    v: EntityId,
    table: &EdgeStateTable,
    g: &KnowledgeGraph,
    exclude: Option<EdgeId>,
) -> Result<Vec<f64>> {
    let hidden = table.states.first().map_or(0, Vec::len);
    let mut m = vec![0.0; hidden];
    for (e, _) in g.incident_edges(v, exclude)? {
        if let Some(s) = table.get(e) {
            axpy(1.0, s, &mut m);
        }
    }
    Ok(m)
}

/// One aggregation step for edge `e` using layer `d`.
pub fn edge_update(
    e: EdgeId,
    d: usize,
    table: &EdgeStateTable,
    g: &KnowledgeGraph,
    params: &ContextBranchParams,
) -> Result<Vec<f64>> {
    let layer = params
        .layers
        .get(d)
        .ok_or_else(|| Error::Shape(format!("no aggregation layer {d}")))?;
    let s = table
        .get(e)
        .ok_or_else(|| Error::Shape(format!("edge {e} is not in the state table")))?;
    let hidden = s.len();
    if layer.w.rows() != 3 * hidden || layer.w.cols() != hidden || layer.b.len() != hidden {
        return Err(Error::Shape(format!(
            "layer {d} is {:?} but edge states have length {hidden}",
            layer.w.shape
        )));
    }
    let t = g.edge(e);
    let mut x = node_message(t.head, table, g, None)?;
    x.extend(node_message(t.tail, table, g, None)?);
    x.extend_from_slice(s);
    let mut out = vec![0.0; hidden];
    affine(&x, &layer.w, &layer.b.data, &mut out);
    relu_in_place(&mut out);
    Ok(out)
}

/// Attention of `v` over its incident edges in `table`, keyed by `v`'s
/// projected prior embedding. `None` when `v` has no incident edge there.
pub fn edge_attention(
    v: EntityId,
    table: &EdgeStateTable,
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    params: &ContextBranchParams,
) -> Result<Option<Vec<(EdgeId, f64)>>> {
    let incident: Vec<EdgeId> = g
        .incident_edges(v, None)?
        .into_iter()
        .map(|(e, _)| e)
        .filter(|e| table.contains(*e))
        .collect();
    if incident.is_empty() {
        return Ok(None);
    }
    let q = project_prior(store.get(v), params);
    let scores: Vec<f64> = incident
        .iter()
        .map(|&e| dot(table.get(e).unwrap_or_default(), &q))
        .collect();
    Ok(Some(incident.into_iter().zip(softmax(&scores)).collect()))
}

fn project_prior(emb: &[f64], params: &ContextBranchParams) -> Vec<f64> {
    let mut q = vec![0.0; params.hidden()];
    let zeros = vec![0.0; params.hidden()];
    affine(emb, &params.attn_proj, &zeros, &mut q);
    q
}

/// Context representation of the pair after `k_iters` rounds of message
/// passing over the `context_layers`-hop neighborhood.
///
/// This is the step-by-step reference path; training uses the traced
/// equivalent in this module.
pub fn pair_representation(
    query: &Triplet,
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    params: &ContextBranchParams,
    k_iters: usize,
    context_layers: usize,
) -> Result<Vec<f64>> {
    if k_iters == 0 || k_iters > params.k_iters() {
        return Err(Error::Config(format!(
            "k_iters must be in 1..={}, got {k_iters}",
            params.k_iters()
        )));
    }
    let mut table = init_edge_states(g, query, context_layers, params);
    for d in 0..k_iters {
        let states = table
            .edges
            .iter()
            .map(|&e| edge_update(e, d, &table, g, params))
            .collect::<Result<Vec<_>>>()?;
        table.states = states;
        table.iteration = d + 1;
    }
    let hidden = params.hidden();
    let mut pair_in = Vec::with_capacity(2 * hidden);
    for v in [query.head, query.tail] {
        let mut m = vec![0.0; hidden];
        if let Some(weights) = edge_attention(v, &table, g, store, params)? {
            for (e, a) in weights {
                axpy(a, table.get(e).unwrap_or_default(), &mut m);
            }
        }
        pair_in.extend(m);
    }
    let mut out = vec![0.0; hidden];
    affine(&pair_in, &params.w_pair, &params.b_pair.data, &mut out);
    relu_in_place(&mut out);
    Ok(out)
}

/// `out_projᵀ · rep + out_bias`.
pub fn context_logits(rep: &[f64], params: &ContextBranchParams) -> Result<Vec<f64>> {
    if rep.len() != params.out_proj.rows() {
        return Err(Error::Shape(format!(
            "representation has length {}, projection expects {}",
            rep.len(),
            params.out_proj.rows()
        )));
    }
    let mut out = vec![0.0; params.out_proj.cols()];
    affine(rep, &params.out_proj, &params.out_bias.data, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Default)]
struct AttentionTrace {
    /// Local edge indices attended over.
    edges: Vec<usize>,
    alpha: Vec<f64>,
    query: Vec<f64>,
}

/// Everything the backward pass needs from one context forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ContextTrace {
    hidden: usize,
    /// `states[d]` is the flattened `(n_edges, hidden)` state table at iteration `d`.
    states: Vec<Vec<f64>>,
    /// Layer inputs `[m_head ; m_tail ; s]`, flattened `(n_edges, 3·hidden)`.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    head_attn: AttentionTrace,
    tail_attn: AttentionTrace,
    pair_in: Vec<f64>,
    pair_pre: Vec<f64>,
    pub s_ht: Vec<f64>,
}

fn node_messages(nb: &Neighborhood, states: &[f64], hidden: usize) -> Vec<f64> {
    let mut msgs = vec![0.0; nb.nodes.len() * hidden];
    for (v, incident) in nb.node_edges.iter().enumerate() {
        let m = &mut msgs[v * hidden..(v + 1) * hidden];
        for &i in incident {
            axpy(1.0, &states[i * hidden..(i + 1) * hidden], m);
        }
    }
    msgs
}

fn attend(
    nb: &Neighborhood,
    node: usize,
    states: &[f64],
    hidden: usize,
    store: &EmbeddingStore,
    params: &ContextBranchParams,
    out: &mut [f64],
) -> AttentionTrace {
    let edges = nb.node_edges[node].clone();
    if edges.is_empty() {
        return AttentionTrace::default();
    }
    let query = project_prior(store.get(nb.nodes[node]), params);
    let scores: Vec<f64> = edges
        .iter()
        .map(|&i| dot(&states[i * hidden..(i + 1) * hidden], &query))
        .collect();
    let alpha = softmax(&scores);
    for (&i, &a) in edges.iter().zip(&alpha) {
        axpy(a, &states[i * hidden..(i + 1) * hidden], out);
    }
    AttentionTrace {
        edges,
        alpha,
        query,
    }
}

pub(crate) fn context_forward(
    nb: &Neighborhood,
    store: &EmbeddingStore,
    params: &ContextBranchParams,
) -> ContextTrace {
    let hidden = params.hidden();
    let n = nb.len();
    let mut s0 = Vec::with_capacity(n * hidden);
    for &r in &nb.relations {
        s0.extend_from_slice(params.rel_embed.row(r));
    }
    let mut states = vec![s0];
    let mut inputs = Vec::with_capacity(params.k_iters());
    let mut pres = Vec::with_capacity(params.k_iters());
    for layer in &params.layers {
        let cur = states.last().expect("initial states");
        let msgs = node_messages(nb, cur, hidden);
        let mut x = vec![0.0; n * 3 * hidden];
        let mut pre = vec![0.0; n * hidden];
        for (i, &(a, b)) in nb.endpoints.iter().enumerate() {
            let xi = &mut x[i * 3 * hidden..(i + 1) * 3 * hidden];
            xi[..hidden].copy_from_slice(&msgs[a * hidden..(a + 1) * hidden]);
            xi[hidden..2 * hidden].copy_from_slice(&msgs[b * hidden..(b + 1) * hidden]);
            xi[2 * hidden..].copy_from_slice(&cur[i * hidden..(i + 1) * hidden]);
            affine(
                xi,
                &layer.w,
                &layer.b.data,
                &mut pre[i * hidden..(i + 1) * hidden],
            );
        }
        let mut next = pre.clone();
        relu_in_place(&mut next);
        inputs.push(x);
        pres.push(pre);
        states.push(next);
    }
    let last = states.last().expect("final states");
    let mut pair_in = vec![0.0; 2 * hidden];
    let (mh, mt) = pair_in.split_at_mut(hidden);
    let head_attn = attend(nb, nb.head_node, last, hidden, store, params, mh);
    let tail_attn = attend(nb, nb.tail_node, last, hidden, store, params, mt);
    let mut pair_pre = vec![0.0; hidden];
    affine(&pair_in, &params.w_pair, &params.b_pair.data, &mut pair_pre);
    let mut s_ht = pair_pre.clone();
    relu_in_place(&mut s_ht);
    ContextTrace {
        hidden,
        states,
        inputs,
        pre: pres,
        head_attn,
        tail_attn,
        pair_in,
        pair_pre,
        s_ht,
    }
}

fn attend_backward(
    attn: &AttentionTrace,
    emb: &[f64],
    states: &[f64],
    hidden: usize,
    dm: &[f64],
    dstates: &mut [f64],
    grad: &mut ContextBranchParams,
) {
    if attn.edges.is_empty() {
        return;
    }
    let dalpha: Vec<f64> = attn
        .edges
        .iter()
        .map(|&i| dot(dm, &states[i * hidden..(i + 1) * hidden]))
        .collect();
    let dscore = softmax_backward(&attn.alpha, &dalpha);
    let mut dq = vec![0.0; hidden];
    for ((&i, &a), &ds) in attn.edges.iter().zip(&attn.alpha).zip(&dscore) {
        let s = &states[i * hidden..(i + 1) * hidden];
        let d = &mut dstates[i * hidden..(i + 1) * hidden];
        axpy(a, dm, d);
        axpy(ds, &attn.query, d);
        axpy(ds, s, &mut dq);
    }
    add_outer(&mut grad.attn_proj, emb, &dq);
}

/// Accumulates parameter gradients given `d_s_ht = ∂loss/∂S_(h,t)`.
pub(crate) fn context_backward(
    trace: &ContextTrace,
    nb: &Neighborhood,
    store: &EmbeddingStore,
    params: &ContextBranchParams,
    d_s_ht: &[f64],
    grad: &mut ContextBranchParams,
) {
    let hidden = trace.hidden;
    let n = nb.len();
    let mut dpre = d_s_ht.to_vec();
    relu_backward(&trace.pair_pre, &mut dpre);
    add_outer(&mut grad.w_pair, &trace.pair_in, &dpre);
    axpy(1.0, &dpre, &mut grad.b_pair.data);
    let mut dpair_in = vec![0.0; 2 * hidden];
    affine_input_grad(&params.w_pair, &dpre, &mut dpair_in);

    let k = params.k_iters();
    let mut dstates = vec![0.0; n * hidden];
    let last = &trace.states[k];
    attend_backward(
        &trace.head_attn,
        store.get(nb.head),
        last,
        hidden,
        &dpair_in[..hidden],
        &mut dstates,
        grad,
    );
    attend_backward(
        &trace.tail_attn,
        store.get(nb.tail),
        last,
        hidden,
        &dpair_in[hidden..],
        &mut dstates,
        grad,
    );

    for d in (0..k).rev() {
        let layer = &params.layers[d];
        let mut dz = dstates;
        relu_backward(&trace.pre[d], &mut dz);
        let x = &trace.inputs[d];
        let mut dprev = vec![0.0; n * hidden];
        let mut dmsgs = vec![0.0; nb.nodes.len() * hidden];
        let mut dx = vec![0.0; 3 * hidden];
        for (i, &(a, b)) in nb.endpoints.iter().enumerate() {
            let dzi = &dz[i * hidden..(i + 1) * hidden];
            if dzi.iter().all(|v| *v == 0.0) {
                continue;
            }
            add_outer(
                &mut grad.layers[d].w,
                &x[i * 3 * hidden..(i + 1) * 3 * hidden],
                dzi,
            );
            axpy(1.0, dzi, &mut grad.layers[d].b.data);
            dx.iter_mut().for_each(|v| *v = 0.0);
            affine_input_grad(&layer.w, dzi, &mut dx);
            axpy(1.0, &dx[..hidden], &mut dmsgs[a * hidden..(a + 1) * hidden]);
            axpy(
                1.0,
                &dx[hidden..2 * hidden],
                &mut dmsgs[b * hidden..(b + 1) * hidden],
            );
            axpy(
                1.0,
                &dx[2 * hidden..],
                &mut dprev[i * hidden..(i + 1) * hidden],
            );
        }
        for (v, incident) in nb.node_edges.iter().enumerate() {
            let dm = &dmsgs[v * hidden..(v + 1) * hidden];
            for &i in incident {
                axpy(1.0, dm, &mut dprev[i * hidden..(i + 1) * hidden]);
            }
        }
        dstates = dprev;
    }
    for (i, &r) in nb.relations.iter().enumerate() {
        axpy(
            1.0,
            &dstates[i * hidden..(i + 1) * hidden],
            grad.rel_embed.row_mut(r),
        );
    }
}

pub(crate) fn head_forward(rep: &[f64], out_proj: &Tensor, out_bias: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; out_proj.cols()];
    affine(rep, out_proj, &out_bias.data, &mut out);
    out
}

/// Backward of [`head_forward`]; returns `∂loss/∂rep`.
pub(crate) fn head_backward(
    rep: &[f64],
    dlogits: &[f64],
    out_proj: &Tensor,
    d_out_proj: &mut Tensor,
    d_out_bias: &mut Tensor,
) -> Vec<f64> {
    add_outer(d_out_proj, rep, dlogits);
    axpy(1.0, dlogits, &mut d_out_bias.data);
    let mut drep = vec![0.0; rep.len()];
    affine_input_grad(out_proj, dlogits, &mut drep);
    drep
}
