//! Seeded synthetic benchmark where each branch sees a different half of
//! the answer.
//!
//! Every entity has a hidden type `τ ∈ 0..4` and a hidden parity bit `π`.
//! The relation of an edge `(h, t)` is `2 * ((τh + τt) mod 4) + (πh xor πt)`.
//! Entity embeddings are noisy copies of a per-type prototype, so the prior
//! branch can recover the type term but not the parity. Parities compose
//! along any path, so the relation sequence between `h` and `t` reveals
//! the parity term but only part of the type term.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{write_dataset, KnowledgeGraph, Triplet};
use crate::model::TrainConfig;
use crate::prior::{fallback_embedding, EmbeddingStore};

pub const NUM_TYPES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub entities: usize,
    /// Each entity links to `out_links` distinct entities among the next `window`.
    pub out_links: usize,
    pub window: usize,
    pub embedding_dim: usize,
    /// Per-coordinate half-width of the uniform noise added to prototypes.
    pub noise: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            entities: 200,
            out_links: 5,
            window: 5,
            embedding_dim: 16,
            noise: 0.05,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub graph: KnowledgeGraph,
    pub embeddings: EmbeddingStore,
    pub types: Vec<usize>,
    pub parities: Vec<bool>,
}

/// Training settings the synthetic benchmark is calibrated for.
pub fn benchmark_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        batch_size: 32,
        epochs: 20,
        hidden: 16,
        k_iters: 2,
        context_layers: 2,
        max_path_len: 2,
        prior_dim: SyntheticSpec::default().embedding_dim,
        seed,
        ..TrainConfig::default()
    }
}

pub fn relation_for(types: &[usize], parities: &[bool], h: usize, t: usize) -> usize {
    2 * ((types[h] + types[t]) % NUM_TYPES) + usize::from(parities[h] ^ parities[t])
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.entities;
    let types: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_TYPES)).collect();
    let parities: Vec<bool> = (0..n).map(|_| rng.gen()).collect();

    let mut edges = Vec::new();
    let offsets: Vec<usize> = (1..=spec.window).collect();
    for i in 0..n {
        for &d in offsets.choose_multiple(&mut rng, spec.out_links.min(spec.window)) {
            let j = (i + d) % n;
            if i == j {
                continue;
            }
            let (h, t) = if rng.gen() { (i, j) } else { (j, i) };
            edges.push(Triplet::new(h, relation_for(&types, &parities, h, t), t));
        }
    }
    edges.shuffle(&mut rng);
    let n_valid = (edges.len() as f64 * spec.valid_fraction).round() as usize;
    let n_test = (edges.len() as f64 * spec.test_fraction).round() as usize;
    let test = edges.split_off(edges.len() - n_test);
    let valid = edges.split_off(edges.len() - n_valid);
    let graph = KnowledgeGraph::from_ids(n, 2 * NUM_TYPES, edges, valid, test)?;

    let prototypes: Vec<Vec<f64>> = (0..NUM_TYPES)
        .map(|k| fallback_embedding(&format!("type-{k}"), spec.embedding_dim, spec.seed))
        .collect();
    let vectors = types
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = prototypes[k]
                .iter()
                .map(|x| x + rng.gen_range(-spec.noise..=spec.noise))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();
    let embeddings = EmbeddingStore::from_vectors(spec.embedding_dim, vectors)?;
    Ok(SyntheticData {
        graph,
        embeddings,
        types,
        parities,
    })
}

/// Writes `train.txt`, `valid.txt`, `test.txt` and `embeddings.bin` into `dir`.
pub fn write(data: &SyntheticData, dir: &Path) -> Result<()> {
    write_dataset(dir, &data.graph)?;
    data.embeddings
        .export(dir.join("embeddings.bin"), &data.graph)
}
