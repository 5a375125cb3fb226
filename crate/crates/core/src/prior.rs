//! Per-entity prior (description) embeddings and the prior relation logits.
//!
//! The engine never runs a text encoder itself: an external exporter writes
//! one vector per entity into a `MUSEEMB1` file. Entities absent from that
//! file get a deterministic hash-seeded fallback vector.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph};
use crate::tensor::{add_outer, affine, affine_input_grad, relu_backward, relu_in_place, Tensor};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"MUSEEMB1";
pub const DEFAULT_FALLBACK_SEED: u64 = 0;

/// One named vector as stored in an embedding file.
pub type EmbeddingRecord = (String, Vec<f32>);

/// Deterministic unit-norm stand-in embedding for `name`.
///
/// The vector is drawn from a ChaCha stream keyed by `sha256(seed_le || name)`,
/// so it is identical across runs and platforms.
pub fn fallback_embedding(name: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingSource {
    File,
    Fallback,
}

/// Prior vector for every graph entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    sources: Vec<EmbeddingSource>,
}

impl EmbeddingStore {
    /// Store where every entity uses its fallback vector.
    pub fn fallback(g: &KnowledgeGraph, dim: usize, seed: u64) -> Self {
        let vectors = g
            .entities()
            .names()
            .iter()
            .map(|n| fallback_embedding(n, dim, seed))
            .collect();
        EmbeddingStore {
            dim,
            vectors,
            sources: vec![EmbeddingSource::Fallback; g.num_entities()],
        }
    }

    /// Store built from explicit per-entity vectors (all marked as file-backed).
    pub fn from_vectors(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::Shape(format!(
                "embedding of length {} in a store of dim {dim}",
                v.len()
            )));
        }
        let sources = vec![EmbeddingSource::File; vectors.len()];
        Ok(EmbeddingStore {
            dim,
            vectors,
            sources,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, v: EntityId) -> &[f64] {
        &self.vectors[v]
    }

    pub fn source(&self, v: EntityId) -> EmbeddingSource {
        self.sources[v]
    }

    pub fn file_backed(&self) -> usize {
        self.sources
            .iter()
            .filter(|s| **s == EmbeddingSource::File)
            .count()
    }

    /// Writes every entity vector (as f32) in the `MUSEEMB1` format.
    pub fn export(&self, path: impl AsRef<Path>, g: &KnowledgeGraph) -> Result<()> {
        let records: Vec<(String, Vec<f32>)> = g
            .entities()
            .names()
            .iter()
            .zip(&self.vectors)
            .map(|(n, v)| (n.clone(), v.iter().map(|&x| x as f32).collect()))
            .collect();
        write_embedding_file(path, self.dim, &records)
    }
}

/// Loads a `MUSEEMB1` file; graph entities missing from it fall back to
/// [`fallback_embedding`] with [`DEFAULT_FALLBACK_SEED`].
pub fn load_embeddings(path: impl AsRef<Path>, g: &KnowledgeGraph) -> Result<EmbeddingStore> {
    load_embeddings_with_seed(path, g, DEFAULT_FALLBACK_SEED)
}

pub fn load_embeddings_with_seed(
    path: impl AsRef<Path>,
    g: &KnowledgeGraph,
    fallback_seed: u64,
) -> Result<EmbeddingStore> {
    let (dim, records) = read_embedding_file(path)?;
    let mut vectors: Vec<Option<Vec<f64>>> = vec![None; g.num_entities()];
    for (name, vec) in records {
        let id = g
            .entities()
            .id(&name)
            .ok_or_else(|| Error::EmbeddingUnknownEntity(name.clone()))?;
        vectors[id] = Some(vec.into_iter().map(f64::from).collect());
    }
    let mut sources = Vec::with_capacity(vectors.len());
    let vectors = vectors
        .into_iter()
        .enumerate()
        .map(|(id, v)| match v {
            Some(v) => {
                sources.push(EmbeddingSource::File);
                v
            }
            None => {
                sources.push(EmbeddingSource::Fallback);
                let name = g.entities().name(id).unwrap_or_default();
                fallback_embedding(name, dim, fallback_seed)
            }
        })
        .collect();
    Ok(EmbeddingStore {
        dim,
        vectors,
        sources,
    })
}

pub fn write_embedding_file(
    path: impl AsRef<Path>,
    dim: usize,
    records: &[(String, Vec<f32>)],
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for (name, v) in records {
        if v.len() != dim {
            return Err(Error::EmbeddingFormat(format!(
                "record {name:?} has {} values, expected {dim}",
                v.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::EmbeddingFormat(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses and validates a `MUSEEMB1` file, returning `(dim, records)`.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_bytes(&bytes)
}

pub fn parse_embedding_bytes(bytes: &[u8]) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != EMBEDDING_MAGIC {
        return Err(Error::EmbeddingFormat("bad magic".into()));
    }
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::EmbeddingFormat("header declares dim 0".into()));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::EmbeddingFormat("entity name is not UTF-8".into()))?
            .to_owned();
        let raw = r.take(4 * dim, &format!("vector of {name:?}"))?;
        let v = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::EmbeddingFormat(format!("duplicate entity {name:?}")));
        }
        records.push((name, v));
    }
    if r.pos != bytes.len() {
        return Err(Error::EmbeddingFormat(format!(
            "{} trailing bytes after {count} records of dim {dim}",
            bytes.len() - r.pos
        )));
    }
    Ok((dim, records))
}

/// Two-layer MLP over `concat(emb(h), emb(t))` producing one logit per relation.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBranchParams {
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl PriorBranchParams {
    pub fn zeros(prior_dim: usize, hidden: usize, num_relations: usize) -> Self {
        PriorBranchParams {
            mlp_w1: Tensor::zeros(&[2 * prior_dim, hidden]),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: Tensor::zeros(&[hidden, num_relations]),
            mlp_b2: Tensor::zeros(&[num_relations]),
        }
    }

    pub fn init<R: Rng>(
        prior_dim: usize,
        hidden: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Self {
        PriorBranchParams {
            mlp_w1: Tensor::glorot(&[2 * prior_dim, hidden], rng),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: Tensor::glorot(&[hidden, num_relations], rng),
            mlp_b2: Tensor::zeros(&[num_relations]),
        }
    }

    pub fn prior_dim(&self) -> usize {
        self.mlp_w1.rows() / 2
    }

    pub fn hidden(&self) -> usize {
        self.mlp_w1.cols()
    }

    pub fn num_relations(&self) -> usize {
        self.mlp_w2.cols()
    }
}

/// Intermediate values of one prior forward pass.
#[derive(Debug, Clone)]
pub(crate) struct PriorTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn prior_forward(
    h: EntityId,
    t: EntityId,
    store: &EmbeddingStore,
    p: &PriorBranchParams,
) -> PriorTrace {
    let mut input = Vec::with_capacity(2 * store.dim());
    input.extend_from_slice(store.get(h));
    input.extend_from_slice(store.get(t));
    let mut pre = vec![0.0; p.hidden()];
    affine(&input, &p.mlp_w1, &p.mlp_b1.data, &mut pre);
    let mut act = pre.clone();
    relu_in_place(&mut act);
    let mut logits = vec![0.0; p.num_relations()];
    affine(&act, &p.mlp_w2, &p.mlp_b2.data, &mut logits);
    PriorTrace {
        input,
        pre,
        act,
        logits,
    }
}

pub(crate) fn prior_backward(
    trace: &PriorTrace,
    dlogits: &[f64],
    p: &PriorBranchParams,
    grad: &mut PriorBranchParams,
) {
    add_outer(&mut grad.mlp_w2, &trace.act, dlogits);
    crate::tensor::axpy(1.0, dlogits, &mut grad.mlp_b2.data);
    let mut dact = vec![0.0; trace.act.len()];
    affine_input_grad(&p.mlp_w2, dlogits, &mut dact);
    relu_backward(&trace.pre, &mut dact);
    add_outer(&mut grad.mlp_w1, &trace.input, &dact);
    crate::tensor::axpy(1.0, &dact, &mut grad.mlp_b1.data);
}

/// Unnormalized relation logits from the two entities' prior embeddings.
pub fn prior_logits(
    h: EntityId,
    t: EntityId,
    store: &EmbeddingStore,
    p: &PriorBranchParams,
) -> Result<Vec<f64>> {
    if p.prior_dim() != store.dim() {
        return Err(Error::Shape(format!(
            "prior MLP expects embeddings of dim {}, store has dim {}",
            p.prior_dim(),
            store.dim()
        )));
    }
    if p.mlp_b1.len() != p.hidden()
        || p.mlp_w2.rows() != p.hidden()
        || p.mlp_b2.len() != p.num_relations()
    {
        return Err(Error::Shape("inconsistent prior MLP shapes".into()));
    }
    for v in [h, t] {
        if v >= store.len() {
            return Err(Error::UnknownEntityId(v));
        }
    }
    Ok(prior_forward(h, t, store, p).logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Triplet;

    fn abc_graph() -> KnowledgeGraph {
        let train = vec![Triplet::new(0, 0, 1), Triplet::new(1, 1, 2)];
        let mut g_ents = crate::graph::Vocab::new();
        for n in ["a", "b", "c"] {
            g_ents.intern(n);
        }
        let mut rels = crate::graph::Vocab::new();
        rels.intern("r1");
        rels.intern("r2");
        KnowledgeGraph::new(g_ents, rels, train, vec![], vec![]).unwrap()
    }

    #[test]
    fn fallback_is_deterministic_and_unit_norm() {
        let a = fallback_embedding("Labrador", 17, 5);
        assert_eq!(a, fallback_embedding("Labrador", 17, 5));
        assert_ne!(a, fallback_embedding("Labrador", 17, 6));
        for name in ["", "x", "Bush Senior", "日本"] {
            let v = fallback_embedding(name, 64, 0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fallback_vectors_are_nearly_orthogonal() {
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let a = fallback_embedding(&format!("a{i}"), 64, 0);
            let b = fallback_embedding(&format!("b{i}"), 64, 0);
            let cos = crate::tensor::dot(&a, &b).abs();
            worst = worst.max(cos);
        }
        assert!(worst < 0.5, "max |cos| = {worst}");
    }

    #[test]
    fn partial_file_falls_back_for_missing_entities() {
        let g = abc_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let records = vec![
            ("a".to_string(), vec![1.0f32, 0.0, 0.0, 0.0]),
            ("b".to_string(), vec![0.0f32, 0.5, -0.25, 2.0]),
        ];
        write_embedding_file(&path, 4, &records).unwrap();
        let store = load_embeddings(&path, &g).unwrap();
        assert_eq!(store.dim(), 4);
        assert_eq!(store.file_backed(), 2);
        assert_eq!(store.get(1), &[0.0, 0.5, -0.25, 2.0]);
        assert_eq!(store.source(2), EmbeddingSource::Fallback);
        assert_eq!(
            store.get(2),
            fallback_embedding("c", 4, DEFAULT_FALLBACK_SEED).as_slice()
        );
    }

    #[test]
    fn export_then_load_is_bit_identical() {
        let g = abc_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let records: Vec<(String, Vec<f32>)> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (
                    n.to_string(),
                    vec![i as f32 * 0.1 + 1e-7, -3.25, f32::MIN_POSITIVE],
                )
            })
            .collect();
        write_embedding_file(&path, 3, &records).unwrap();
        let store = load_embeddings(&path, &g).unwrap();
        let path2 = dir.path().join("emb2.bin");
        store.export(&path2, &g).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        let (_, back) = read_embedding_file(&path2).unwrap();
        for ((_, a), (_, b)) in records.iter().zip(&back) {
            let a: Vec<u32> = a.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = b.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn file_size_matches_format_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let records = vec![
            ("ab".to_string(), vec![0.0f32; 5]),
            ("c".to_string(), vec![1.0f32; 5]),
        ];
        write_embedding_file(&path, 5, &records).unwrap();
        let expected = 8 + 4 + 4 + (4 + 2 + 20) + (4 + 1 + 20);
        assert_eq!(fs::metadata(&path).unwrap().len(), expected);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let g = abc_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        write_embedding_file(&path, 2, &[("zzz".to_string(), vec![1.0, 2.0])]).unwrap();
        match load_embeddings(&path, &g) {
            Err(Error::EmbeddingUnknownEntity(n)) => assert_eq!(n, "zzz"),
            other => panic!("unexpected {other:?}"),
        }

        write_embedding_file(&path, 2, &[("a".to_string(), vec![1.0, 2.0])]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(
            parse_embedding_bytes(&bytes),
            Err(Error::EmbeddingFormat(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            parse_embedding_bytes(&bytes),
            Err(Error::EmbeddingFormat(_))
        ));

        // Header claims dim 3 but the record only carries 2 floats.
        let mut bytes = fs::read(&path).unwrap();
        bytes[12..16].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            parse_embedding_bytes(&bytes),
            Err(Error::EmbeddingFormat(_))
        ));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let g = abc_graph();
        let store = EmbeddingStore::fallback(&g, 6, 1);
        let p = PriorBranchParams::zeros(6, 4, 2);
        assert_eq!(prior_logits(0, 1, &store, &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn concatenation_is_ordered() {
        let g = abc_graph();
        let store = EmbeddingStore::fallback(&g, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PriorBranchParams::init(6, 8, 2, &mut rng);
        let ab = prior_logits(0, 1, &store, &p).unwrap();
        let ba = prior_logits(1, 0, &store, &p).unwrap();
        assert_ne!(ab, ba);
    }

    #[test]
    fn matches_hand_computed_mlp() {
        // dim = 3, hidden = 2, |R| = 2
        let store =
            EmbeddingStore::from_vectors(3, vec![vec![1.0, -2.0, 0.5], vec![0.0, 1.0, 3.0]])
                .unwrap();
        let w1: Vec<f64> = (0..12).map(|i| (i as f64 - 5.0) * 0.1).collect();
        let b1 = vec![0.05, -0.3];
        let w2 = vec![1.0, -1.0, 0.5, 2.0];
        let b2 = vec![0.1, 0.2];
        let p = PriorBranchParams {
            mlp_w1: Tensor::from_vec(&[6, 2], w1.clone()),
            mlp_b1: Tensor::from_vec(&[2], b1.clone()),
            mlp_w2: Tensor::from_vec(&[2, 2], w2.clone()),
            mlp_b2: Tensor::from_vec(&[2], b2.clone()),
        };
        let x = [1.0, -2.0, 0.5, 0.0, 1.0, 3.0];
        let mut hidden = [0.0; 2];
        for j in 0..2 {
            let mut acc = b1[j];
            for i in 0..6 {
                acc += x[i] * w1[i * 2 + j];
            }
            hidden[j] = acc.max(0.0);
        }
        let mut expected = [0.0; 2];
        for k in 0..2 {
            expected[k] = b2[k] + hidden[0] * w2[k] + hidden[1] * w2[2 + k];
        }
        let got = prior_logits(0, 1, &store, &p).unwrap();
        for k in 0..2 {
            assert!((got[k] - expected[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = abc_graph();
        let store = EmbeddingStore::fallback(&g, 5, 1);
        let p = PriorBranchParams::zeros(6, 4, 2);
        assert!(matches!(
            prior_logits(0, 1, &store, &p),
            Err(Error::Shape(_))
        ));
    }
}
