//! Ranking metrics and sparsity breakdowns.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bucket, KnowledgeGraph, RelationId, Triplet, DEFAULT_LIS_THRESHOLD};
use crate::model::{forward, Model, ModelParams, Prediction, PreparedQuery, TrainConfig};
use crate::prior::EmbeddingStore;

/// Degree and path-count buckets at or above this share one label.
const BUCKET_CAP: usize = 10;

/// 1-based position of `r` in the prediction's ranking.
pub fn rank_of_truth(pred: &Prediction, r: RelationId) -> Result<usize> {
    pred.ranked
        .iter()
        .position(|&x| x == r)
        .map(|i| i + 1)
        .ok_or(Error::UnknownRelationId(r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub n: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Metrics> {
        if ranks.is_empty() {
            return Err(Error::EmptySplit);
        }
        let n = ranks.len() as f64;
        let rr: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Metrics {
            mrr: rr / n,
            hits1: hits(1),
            hits3: hits(3),
            n: ranks.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketMode {
    #[default]
    None,
    /// Limited vs rich information, by the query's lower endpoint degree.
    LisRis,
    /// Lower endpoint degree.
    Degree,
    /// Number of enumerated head-to-tail paths.
    PathCount,
}

impl FromStr for BucketMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BucketMode::None),
            "lis_ris" => Ok(BucketMode::LisRis),
            "degree" => Ok(BucketMode::Degree),
            "path_count" => Ok(BucketMode::PathCount),
            other => Err(Error::Config(format!(
                "unknown bucket mode {other:?} (none, lis_ris, degree, path_count)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub label: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub n: usize,
    pub bucket_mode: BucketMode,
    pub buckets: Vec<BucketMetrics>,
}

impl EvalReport {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            mrr: self.mrr,
            hits1: self.hits1,
            hits3: self.hits3,
            n: self.n,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&serde_json::to_value(self).expect("report serializes"))
            .expect("report serializes")
    }

    /// Aligned plain-text table: one overall row, then one row per bucket.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            "bucket", "n", "MRR", "H@1", "H@3"
        );
        let mut row = |label: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8.4} {:>8.4} {:>8.4}",
                label, m.n, m.mrr, m.hits1, m.hits3
            );
        };
        row("all", &self.metrics());
        for b in &self.buckets {
            row(&b.label, &b.metrics);
        }
        out
    }
}

fn capped(v: usize) -> (usize, String) {
    if v >= BUCKET_CAP {
        (BUCKET_CAP, format!("{BUCKET_CAP}+"))
    } else {
        (v, v.to_string())
    }
}

/// Ranks with an optional bucket key per query.
pub fn report_from_ranks(
    ranks: &[usize],
    keys: &[(usize, String)],
    mode: BucketMode,
) -> Result<EvalReport> {
    let overall = Metrics::from_ranks(ranks)?;
    let mut buckets = Vec::new();
    if mode != BucketMode::None {
        let mut labels: Vec<&(usize, String)> = keys.iter().collect();
        labels.sort();
        labels.dedup();
        for key in labels {
            let sub: Vec<usize> = ranks
                .iter()
                .zip(keys)
                .filter(|(_, k)| *k == key)
                .map(|(r, _)| *r)
                .collect();
            buckets.push(BucketMetrics {
                label: key.1.clone(),
                metrics: Metrics::from_ranks(&sub)?,
            });
        }
    }
    Ok(EvalReport {
        mrr: overall.mrr,
        hits1: overall.hits1,
        hits3: overall.hits3,
        n: overall.n,
        bucket_mode: mode,
        buckets,
    })
}

fn bucket_key(
    g: &KnowledgeGraph,
    pq: &PreparedQuery,
    mode: BucketMode,
    lis_threshold: usize,
) -> (usize, String) {
    let t = pq.query.triplet;
    let degrees = g.incident(t.head).len().min(g.incident(t.tail).len());
    match mode {
        BucketMode::None => (0, String::new()),
        BucketMode::LisRis => {
            let b = Bucket::for_degree(degrees, lis_threshold);
            (b as usize, b.label().to_string())
        }
        BucketMode::Degree => capped(degrees),
        BucketMode::PathCount => capped(pq.num_paths()),
    }
}

/// Evaluates already-prepared queries; evaluation fans out over the current
/// rayon pool and the result does not depend on its size.
pub fn evaluate_prepared(
    g: &KnowledgeGraph,
    prepared: &[PreparedQuery],
    store: &EmbeddingStore,
    params: &ModelParams,
    cfg: &TrainConfig,
    mode: BucketMode,
) -> Result<EvalReport> {
    if prepared.is_empty() {
        return Err(Error::EmptySplit);
    }
    let ranks: Vec<usize> = prepared
        .par_iter()
        .map(|pq| {
            let pred = forward(pq, store, params, cfg);
            rank_of_truth(&pred, pq.query.triplet.relation)
        })
        .collect::<Result<_>>()?;
    let keys: Vec<(usize, String)> = prepared
        .iter()
        .map(|pq| bucket_key(g, pq, mode, DEFAULT_LIS_THRESHOLD))
        .collect();
    report_from_ranks(&ranks, &keys, mode)
}

/// Scores every triplet of `split` and reports MRR, H@1, H@3 and buckets.
pub fn evaluate(
    split: &[Triplet],
    g: &KnowledgeGraph,
    store: &EmbeddingStore,
    model: &Model,
    mode: BucketMode,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let prepared: Vec<PreparedQuery> = split.par_iter().map(|t| model.prepare(g, *t)).collect();
    evaluate_prepared(g, &prepared, store, &model.params, &model.config, mode)
}
