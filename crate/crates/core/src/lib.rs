//! Relation prediction for knowledge-graph completion.
//!
//! Given a head and tail entity, the model scores every relation by summing
//! three branches:
//!
//! * a prior MLP over fixed entity embeddings ([`prior`]),
//! * edge-centric message passing over the pair's neighborhood, read out
//!   with attention at both endpoints ([`context`]),
//! * attention over the relational paths connecting the pair ([`path`]).
//!
//! [`train`] fits the parameters with Adam; [`eval`] ranks relations and
//! reports MRR and Hits@k, optionally split by endpoint sparsity.

pub mod checkpoint;
pub mod context;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod path;
pub mod prior;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use eval::{evaluate, BucketMode, EvalReport, Metrics};
pub use graph::{load_dataset, DegreeStats, Direction, KnowledgeGraph, Query, Triplet};
pub use model::{BranchMask, Model, ModelParams, Prediction, TrainConfig};
pub use prior::{load_embeddings, EmbeddingStore};
pub use train::{train, train_with, EpochRecord, TrainOutcome};

/// Runs `f` on a dedicated rayon pool with `workers` threads (0 = rayon's
/// default). Results of training and evaluation do not depend on `workers`.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
