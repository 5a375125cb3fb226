//! Run configuration: dataset preset, then an optional JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use kgc_core::{BranchMask, BucketMode, TrainConfig};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Keys of the config file that are not training hyperparameters.
const RUN_KEYS: [&str; 5] = ["dataset", "embeddings", "out", "buckets", "workers"];

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Dataset directory with train.txt, valid.txt and test.txt.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Entity embedding file; entities it does not cover get fallback vectors.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory; every file a command writes goes here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file. Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub k_iters: Option<usize>,
    #[arg(long)]
    pub context_layers: Option<usize>,
    #[arg(long)]
    pub max_path_len: Option<usize>,
    /// Comma list drawn from prior, context, path (or "all").
    #[arg(long)]
    pub branches: Option<String>,
    /// none, lis_ris, degree or path_count.
    #[arg(long)]
    pub buckets: Option<String>,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub buckets: BucketMode,
    pub workers: usize,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&v).expect("config serializes")
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required for this command".into()))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(usage(format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(usage(format!("{}: {e}", path.display()))),
    }
}

fn take_path(file: &mut Map<String, Value>, key: &str) -> Result<Option<PathBuf>, CliError> {
    match file.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
        Some(other) => Err(usage(format!(
            "config key {key:?} must be a string, got {other}"
        ))),
    }
}

/// Resolves and validates everything before any compute happens.
pub fn resolve(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => Map::new(),
    };
    let dataset = match (args.dataset.clone(), take_path(&mut file, "dataset")?) {
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => return Err(usage("--dataset is required")),
    };
    if !dataset.is_dir() {
        return Err(usage(format!(
            "dataset directory {} does not exist",
            dataset.display()
        )));
    }
    let embeddings = args
        .embeddings
        .clone()
        .or(take_path(&mut file, "embeddings")?);
    if let Some(e) = &embeddings {
        if !e.is_file() {
            return Err(usage(format!(
                "embedding file {} does not exist",
                e.display()
            )));
        }
    }
    let out = args.out.clone().or(take_path(&mut file, "out")?);
    let buckets_in_file = match file.remove("buckets") {
        Some(Value::String(s)) => Some(s),
        None | Some(Value::Null) => None,
        Some(other) => {
            return Err(usage(format!(
                "config key \"buckets\" must be a string, got {other}"
            )))
        }
    };
    let buckets = match args.buckets.clone().or(buckets_in_file) {
        Some(s) => s
            .parse()
            .map_err(|e: kgc_core::Error| usage(e.to_string()))?,
        None => BucketMode::None,
    };
    let workers_in_file = match file.remove("workers") {
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| usage("config key \"workers\" must be a non-negative integer"))?
                as usize,
        ),
        None => None,
    };
    let workers = args.workers.or(workers_in_file).unwrap_or(0);

    let preset = dataset
        .file_name()
        .map(|n| TrainConfig::for_dataset(&n.to_string_lossy()))
        .unwrap_or_default();
    let mut merged = match serde_json::to_value(&preset).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("TrainConfig serializes to an object"),
    };
    for (k, v) in file {
        if !merged.contains_key(&k) || RUN_KEYS.contains(&k.as_str()) {
            return Err(usage(format!("unknown config key {k:?}")));
        }
        merged.insert(k, v);
    }
    let mut train: TrainConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))?;

    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.lr {
        train.learning_rate = v;
    }
    if let Some(v) = args.batch {
        train.batch_size = v;
    }
    if let Some(v) = args.hidden {
        train.hidden = v;
    }
    if let Some(v) = args.k_iters {
        train.k_iters = v;
    }
    if let Some(v) = args.context_layers {
        train.context_layers = v;
    }
    if let Some(v) = args.max_path_len {
        train.max_path_len = v;
    }
    if let Some(b) = &args.branches {
        train.branches = b.parse::<BranchMask>().map_err(|e| usage(e.to_string()))?;
    }
    train.validate().map_err(|e| usage(e.to_string()))?;

    Ok(RunConfig {
        dataset,
        embeddings,
        out,
        buckets,
        workers,
        train,
    })
}
