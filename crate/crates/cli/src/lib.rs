//! The `kgc` command line, usable in-process through [`run_from`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use kgc_core::graph::DEFAULT_LIS_THRESHOLD;
use kgc_core::prior::load_embeddings_with_seed;
use kgc_core::synthetic::{self, SyntheticSpec};
use kgc_core::{
    checkpoint, evaluate, load_dataset, train_with, with_workers, BranchMask, EmbeddingStore,
    KnowledgeGraph, Model, TrainConfig,
};
use serde::Serialize;

pub mod config;

use config::{resolve, RunArgs, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or paths; exit code 2.
    Usage(String),
    /// Failure after the configuration was accepted; exit code 1.
    Runtime(String),
}

impl From<kgc_core::Error> for CliError {
    fn from(e: kgc_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "kgc",
    version,
    about = "Relation prediction for knowledge-graph completion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Entity, relation and triplet counts plus the train-degree distribution.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        /// Entities with train degree below this count as limited-information.
        #[arg(long, default_value_t = DEFAULT_LIS_THRESHOLD)]
        lis_threshold: usize,
        #[arg(long)]
        json: bool,
    },
    /// Train a model; writes checkpoint.bin, metrics.jsonl and config.json under --out.
    Train(RunArgs),
    /// Score a split with a trained checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// test or valid.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        json: bool,
    },
    /// Most likely relations between two named entities.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        head: String,
        #[arg(long)]
        tail: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Train and evaluate every nonempty subset of branches.
    Ablate(RunArgs),
    /// Write the seeded synthetic benchmark (dataset, embeddings, training config).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        entities: usize,
    },
}

/// Parses `args` (program name first) and runs the command, writing its
/// normal output to `out`. Help and version requests are reported as
/// `Ok` after printing; parse failures are usage errors.
pub fn run_from<I, T>(args: I, out: &mut (dyn Write + Send)) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli.command, out),
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            Ok(())
        }
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

pub fn run(command: Command, out: &mut (dyn Write + Send)) -> CliResult {
    match command {
        Command::Stats {
            dataset,
            lis_threshold,
            json,
        } => cmd_stats(&dataset, lis_threshold, json, out),
        Command::Train(args) => cmd_train(&resolve(&args)?, out),
        Command::Eval {
            run,
            checkpoint,
            split,
            json,
        } => cmd_eval(&resolve(&run)?, &checkpoint, &split, json, out),
        Command::Predict {
            run,
            checkpoint,
            head,
            tail,
            top_k,
        } => cmd_predict(&resolve(&run)?, &checkpoint, &head, &tail, top_k, out),
        Command::Ablate(args) => cmd_ablate(&resolve(&args)?, out),
        Command::Synth {
            out: dir,
            seed,
            entities,
        } => cmd_synth(&dir, seed, entities, out),
    }
}

fn write_err(e: std::io::Error) -> CliError {
    CliError::Runtime(format!("cannot write output: {e}"))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn workers<T: Send>(rc: &RunConfig, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    with_workers(rc.workers, f).map_err(CliError::from)
}

/// Prior embeddings matching `cfg`: the file when given, fallback vectors otherwise.
fn embedding_store(
    rc: &RunConfig,
    g: &KnowledgeGraph,
    cfg: &TrainConfig,
) -> CliResult<EmbeddingStore> {
    Ok(match &rc.embeddings {
        Some(path) => load_embeddings_with_seed(path, g, cfg.fallback_seed)?,
        None => EmbeddingStore::fallback(g, cfg.prior_dim, cfg.fallback_seed),
    })
}

#[derive(Serialize)]
struct StatsReport {
    entities: usize,
    relations: usize,
    train: usize,
    valid: usize,
    test: usize,
    degree: kgc_core::DegreeStats,
}

fn cmd_stats(
    dataset: &Path,
    lis_threshold: usize,
    json: bool,
    out: &mut (dyn Write + Send),
) -> CliResult {
    if !dataset.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory {} does not exist",
            dataset.display()
        )));
    }
    let g = load_dataset(dataset)?;
    let report = StatsReport {
        entities: g.num_entities(),
        relations: g.num_relations(),
        train: g.train().len(),
        valid: g.valid().len(),
        test: g.test().len(),
        degree: g.degree_stats(lis_threshold),
    };
    if json {
        writeln!(
            out,
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        )
        .map_err(write_err)?;
        return Ok(());
    }
    let d = &report.degree;
    writeln!(out, "entities         {}", report.entities).map_err(write_err)?;
    writeln!(out, "relations        {}", report.relations).map_err(write_err)?;
    writeln!(out, "train triplets   {}", report.train).map_err(write_err)?;
    writeln!(out, "valid triplets   {}", report.valid).map_err(write_err)?;
    writeln!(out, "test triplets    {}", report.test).map_err(write_err)?;
    writeln!(out, "mean degree      {:.4}", d.mean).map_err(write_err)?;
    writeln!(out, "degree variance  {:.4}", d.variance).map_err(write_err)?;
    writeln!(
        out,
        "LIS (degree < {}) {} ({:.2}%)",
        d.lis_threshold,
        d.lis_count,
        100.0 * d.lis_fraction
    )
    .map_err(write_err)?;
    Ok(())
}

fn cmd_train(rc: &RunConfig, stdout: &mut (dyn Write + Send)) -> CliResult {
    let out = rc.out_dir()?;
    let g = load_dataset(&rc.dataset)?;
    let mut cfg = rc.train.clone();
    let store = embedding_store(rc, &g, &cfg)?;
    cfg.prior_dim = store.dim();
    let resolved = RunConfig {
        train: cfg.clone(),
        ..rc.clone()
    };
    writeln!(stdout, "{}", resolved.to_json()).map_err(write_err)?;
    ensure_dir(out)?;
    write_file(&out.join("config.json"), &resolved.to_json())?;

    let mut log = String::new();
    let outcome = workers(rc, || {
        train_with(&g, &store, &cfg, |rec| {
            let _ = writeln!(log, "{}", rec.to_json_line());
            match &rec.valid {
                Some(v) => {
                    let _ = writeln!(
                        stdout,
                        "epoch {:>3}  loss {:.6}  valid MRR {:.4} H@1 {:.4} H@3 {:.4}",
                        rec.epoch, rec.train_loss, v.mrr, v.hits1, v.hits3
                    );
                }
                None => {
                    let _ = writeln!(stdout, "epoch {:>3}  loss {:.6}", rec.epoch, rec.train_loss);
                }
            }
        })
    })?;
    write_file(&out.join("metrics.jsonl"), &log)?;
    let model = outcome?.model;
    checkpoint::save(&model, &out.join("checkpoint.bin"))?;
    writeln!(stdout, "wrote {}", out.join("checkpoint.bin").display()).map_err(write_err)?;
    Ok(())
}

fn load_model(
    rc: &RunConfig,
    path: &Path,
    g: &KnowledgeGraph,
) -> CliResult<(Model, EmbeddingStore)> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let model = checkpoint::load(path)?;
    if model.params.num_relations() != g.num_relations() {
        return Err(CliError::Runtime(format!(
            "checkpoint scores {} relations but the dataset has {}",
            model.params.num_relations(),
            g.num_relations()
        )));
    }
    let store = embedding_store(rc, g, &model.config)?;
    let expected = model.params.prior.prior_dim();
    if store.dim() != expected {
        return Err(CliError::Runtime(format!(
            "embeddings have dimension {}, checkpoint expects {expected}",
            store.dim()
        )));
    }
    Ok((model, store))
}

fn cmd_eval(
    rc: &RunConfig,
    checkpoint_path: &Path,
    split: &str,
    json: bool,
    stdout: &mut (dyn Write + Send),
) -> CliResult {
    let g = load_dataset(&rc.dataset)?;
    let (model, store) = load_model(rc, checkpoint_path, &g)?;
    let triplets = match split {
        "test" => g.test(),
        "valid" => g.valid(),
        other => {
            return Err(CliError::Usage(format!(
                "unknown split {other:?} (test or valid)"
            )))
        }
    };
    let report = workers(rc, || evaluate(triplets, &g, &store, &model, rc.buckets))??;
    if json {
        writeln!(stdout, "{}", report.to_json()).map_err(write_err)?;
    } else {
        write!(stdout, "{}", report.to_table()).map_err(write_err)?;
    }
    if let Some(out) = &rc.out {
        ensure_dir(out)?;
        write_file(&out.join(format!("eval_{split}.json")), &report.to_json())?;
        write_file(&out.join(format!("eval_{split}.txt")), &report.to_table())?;
    }
    Ok(())
}

fn cmd_predict(
    rc: &RunConfig,
    checkpoint_path: &Path,
    head: &str,
    tail: &str,
    k: usize,
    out: &mut (dyn Write + Send),
) -> CliResult {
    let g = load_dataset(&rc.dataset)?;
    let (model, store) = load_model(rc, checkpoint_path, &g)?;
    let ranked = workers(rc, || model.predict_names(&g, &store, head, tail, k))??;
    for (i, (relation, p)) in ranked.iter().enumerate() {
        writeln!(out, "{}\t{relation}\t{p:.6}", i + 1).map_err(write_err)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    branches: String,
    mrr: f64,
    hits1: f64,
    hits3: f64,
    n: usize,
}

fn cmd_ablate(rc: &RunConfig, stdout: &mut (dyn Write + Send)) -> CliResult {
    let out = rc.out_dir()?;
    let g = load_dataset(&rc.dataset)?;
    let store = embedding_store(rc, &g, &rc.train)?;
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for mask in BranchMask::nonempty_subsets() {
        let cfg = TrainConfig {
            branches: mask,
            prior_dim: store.dim(),
            ..rc.train.clone()
        };
        let report = workers(rc, || -> kgc_core::Result<_> {
            let model = train_with(&g, &store, &cfg, |_| {})?.model;
            evaluate(g.test(), &g, &store, &model, rc.buckets)
        })??;
        writeln!(
            stdout,
            "{:<20} MRR {:.4}  H@1 {:.4}  H@3 {:.4}",
            mask.to_string(),
            report.mrr,
            report.hits1,
            report.hits3
        )
        .map_err(write_err)?;
        rows.push(AblationRow {
            branches: mask.to_string(),
            mrr: report.mrr,
            hits1: report.hits1,
            hits3: report.hits3,
            n: report.n,
        });
    }
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_file(&out.join("ablation.json"), &json)?;
    Ok(())
}

fn cmd_synth(dir: &Path, seed: u64, entities: usize, stdout: &mut (dyn Write + Send)) -> CliResult {
    let spec = SyntheticSpec {
        seed,
        entities,
        ..SyntheticSpec::default()
    };
    if entities <= spec.window {
        return Err(CliError::Usage(format!(
            "--entities must exceed {}",
            spec.window
        )));
    }
    let data = synthetic::generate(&spec)?;
    synthetic::write(&data, dir)?;
    let cfg = serde_json::to_string_pretty(&synthetic::benchmark_config(seed))
        .expect("config serializes");
    write_file(&dir.join("train_config.json"), &cfg)?;
    writeln!(
        stdout,
        "wrote {} train / {} valid / {} test triplets to {}",
        data.graph.train().len(),
        data.graph.valid().len(),
        data.graph.test().len(),
        dir.display()
    )
    .map_err(write_err)?;
    Ok(())
}
