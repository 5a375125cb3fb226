use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kgc_core::graph::write_dataset;
use kgc_core::{checkpoint, load_dataset, EmbeddingStore, KnowledgeGraph, Triplet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn kgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_dataset(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(
        dir.join("train.txt"),
        "a\tlikes\tb\nb\tknows\tc\na\tknows\tc\n",
    )
    .unwrap();
    fs::write(dir.join("valid.txt"), "c\tlikes\ta\n").unwrap();
    fs::write(dir.join("test.txt"), "b\tlikes\tc\n").unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let o = kgc(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["stats", "train", "eval", "predict", "ablate"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn stats_on_toy_dataset() {
    let tmp = TempDir::new().unwrap();
    toy_dataset(tmp.path());
    let o = kgc(&["stats", "--dataset", p(tmp.path()), "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["entities"], 3);
    assert_eq!(v["relations"], 2);
    assert_eq!(
        (v["train"].as_u64(), v["valid"].as_u64(), v["test"].as_u64()),
        (Some(3), Some(1), Some(1))
    );
    // Degrees a=2, b=2, c=2.
    assert_eq!(v["degree"]["mean"], 2.0);
    assert_eq!(v["degree"]["lis_fraction"], 1.0);
}

#[test]
fn stats_variance_matches_brute_force_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let n = rng.gen_range(3..30);
        let train: Vec<Triplet> = (0..rng.gen_range(1..60))
            .map(|_| {
                Triplet::new(
                    rng.gen_range(0..n),
                    rng.gen_range(0..3),
                    rng.gen_range(0..n),
                )
            })
            .collect();
        let g = KnowledgeGraph::from_ids(n, 3, train.clone(), vec![], vec![]).unwrap();
        let tmp = TempDir::new().unwrap();
        write_dataset(tmp.path(), &g).unwrap();
        let o = kgc(&["stats", "--dataset", p(tmp.path()), "--json"]);
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();

        // Only entities that appear in some split are in the vocabulary.
        let mut seen: Vec<usize> = train.iter().flat_map(|t| [t.head, t.tail]).collect();
        seen.sort();
        seen.dedup();
        let degrees: Vec<f64> = seen
            .iter()
            .map(|&e| {
                train
                    .iter()
                    .map(|t| usize::from(t.head == e) + usize::from(t.tail == e))
                    .sum::<usize>() as f64
            })
            .collect();
        let mean = degrees.iter().sum::<f64>() / degrees.len() as f64;
        let var =
            degrees.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / degrees.len() as f64;
        assert_eq!(v["entities"].as_u64().unwrap() as usize, seen.len());
        assert!((v["degree"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!((v["degree"]["variance"].as_f64().unwrap() - var).abs() < 1e-9);
    }
}

#[test]
fn usage_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    toy_dataset(tmp.path());
    let out = tmp.path().join("out");
    let missing = kgc(&[
        "train",
        "--dataset",
        "/definitely/not/here",
        "--out",
        p(&out),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("does not exist"));

    let bad_mask = kgc(&[
        "train",
        "--dataset",
        p(tmp.path()),
        "--out",
        p(&out),
        "--branches",
        "prior,nope",
    ]);
    assert_eq!(bad_mask.status.code(), Some(2));

    let zero_epochs = kgc(&[
        "train",
        "--dataset",
        p(tmp.path()),
        "--out",
        p(&out),
        "--epochs",
        "0",
    ]);
    assert_eq!(zero_epochs.status.code(), Some(2));

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"hiden": 8}"#).unwrap();
    let typo = kgc(&[
        "train",
        "--dataset",
        p(tmp.path()),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(typo.status.code(), Some(2));
    assert!(stderr(&typo).contains("hiden"));

    assert_eq!(kgc(&["train", "--nonsense"]).status.code(), Some(2));
    assert!(!out.exists(), "nothing is written before validation");
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    toy_dataset(tmp.path());
    fs::write(tmp.path().join("valid.txt"), "only\ttwo\n").unwrap();
    let o = kgc(&["stats", "--dataset", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("valid.txt:1"), "{}", stderr(&o));
}

fn train_toy(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--dataset",
        p(dir),
        "--out",
        p(out),
        "--epochs",
        "3",
        "--hidden",
        "4",
        "--batch",
        "2",
        "--lr",
        "0.01",
    ];
    args.extend_from_slice(extra);
    kgc(&args)
}

#[test]
fn train_writes_only_under_out_and_echoes_config() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    toy_dataset(&data);
    let out = tmp.path().join("run");
    let o = train_toy(&data, &out, &["--branches", "prior", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"branches\": \"prior\""));
    let mut files: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files, ["checkpoint.bin", "config.json", "metrics.jsonl"]);
    let mut data_files: Vec<_> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    data_files.sort();
    assert_eq!(data_files.len(), 3);

    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    assert!(first["valid"]["mrr"].is_number());

    let model = checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert!(!model.config.branches.context && model.config.branches.prior);
    assert_eq!(model.config.seed, 4);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    toy_dataset(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"hidden": 6, "epochs": 2, "seed": 9, "buckets": "degree"}"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    let o = kgc(&[
        "train",
        "--dataset",
        p(tmp.path()),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--seed",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["hidden"], 6);
    assert_eq!(resolved["train"]["epochs"], 2);
    assert_eq!(resolved["train"]["seed"], 3);
    assert_eq!(resolved["buckets"], "degree");
}

#[test]
fn training_twice_gives_identical_logs() {
    let tmp = TempDir::new().unwrap();
    toy_dataset(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(train_toy(tmp.path(), &a, &["--seed", "1"]).status.success());
    assert!(
        train_toy(tmp.path(), &b, &["--seed", "1", "--workers", "3"])
            .status
            .success()
    );
    assert_eq!(
        fs::read(a.join("metrics.jsonl")).unwrap(),
        fs::read(b.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(b.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn predict_matches_library_and_clamps_k() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    toy_dataset(&data);
    let out = tmp.path().join("run");
    assert!(train_toy(&data, &out, &[]).status.success());
    let ckpt = out.join("checkpoint.bin");
    let o = kgc(&[
        "predict",
        "--dataset",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--head",
        "a",
        "--tail",
        "c",
        "--top-k",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2, "k is clamped to the relation count");

    let g = load_dataset(&data).unwrap();
    let model = checkpoint::load(&ckpt).unwrap();
    let store = EmbeddingStore::fallback(&g, model.config.prior_dim, model.config.fallback_seed);
    let want = model.predict_names(&g, &store, "a", "c", 10).unwrap();
    for (line, (rel, prob)) in lines.iter().zip(&want) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[1], rel);
        assert_eq!(cols[2], format!("{prob:.6}"));
    }

    let bad = kgc(&[
        "predict",
        "--dataset",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--head",
        "zed",
        "--tail",
        "ghost",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("zed") && stderr(&bad).contains("ghost"));
}

#[test]
fn eval_reports_buckets_and_writes_under_out() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    toy_dataset(&data);
    let run = tmp.path().join("run");
    assert!(train_toy(&data, &run, &[]).status.success());
    let report_dir = tmp.path().join("report");
    let o = kgc(&[
        "eval",
        "--dataset",
        p(&data),
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--buckets",
        "lis_ris",
        "--json",
        "--out",
        p(&report_dir),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["n"], 1);
    assert_eq!(v["buckets"][0]["label"], "LIS");
    assert!(report_dir.join("eval_test.json").is_file());
    assert!(report_dir.join("eval_test.txt").is_file());

    let bad = kgc(&[
        "eval",
        "--dataset",
        p(&data),
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--buckets",
        "color",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ablate_emits_seven_rows() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    toy_dataset(&data);
    let out = tmp.path().join("abl");
    let o = kgc(&[
        "ablate",
        "--dataset",
        p(&data),
        "--out",
        p(&out),
        "--epochs",
        "2",
        "--hidden",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 7);
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = rows
        .iter()
        .map(|r| r["branches"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "prior",
            "context",
            "path",
            "prior,context",
            "prior,path",
            "context,path",
            "prior,context,path"
        ]
    );
}
