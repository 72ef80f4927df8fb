use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use taco_core::data::{load_dataset, load_library, load_queries};
use taco_core::eval::SyntheticScorer;
use taco_core::search::oracle_sequences;

const TINY: &str = include_str!("fixtures/tiny.toml");

/// The tiny fixture with `edits` applied as (dotted key, TOML value) pairs.
fn config(dir: &Path, edits: &[(&str, &str)]) -> PathBuf {
    let mut root: toml::Table = TINY.parse().unwrap();
    for (key, value) in edits {
        let parts: Vec<&str> = key.split('.').collect();
        let mut t = &mut root;
        for p in &parts[..parts.len() - 1] {
            t = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default())).as_table_mut().unwrap();
        }
        let v: toml::Table = format!("v = {value}").parse().unwrap();
        t.insert(parts[parts.len() - 1].to_string(), v["v"].clone());
    }
    let path = dir.join("run.toml");
    std::fs::write(&path, toml::to_string(&root).unwrap()).unwrap();
    path
}

fn taco(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taco"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cfg: &Path, out: &Path) -> String {
    let o = taco(args, cfg, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

/// Directory with a generated world and Oracle dataset.
fn prepared(edits: &[(&str, &str)]) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), edits);
    let out = dir.path().join("out");
    ok(&["gen-world"], &cfg, &out);
    ok(&["build-data"], &cfg, &out);
    (dir, cfg, out)
}

#[test]
fn gen_world_writes_the_configured_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    let out = dir.path().join("out");
    ok(&["gen-world"], &cfg, &out);
    assert_eq!(load_library(out.join("library.jsonl")).unwrap().len(), 60 - 6);
    assert_eq!(load_queries(out.join("train_queries.jsonl")).unwrap().len(), 6);
    assert_eq!(load_queries(out.join("eval_queries.jsonl")).unwrap().len(), 10);
}

#[test]
fn gen_world_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-world"], &cfg, &a);
    ok(&["gen-world"], &cfg, &b);
    ok(&["gen-world", "--seed", "4"], &cfg, &c);
    for f in ["library.jsonl", "train_queries.jsonl", "eval_queries.jsonl"] {
        assert_eq!(bytes(a.join(f)), bytes(b.join(f)), "{f}");
    }
    assert_ne!(bytes(a.join("library.jsonl")), bytes(c.join("library.jsonl")));
}

#[test]
fn query_selection_larger_than_the_library_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("query_clusters", "10"), ("per_cluster", "6")]);
    let o = taco(&["gen-world"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("leaves no library"));
}

#[test]
fn unknown_keys_and_bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("model.widht", "3")]);
    let o = taco(&["gen-world"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widht"));

    let cfg = config(dir.path(), &[]);
    assert_eq!(taco(&["train", "--no-such-flag"], &cfg, dir.path()).status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_taco")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn unreachable_external_scorer_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("scorer", "\"external\""), ("external.retries", "0")]);
    let out = dir.path().join("out");
    ok(&["gen-world"], &cfg, &out);
    let o = Command::new(env!("CARGO_BIN_EXE_taco"))
        .args(["build-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env("TACO_SCORER_ENDPOINT", "127.0.0.1:1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("transport error"));
}

#[test]
fn build_data_emits_two_n_per_query_and_reuses_its_cache() {
    let (_dir, cfg, out) = prepared(&[]);
    let ds = load_dataset(out.join("dataset.jsonl")).unwrap();
    assert_eq!(ds.shot, 2);
    assert_eq!(ds.len(), 2 * 2 * 6);
    let first = bytes(out.join("dataset.jsonl"));
    let again = ok(&["build-data"], &cfg, &out);
    assert_eq!(bytes(out.join("dataset.jsonl")), first);
    assert!(again.contains("scorer calls 0,"), "{again}");
}

#[test]
fn beam_one_build_matches_the_greedy_oracle() {
    let (_dir, _cfg, out) = prepared(&[("oracle.beam", "1"), ("oracle.keep", "1"), ("oracle.pool_per_shot", "40")]);
    let lib = load_library(out.join("library.jsonl")).unwrap();
    let queries = load_queries(out.join("train_queries.jsonl")).unwrap();
    let ds = load_dataset(out.join("dataset.jsonl")).unwrap();
    let greedy = oracle_sequences(&lib, &queries, &SyntheticScorer::default(), 2).unwrap();
    let got: Vec<_> = ds.sequences.iter().map(|s| s.icd_ids.clone()).collect();
    let want: Vec<_> = greedy.iter().map(|s| s.icd_ids.clone()).collect();
    assert_eq!(got, want);
}

#[test]
fn smoke_training_is_fast_and_lowers_the_loss() {
    // Five queries with N = 3 give 30 sequences.
    let (_dir, cfg, out) = prepared(&[
        ("query_clusters", "5"),
        ("per_cluster", "1"),
        ("oracle.shots", "3"),
        ("train.epochs", "10"),
        ("train.threads", "0"),
    ]);
    assert_eq!(load_dataset(out.join("dataset.jsonl")).unwrap().len(), 30);
    let t = Instant::now();
    ok(&["train"], &cfg, &out);
    assert!(t.elapsed().as_secs() < 60);
    let mut rd = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["epoch", "ce", "sparse", "l2", "total", "lr"]);
    let totals: Vec<f64> = rd.records().map(|r| r.unwrap()[4].parse().unwrap()).collect();
    assert_eq!(totals.len(), 10);
    assert!(totals[9] < totals[0], "{totals:?}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (dir, cfg, full) = prepared(&[]);
    let split = dir.path().join("split");
    std::fs::create_dir_all(&split).unwrap();
    for f in ["library.jsonl", "dataset.jsonl"] {
        std::fs::copy(full.join(f), split.join(f)).unwrap();
    }
    ok(&["train"], &cfg, &full);
    ok(&["train", "--stop-after", "2"], &cfg, &split);
    let last = split.join("last.json");
    let last = last.to_str().unwrap();
    ok(&["train", "--resume", last], &cfg, &split);
    for f in ["checkpoint.json", "last.json", "metrics.csv"] {
        assert_eq!(bytes(full.join(f)), bytes(split.join(f)), "{f}");
    }
}

#[test]
fn lambda_sweep_writes_one_csv_per_pair() {
    let (_dir, cfg, out) = prepared(&[("train.epochs", "1"), ("sweep.lambda1", "[0.0, 0.01, 0.1]"), ("sweep.lambda2", "[0.0, 1e-4]")]);
    ok(&["train", "--sweep"], &cfg, &out);
    let mut csvs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("metrics_l1_") && n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(csvs.len(), 6, "{csvs:?}");
    assert!(csvs.contains(&"metrics_l1_0.01_l2_0.0001.csv".to_string()));
}

#[test]
fn generate_honours_the_requested_shot_count() {
    let (_dir, cfg, out) = prepared(&[("train.epochs", "2")]);
    ok(&["train"], &cfg, &out);
    let lib = load_library(out.join("library.jsonl")).unwrap();
    for n in ["1", "2", "3"] {
        let a = out.join(format!("a{n}.jsonl"));
        let b = out.join(format!("b{n}.jsonl"));
        ok(&["generate", "-n", n, "--output", a.to_str().unwrap()], &cfg, &out);
        ok(&["generate", "-n", n, "--output", b.to_str().unwrap()], &cfg, &out);
        assert_eq!(bytes(&a), bytes(&b));
        let ds = load_dataset(&a).unwrap();
        assert_eq!(ds.shot, n.parse::<usize>().unwrap());
        assert_eq!(ds.len(), 10);
        for s in &ds.sequences {
            s.validate(&lib).unwrap();
        }
    }
}

#[test]
fn random_selection_is_perfect_on_a_noiseless_world() {
    let dir = tempfile::tempdir().unwrap();
    let noiseless = [
        ("world.clusters", "1"),
        ("world.tau_noise", "0.0"),
        ("world.img_noise", "0.0"),
        ("world.txt_noise", "0.0"),
        ("world.difficulty_std", "0.0"),
    ];
    let cfg = config(dir.path(), &noiseless);
    let out = dir.path().join("out");
    ok(&["gen-world"], &cfg, &out);
    ok(&["evaluate", "--methods", "rs"], &cfg, &out);
    let report: serde_json::Value = serde_json::from_slice(&bytes(out.join("report.json"))).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["method"], "rs");
    assert_eq!(rows[0]["accuracy"], 1.0);
}

#[test]
fn evaluate_reports_every_method_and_reproduces() {
    let (_dir, cfg, out) = prepared(&[("train.epochs", "2"), ("perturbation.enabled", "true")]);
    ok(&["train"], &cfg, &out);
    ok(&["evaluate"], &cfg, &out);
    let first = bytes(out.join("report.json"));
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["provenance"]["seed"], 3);
    assert_eq!(report["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    let names: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(names, ["oracle", "rs", "i2i", "iq2iq", "taco", "standard", "em", "hm", "wl", "wl+em"]);
    for r in &report["rows"].as_array().unwrap()[..5] {
        for k in ["accuracy", "delta", "sigma", "mean_loglik"] {
            assert!(r[k].is_f64(), "{k} in {r}");
        }
    }
    let mut rd = csv::Reader::from_path(out.join("report.csv")).unwrap();
    assert_eq!(&rd.headers().unwrap().iter().take(4).collect::<Vec<_>>(), &["method", "accuracy", "delta", "sigma"]);
    assert_eq!(rd.records().count(), 10);
    ok(&["evaluate"], &cfg, &out);
    assert_eq!(bytes(out.join("report.json")), first);
}

#[test]
fn ablate_emits_the_reference_and_eight_ablation_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("train.epochs", "1"), ("ablate.kinds", "[\"no_task_token\", \"no_tg_updates\", \"no_sparsity\", \"no_l2\", \"random_tg_init\", \"drop_image\", \"drop_query\", \"drop_inst\"]")]);
    let out = dir.path().join("out");
    ok(&["ablate"], &cfg, &out);
    let report: serde_json::Value = serde_json::from_slice(&bytes(out.join("ablation.json"))).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    assert_eq!(rows[0]["method"], "taco");
    assert_eq!(rows[0]["reference"], true);
    assert!(rows[1..].iter().all(|r| r["reference"] == false));
    assert!(rows[1]["method"].as_str().unwrap().starts_with("(a)"));
    assert!(rows[8]["method"].as_str().unwrap().starts_with("(h)"));
    let runs = csv::Reader::from_path(out.join("ablation_runs.csv")).unwrap().into_records().count();
    assert_eq!(runs, 9);
}
