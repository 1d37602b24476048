use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

const TINY: [&str; 14] = [
    "conv1=2", "conv2=3", "fc1=8", "n=6", "h=4", "d=4", "mi_hidden=4", "epochs=2", "n_bags=12", "n_val=4",
    "n_test=10", "synthetic_per_class=12", "patience=0", "lr=0.005",
];

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mil-lstm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(&text).unwrap_or(Value::String(text.trim().to_string()))
}

fn code(args: &[&str]) -> (i32, String) {
    let out = cli(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn prepare(dir: &Path) {
    ok(&["data", "prepare", "--synthetic", "20", "--seed", "7", "--out", p(dir)]);
}

fn train(out: &Path, extra: &[&str]) -> std::path::PathBuf {
    let mut args = vec!["train", "--out-dir", p(out), "--seed", "3"];
    for s in TINY.iter().chain(extra) {
        args.extend(["--set", s]);
    }
    ok(&args);
    let run = std::fs::read_dir(out).unwrap().next().unwrap().unwrap().path();
    run
}

#[test]
fn synthetic_prepare_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let a = ok(&["data", "prepare", "--synthetic", "100", "--seed", "7", "--out", p(&t.path().join("a"))]);
    let b = ok(&["data", "prepare", "--synthetic", "100", "--seed", "7", "--out", p(&t.path().join("b"))]);
    assert_eq!(a["hash"], b["hash"]);
    assert_eq!(a["train"], 1000);
    assert_eq!(a["test"], 160);
    let c = ok(&["data", "prepare", "--synthetic", "100", "--seed", "8", "--out", p(&t.path().join("c"))]);
    assert_ne!(a["hash"], c["hash"]);
}

#[test]
fn missing_or_corrupt_data_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let (c, _) = code(&["data", "prepare", "--mnist-dir", p(&t.path().join("nope")), "--out", p(&t.path().join("o"))]);
    assert_eq!(c, 2);
    let d = t.path().join("d");
    prepare(&d);
    let img = d.join("train-images-idx3-ubyte");
    let mut bytes = std::fs::read(&img).unwrap();
    bytes[100] ^= 1;
    std::fs::write(&img, bytes).unwrap();
    let (c, msg) = code(&["bags", "generate", "--data", p(&d), "--task", "single_digit", "--n", "4", "--out", p(&t.path().join("b.bin"))]);
    assert_eq!(c, 2);
    assert!(msg.contains("checksum"), "{msg}");
}

#[test]
fn prepare_round_trips_through_mnist_dir() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    prepare(&a);
    let b = ok(&["data", "prepare", "--mnist-dir", p(&a), "--out", p(&t.path().join("b"))]);
    let first: Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(first["hash"], b["hash"]);
    assert_eq!(b["source"], "mnist");
}

#[test]
fn bag_generation_summaries() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    prepare(&d);
    let gen = |task: &str, n: &str, seed: &str, out: &str| {
        ok(&["bags", "generate", "--data", p(&d), "--task", task, "--n", n, "--seed", seed, "--out", p(&t.path().join(out))])
    };
    let s = gen("multi_digit", "1000", "1", "multi.bin");
    assert_eq!((s["positives"].as_u64(), s["negatives"].as_u64()), (Some(500), Some(500)));
    assert_eq!(s["header"]["m"], 12.0);
    let again = gen("multi_digit", "1000", "1", "multi2.bin");
    assert_eq!(s["cache_sha256"], again["cache_sha256"]);
    assert!(t.path().join("multi.bin.summary.json").exists());
    assert!(s["tool_version"].is_string() && s["config_hash"].is_string());

    let c = gen("counting", "50", "2", "count.bin");
    let hist = c["target_histogram"].as_object().unwrap();
    assert_eq!(hist.values().map(|v| v.as_u64().unwrap()).sum::<u64>(), 50);
    let card = c["cardinality_histogram"].as_object().unwrap();
    assert_eq!(card.keys().collect::<Vec<_>>(), vec!["15"]);
}

fn write_idx(dir: &Path, prefix: &str, labels: &[u8]) {
    let mut images = Vec::new();
    for v in [2051u32, labels.len() as u32, 28, 28] {
        images.extend(v.to_be_bytes());
    }
    images.extend(labels.iter().flat_map(|&l| vec![l * 20; 784]));
    let mut lab = Vec::new();
    for v in [2049u32, labels.len() as u32] {
        lab.extend(v.to_be_bytes());
    }
    lab.extend(labels);
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

#[test]
fn unsatisfiable_spec_exits_3() {
    let t = tempfile::tempdir().unwrap();
    let raw = t.path().join("raw");
    std::fs::create_dir_all(&raw).unwrap();
    let no_nines: Vec<u8> = (0..40).map(|i| (i % 9) as u8).collect();
    write_idx(&raw, "train", &no_nines);
    write_idx(&raw, "t10k", &no_nines[..18]);
    let d = t.path().join("d");
    let m = ok(&["data", "prepare", "--mnist-dir", p(&raw), "--out", p(&d)]);
    assert_eq!((m["train"].as_u64(), m["test"].as_u64()), (Some(40), Some(18)));
    let (c, msg) = code(&["bags", "generate", "--data", p(&d), "--task", "single_digit", "--n", "4", "--out", p(&t.path().join("x.bin"))]);
    assert_eq!(c, 3, "{msg}");
    ok(&["bags", "generate", "--data", p(&d), "--task", "multi_digit", "--n", "4", "--out", p(&t.path().join("y.bin"))]);
}

#[test]
fn config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.json");
    std::fs::write(&cfg, r#"{"task": "counting", "epochz": 1}"#).unwrap();
    let (c, msg) = code(&["train", "--config", p(&cfg)]);
    assert_eq!(c, 2);
    assert!(msg.contains("epochz"), "{msg}");
    let (c, _) = code(&["train", "--set", "epochs=0"]);
    assert_eq!(c, 2);
}

#[test]
fn end_to_end_pipeline() {
    let start = Instant::now();
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    prepare(&d);
    let runs = t.path().join("runs");
    let cfg = t.path().join("run.json");
    std::fs::write(&cfg, format!(r#"{{"task": "single_digit", "data_dir": {:?}, "perm": 3, "repeats": 2}}"#, p(&d))).unwrap();
    let mut args = vec!["train", "--config", p(&cfg), "--out-dir", p(&runs), "--seed", "3"];
    for s in TINY {
        args.extend(["--set", s]);
    }
    let result = ok(&args);
    let run = std::fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    for f in ["config.json", "checkpoint.bin", "checkpoint-seed4.bin", "results.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(result["seeds"], serde_json::json!([3, 4]));
    assert_eq!(result["per_seed"].as_array().unwrap().len(), 2);
    assert!(result["mean"].is_number() && result["std"].is_number());
    assert_eq!(result["runs"][0]["permutation"]["n_perm"], 3);
    let hash = result["config_hash"].as_str().unwrap().to_string();
    let config: Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["config_hash"], hash.as_str());

    // Identical inputs reproduce identical metrics.
    let runs2 = t.path().join("runs2");
    let mut args2 = vec!["train", "--config", p(&cfg), "--out-dir", p(&runs2), "--seed", "3"];
    for s in TINY {
        args2.extend(["--set", s]);
    }
    let again = ok(&args2);
    assert_eq!(again["per_seed"], result["per_seed"]);

    let bags = t.path().join("test.bin");
    ok(&["bags", "generate", "--data", p(&d), "--task", "single_digit", "--n", "10", "--split", "test", "--seed", "5", "--out", p(&bags)]);
    let ckpt = run.join("checkpoint.bin");
    let e = ok(&["eval", "--ckpt", p(&ckpt), "--bags", p(&bags), "--perm", "4", "--out", p(&run.join("eval.json"))]);
    assert!(e["permutation"]["mean"].is_number() && e["permutation"]["std"].is_number());
    assert_eq!(e["config_hash"], hash.as_str());
    assert!(e["metrics"]["error_rate"].as_f64().unwrap() <= 100.0);
    assert_eq!(ok(&["eval", "--ckpt", p(&ckpt), "--bags", p(&bags), "--perm", "4"])["permutation"], e["permutation"]);

    let c = ok(&["cluster", "--ckpt", p(&ckpt), "--bags", p(&bags), "--k", "auto"]);
    assert_eq!(c["report"]["k"], 2);
    let features = std::fs::read_to_string(run.join("features.csv")).unwrap();
    assert!(features.starts_with("# tool_version="));
    assert!(features.contains(&hash));

    ok(&["export-states", "--ckpt", p(&ckpt), "--bags", p(&bags)]);
    let states = std::fs::read_to_string(run.join("states.csv")).unwrap();
    assert!(states.lines().nth(1).unwrap().starts_with("bag,step,label,h0"));

    let i = ok(&["instance-eval", "--ckpt", p(&ckpt), "--bags", p(&bags)]);
    let r = &i["report"];
    let mean = (r["tp_rate"].as_f64().unwrap() + r["tn_rate"].as_f64().unwrap()) / 2.0;
    assert!((r["mean_accuracy"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(start.elapsed().as_secs() < 600);
}

#[test]
fn incompatible_checkpoint_exits_4() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    prepare(&d);
    let run = train(&t.path().join("runs"), &["task=single_digit", "epochs=1"]);
    let bags = t.path().join("count.bin");
    ok(&["bags", "generate", "--data", p(&d), "--task", "counting", "--n", "4", "--out", p(&bags)]);
    let (c, msg) = code(&["eval", "--ckpt", p(&run.join("checkpoint.bin")), "--bags", p(&bags)]);
    assert_eq!(c, 4);
    assert!(msg.contains("counting") && msg.contains("single_digit"), "{msg}");
    let mut raw = std::fs::read(run.join("checkpoint.bin")).unwrap();
    raw[4] = 7;
    std::fs::write(run.join("bad.bin"), raw).unwrap();
    let (c, _) = code(&["eval", "--ckpt", p(&run.join("bad.bin")), "--bags", p(&bags)]);
    assert_eq!(c, 4);
}

#[test]
fn outlier_cluster_auto_uses_ten() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    prepare(&d);
    let run = train(&t.path().join("runs"), &["task=outlier", "epochs=1", "mi=true"]);
    let bags = t.path().join("o.bin");
    ok(&["bags", "generate", "--data", p(&d), "--task", "outlier", "--n", "8", "--split", "test", "--out", p(&bags)]);
    let c = ok(&["cluster", "--ckpt", p(&run.join("checkpoint.bin")), "--bags", p(&bags), "--k", "auto"]);
    assert_eq!(c["report"]["k"], 10);
    let (code4, _) = code(&["instance-eval", "--ckpt", p(&run.join("checkpoint.bin")), "--bags", p(&bags)]);
    assert_eq!(code4, 4);
}

#[test]
fn cardinality_study_via_eval() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    prepare(&d);
    let run = train(&t.path().join("runs"), &["task=multi_digit", "epochs=1", "pooling=\"mean\""]);
    let bags = t.path().join("m.bin");
    ok(&["bags", "generate", "--data", p(&d), "--task", "multi_digit", "--n", "6", "--out", p(&bags)]);
    let e = ok(&[
        "eval", "--ckpt", p(&run.join("checkpoint.bin")), "--bags", p(&bags), "--cardinality", "5,8", "--n-test", "6",
        "--finetune", "--finetune-epochs", "1", "--data", p(&d),
    ]);
    let rows = e["cardinality"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["finetuned_error"].is_number()));
}
