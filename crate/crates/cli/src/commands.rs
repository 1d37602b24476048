use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use mil_lstm::datasets::{make_bags, write_bag_cache, Bag, BagCacheHeader, BagTarget, ScenarioKind, Split};
use mil_lstm::evaluation::{
    cardinality_generalization, cluster_split, error_rate, instance_eval, permutation_robustness, singleton_features,
    write_features_csv, write_states_csv, CardinalityConfig, ExperimentResult, MetricBundle, SeedSummary,
};
use mil_lstm::training::{load_checkpoint, save_checkpoint, train, CheckpointMeta, TrainConfig};
use mil_lstm::Model;

use crate::artifact::{csv_preamble, sha256_hex, Artifact, TOOL_VERSION};
use crate::config::RunConfig;
use crate::data::{derive_seed, load_bags, load_prepared, prepare, synthetic_pools};
use crate::fail::{CliResult, Failure};

pub fn data_prepare(mnist_dir: Option<&Path>, synthetic: Option<usize>, seed: u64, out: &Path) -> CliResult<String> {
    let manifest = match (mnist_dir, synthetic) {
        (Some(dir), None) => {
            let (train, test, _) = load_prepared(dir)?;
            prepare(out, &train, &test, "mnist", None)?
        }
        (None, Some(n)) => {
            let (train, test) = synthetic_pools(n, seed);
            prepare(out, &train, &test, "synthetic", Some(seed))?
        }
        _ => return Err(Failure::input("give exactly one of --mnist-dir or --synthetic")),
    };
    Ok(serde_json::to_string_pretty(&manifest)?)
}

#[derive(Serialize)]
struct BagSummary {
    header: BagCacheHeader,
    positives: usize,
    negatives: usize,
    cardinality_histogram: BTreeMap<usize, usize>,
    target_histogram: Option<BTreeMap<u32, usize>>,
    cache_sha256: String,
}

pub struct GenerateArgs<'a> {
    pub data: &'a Path,
    pub task: ScenarioKind,
    pub n: usize,
    pub m: Option<f64>,
    pub sigma: Option<f64>,
    pub k_outliers: usize,
    pub split: Split,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn bags_generate(a: &GenerateArgs<'_>) -> CliResult<String> {
    let (train, test, _) = load_prepared(a.data)?;
    let pool = if a.split == Split::Train { train } else { test };
    let cfg = RunConfig {
        task: a.task,
        m: a.m,
        sigma: a.sigma,
        k_outliers: a.k_outliers,
        ..RunConfig::default()
    };
    let spec = cfg.scenario(a.n, a.seed);
    let bags = make_bags(&spec, &pool)?;
    let header = BagCacheHeader {
        scenario: a.task,
        seed: a.seed,
        n_bags: bags.len(),
        m: spec.mean_cardinality,
        sigma: spec.std_cardinality,
        outlier_count: spec.outlier_count,
        split: a.split,
        rows: pool.rows(),
        cols: pool.cols(),
    };
    let mut bytes = Vec::new();
    write_bag_cache(&mut bytes, &header, &bags)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(a.out, &bytes)?;
    let mut cardinality_histogram = BTreeMap::new();
    let mut targets = BTreeMap::new();
    for b in &bags {
        *cardinality_histogram.entry(b.len()).or_default() += 1;
        if let Some(BagTarget::Count(c)) = b.target() {
            *targets.entry(c).or_default() += 1;
        }
    }
    let positives = bags.iter().filter(|b| b.target().is_some_and(|t| t.is_positive())).count();
    let summary = BagSummary {
        positives,
        negatives: if a.task.is_regression() { 0 } else { bags.len() - positives },
        cardinality_histogram,
        target_histogram: a.task.is_regression().then_some(targets),
        cache_sha256: sha256_hex(&bytes),
        header,
    };
    let hash = sha256_hex(serde_json::to_string(&summary.header)?.as_bytes());
    let mut path = a.out.as_os_str().to_owned();
    path.push(".summary.json");
    Artifact::new("bags generate", &hash, a.seed, summary).emit(Some(Path::new(&path)))
}

fn expect_task(bags_task: ScenarioKind, model_task: ScenarioKind, what: &str) -> CliResult<()> {
    if bags_task != model_task {
        return Err(Failure::compatibility(format!(
            "{what} task {bags_task} does not match checkpoint task {model_task}"
        )));
    }
    Ok(())
}

struct RunBags {
    train: Vec<Bag>,
    val: Vec<Bag>,
    test: Vec<Bag>,
}

fn run_bags(cfg: &RunConfig) -> CliResult<RunBags> {
    let cached = |p: &Option<PathBuf>| -> CliResult<Option<Vec<Bag>>> {
        match p {
            None => Ok(None),
            Some(path) => {
                let (header, bags) = load_bags(path)?;
                expect_task(header.scenario, cfg.task, &path.display().to_string())?;
                Ok(Some(bags))
            }
        }
    };
    let (train_c, val_c, test_c) = (cached(&cfg.train_bags)?, cached(&cfg.val_bags)?, cached(&cfg.test_bags)?);
    if let (Some(train), Some(val), Some(test)) = (&train_c, &val_c, &test_c) {
        return Ok(RunBags {
            train: train.clone(),
            val: val.clone(),
            test: test.clone(),
        });
    }
    let (train_pool, test_pool) = match &cfg.data_dir {
        Some(dir) => {
            let (a, b, _) = load_prepared(dir)?;
            (a, b)
        }
        None => synthetic_pools(cfg.synthetic_per_class, cfg.seed),
    };
    let gen = |n, label, pool| make_bags(&cfg.scenario(n, derive_seed(cfg.seed, label)), pool);
    Ok(RunBags {
        train: match train_c {
            Some(b) => b,
            None => gen(cfg.n_bags, "bags-train", &train_pool)?,
        },
        val: match val_c {
            Some(b) => b,
            None => gen(cfg.n_val, "bags-val", &train_pool)?,
        },
        test: match test_c {
            Some(b) => b,
            None => gen(cfg.n_test, "bags-test", &test_pool)?,
        },
    })
}

pub fn train_run(cfg: &RunConfig) -> CliResult<(PathBuf, String)> {
    let hash = cfg.hash();
    let dir = cfg.out_dir.join(cfg.run_id());
    fs::create_dir_all(&dir)?;
    let config_doc = json!({"tool_version": TOOL_VERSION, "config_hash": hash, "seed": cfg.seed, "config": cfg});
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config_doc)? + "\n")?;

    let bags = run_bags(cfg)?;
    let seeds = cfg.seeds();
    let mut per_seed: Vec<MetricBundle> = Vec::new();
    let mut runs = Vec::new();
    for &seed in &seeds {
        let mut model = Model::new(cfg.model(seed)?, seed)?;
        let tc = cfg.train(seed);
        let outcome = train(&mut model, &bags.train, &bags.val, &tc)?;
        let metrics = error_rate(&model, &bags.test)?;
        let perm = if cfg.perm > 0 {
            Some(permutation_robustness(&model, &bags.test, cfg.perm, derive_seed(seed, "eval"))?)
        } else {
            None
        };
        let mut meta = CheckpointMeta::for_model(&model);
        meta.train = Some(tc);
        meta.rng = Some(outcome.rng.clone());
        meta.epoch = outcome.best_epoch;
        meta.info = BTreeMap::from([
            ("tool_version".to_string(), TOOL_VERSION.to_string()),
            ("config_hash".to_string(), hash.clone()),
            ("seed".to_string(), seed.to_string()),
            ("n_bags".to_string(), bags.train.len().to_string()),
        ]);
        let name = if seed == seeds[0] {
            "checkpoint.bin".to_string()
        } else {
            format!("checkpoint-seed{seed}.bin")
        };
        save_checkpoint(&dir.join(name), &model, &meta)?;
        runs.push(json!({
            "seed": seed,
            "best_epoch": outcome.best_epoch,
            "stopped_early": outcome.stopped_early,
            "history": outcome.history,
            "permutation": perm,
        }));
        per_seed.push(metrics);
    }
    let mut result = ExperimentResult::new(cfg.task, hash.clone(), SeedSummary::new(seeds, per_seed));
    result.extra.insert("runs".into(), Value::Array(runs));
    result.extra.insert("pooling".into(), json!(cfg.pooling));
    let json = Artifact::new("train", &hash, cfg.seed, result).emit(Some(&dir.join("results.json")))?;
    Ok((dir, json))
}

fn open(ckpt: &Path, bags: &Path) -> CliResult<(Model, CheckpointMeta, Vec<Bag>, Split)> {
    let (model, meta) = load_checkpoint::<f64>(ckpt)?;
    let (header, bags) = load_bags(bags)?;
    expect_task(header.scenario, model.task(), "bag cache")?;
    Ok((model, meta, bags, header.split))
}

fn config_hash(meta: &CheckpointMeta) -> String {
    meta.info.get("config_hash").cloned().unwrap_or_else(|| "unknown".into())
}

fn beside(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(name)
}

pub struct EvalArgs<'a> {
    pub ckpt: &'a Path,
    pub bags: &'a Path,
    pub perm: Option<usize>,
    pub cardinality: Option<Vec<usize>>,
    pub finetune: bool,
    pub finetune_epochs: Option<usize>,
    pub n_test: usize,
    pub data: Option<&'a Path>,
    pub synthetic_per_class: usize,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

pub fn eval(a: &EvalArgs<'_>) -> CliResult<String> {
    let (model, meta, bags, split) = open(a.ckpt, a.bags)?;
    let metrics = error_rate(&model, &bags)?;
    let permutation = match a.perm {
        Some(n) => Some(permutation_robustness(&model, &bags, n, a.seed)?),
        None => None,
    };
    let cardinality = match &a.cardinality {
        None => None,
        Some(sizes) => {
            let (train_pool, test_pool) = match a.data {
                Some(d) => {
                    let (x, y, _) = load_prepared(d)?;
                    (x, y)
                }
                None => synthetic_pools(a.synthetic_per_class, a.seed),
            };
            let finetune = a.finetune.then(|| {
                let mut tc = meta.train.clone().unwrap_or_else(TrainConfig::default);
                if let Some(e) = a.finetune_epochs {
                    tc.epochs = e;
                }
                tc
            });
            let cfg = CardinalityConfig {
                sizes: sizes.clone(),
                n_test: a.n_test,
                finetune,
                train_bags: meta.info.get("n_bags").and_then(|n| n.parse().ok()).unwrap_or(1000),
                seed: a.seed,
            };
            Some(cardinality_generalization(&model, &train_pool, &test_pool, &cfg)?)
        }
    };
    let body = json!({
        "task": model.task(),
        "split": split,
        "n_bags": bags.len(),
        "metrics": metrics,
        "permutation": permutation,
        "cardinality": cardinality,
    });
    Artifact::new("eval", &config_hash(&meta), a.seed, body).emit(a.out)
}

pub fn cluster(
    ckpt: &Path,
    bags: &Path,
    k: Option<usize>,
    seed: u64,
    features_out: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<String> {
    let (model, meta, bags, split) = open(ckpt, bags)?;
    let hash = config_hash(&meta);
    let report = cluster_split(&model, &bags, k, split, seed)?;
    let features_path = features_out.map_or_else(|| beside(ckpt, "features.csv"), Path::to_path_buf);
    let feats = singleton_features(&model, &bags)?;
    let mut w = BufWriter::new(fs::File::create(&features_path)?);
    std::io::Write::write_all(&mut w, csv_preamble(&hash, seed).as_bytes())?;
    write_features_csv(&mut w, &feats)?;
    let body = json!({"task": model.task(), "report": report, "features": features_path});
    Artifact::new("cluster", &hash, seed, body).emit(out)
}

pub fn export_states(ckpt: &Path, bags: &Path, out: Option<&Path>) -> CliResult<String> {
    let (model, meta, bags, _) = open(ckpt, bags)?;
    let hash = config_hash(&meta);
    let seed = meta.info.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let path = out.map_or_else(|| beside(ckpt, "states.csv"), Path::to_path_buf);
    let mut w = BufWriter::new(fs::File::create(&path)?);
    std::io::Write::write_all(&mut w, csv_preamble(&hash, seed).as_bytes())?;
    write_states_csv(&mut w, &model, &bags)?;
    Ok(path.display().to_string())
}

pub fn instance_eval_cmd(ckpt: &Path, bags: &Path, out: Option<&Path>) -> CliResult<String> {
    let (model, meta, bags, split) = open(ckpt, bags)?;
    let report = instance_eval(&model, &bags, Some(split))?;
    let seed = meta.info.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let body = json!({"task": model.task(), "report": report});
    Artifact::new("instance-eval", &config_hash(&meta), seed, body).emit(out)
}
