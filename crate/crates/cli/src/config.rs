use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use mil_lstm::datasets::{ScenarioKind, ScenarioSpec};
use mil_lstm::encoders::IduConfig;
use mil_lstm::mi_loss::MiWeights;
use mil_lstm::pooling::PoolingKind;
use mil_lstm::training::{AdamConfig, ModelConfig, TrainConfig};

use crate::artifact::sha256_hex;
use crate::fail::{CliResult, Failure};

/// Flat run description read by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: ScenarioKind,
    /// Mean cardinality; the task's reference value when absent.
    pub m: Option<f64>,
    pub sigma: Option<f64>,
    pub n_bags: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub k_outliers: usize,

    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub fc1: usize,
    pub n: usize,
    pub h: usize,
    pub d: usize,
    pub pooling: PoolingKind,

    pub mi: bool,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mi_hidden: usize,
    pub mi_batch: usize,

    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_bags: usize,
    pub shuffle_instances: bool,

    pub seed: u64,
    /// Independent training runs with seeds `seed, seed + 1, ...`.
    pub repeats: usize,
    /// Permutations evaluated on the test bags after training; 0 skips.
    pub perm: usize,

    /// Prepared data directory; synthetic glyphs are used when absent.
    pub data_dir: Option<PathBuf>,
    pub synthetic_per_class: usize,
    pub train_bags: Option<PathBuf>,
    pub val_bags: Option<PathBuf>,
    pub test_bags: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let idu = IduConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let mi = MiWeights::default();
        Self {
            task: ScenarioKind::SingleDigit,
            m: None,
            sigma: None,
            n_bags: 1000,
            n_val: 200,
            n_test: 1000,
            k_outliers: 1,
            conv1: idu.conv1,
            conv2: idu.conv2,
            kernel: idu.kernel,
            fc1: idu.fc1,
            n: idu.n,
            h: model.hidden,
            d: model.attention_dim,
            pooling: model.pooling,
            mi: false,
            alpha: mi.alpha,
            beta: mi.beta,
            gamma: mi.gamma,
            mi_hidden: model.mi_hidden,
            mi_batch: train.mi_batch,
            lr: train.adam.lr,
            weight_decay: train.adam.weight_decay,
            epochs: train.epochs,
            patience: train.patience,
            batch_bags: train.batch_bags,
            shuffle_instances: train.shuffle_instances,
            seed: 0,
            repeats: 1,
            perm: 0,
            data_dir: None,
            synthetic_per_class: 600,
            train_bags: None,
            val_bags: None,
            test_bags: None,
            out_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

/// Parses `key=value`; the value is read as JSON and falls back to a string.
fn parse_override(raw: &str) -> CliResult<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Failure::input(format!("override {raw:?} is not key=value")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

impl RunConfig {
    /// Reads an optional JSON document and applies `key=value` overrides.
    pub fn load(text: Option<&str>, overrides: &[String]) -> CliResult<Self> {
        let mut doc = match text {
            Some(t) => serde_json::from_str::<Value>(t).map_err(|e| Failure::input(format!("config: {e}")))?,
            None => Value::Object(Default::default()),
        };
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Failure::input("config must be a JSON object"))?;
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            obj.insert(k, v);
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Failure::input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.repeats == 0 {
            return Err(Failure::input("repeats must be at least 1"));
        }
        if self.n_bags == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Failure::input("bag counts must be positive"));
        }
        self.model(self.seed).map(|_| ())?;
        self.train(self.seed).validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-{}-{}", self.task, self.pooling.name(), &self.hash()[..12]))
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed + i).collect()
    }

    pub fn model(&self, _seed: u64) -> CliResult<ModelConfig> {
        let mi = MiWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        };
        if self.mi {
            mi.validate()?;
        }
        let idu = IduConfig {
            conv1: self.conv1,
            conv2: self.conv2,
            kernel: self.kernel,
            fc1: self.fc1,
            n: self.n,
            side: 28,
        };
        if idu.map_side().is_none() {
            return Err(Failure::input(format!("kernel {} does not fit 28x28 inputs", self.kernel)));
        }
        Ok(ModelConfig {
            task: self.task,
            idu,
            pooling: self.pooling,
            hidden: self.h,
            attention_dim: self.d,
            mi: self.mi.then_some(mi),
            mi_hidden: self.mi_hidden,
        })
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            epochs: self.epochs,
            batch_bags: self.batch_bags,
            seed,
            shuffle_instances: self.shuffle_instances,
            patience: self.patience,
            mi_batch: self.mi_batch,
        }
    }

    pub fn scenario(&self, n_bags: usize, seed: u64) -> ScenarioSpec {
        let mut spec = ScenarioSpec::standard(self.task, n_bags, seed);
        let (m, sigma) = (
            self.m.unwrap_or(spec.mean_cardinality),
            self.sigma.unwrap_or(spec.std_cardinality),
        );
        spec = spec.with_cardinality(m, sigma);
        spec.outlier_count = self.k_outliers;
        spec
    }
}
