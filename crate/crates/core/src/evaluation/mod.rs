//! Error rates, permutation robustness, cardinality generalization,
//! singleton clustering and instance-level prediction.

mod cluster;
mod metrics;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasets::{make_pair_bags, Bag, BagTarget, InstancePool, ScenarioKind, Split};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::pooling::{state_trace, Pooler};
use crate::scalar::Scalar;
use crate::training::{train, MilModel, Prediction, TrainConfig};

pub use cluster::{cluster_purity, kmeans, ClusterReport, KMeansResult};
pub use metrics::{mean_std, Confusion, MetricBundle, SeedSummary};

fn targets(bags: &[Bag]) -> Result<Vec<BagTarget>> {
    if bags.is_empty() {
        return Err(Error::Contract("evaluation needs at least one bag".into()));
    }
    bags.iter()
        .enumerate()
        .map(|(i, b)| {
            b.target()
                .ok_or_else(|| Error::Contract(format!("evaluation bag {i} has no target")))
        })
        .collect()
}

/// Thresholded (classifier) or rounded (counting) exact-match metrics.
pub fn error_rate<F: Scalar>(model: &MilModel<F>, bags: &[Bag]) -> Result<MetricBundle> {
    let truth = targets(bags)?;
    let mut conf = Confusion::default();
    for (bag, t) in bags.iter().zip(truth) {
        conf.record(model.predict(bag)?.label, t);
    }
    Ok(conf.into())
}

fn permute_rows<F: Scalar>(f: &Tensor<F>, order: &[usize]) -> Tensor<F> {
    let rows: Vec<Vec<F>> = order.iter().map(|&i| f.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub n_perm: usize,
    pub unshuffled_error: f64,
    /// Error of each full re-shuffling of every bag.
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Fraction of (bag, permutation) pairs whose label differs from the unshuffled one.
    pub flip_fraction: f64,
}

/// Re-evaluates `bags` under `n_perm` random instance orders.
///
/// Instance features do not depend on order, so each bag is encoded once and
/// only the pooling head and prediction unit are re-run per permutation.
pub fn permutation_robustness<F: Scalar>(
    model: &MilModel<F>,
    bags: &[Bag],
    n_perm: usize,
    seed: u64,
) -> Result<PermutationReport> {
    let truth = targets(bags)?;
    if n_perm == 0 {
        return Err(Error::Contract("n_perm must be at least 1".into()));
    }
    let features: Vec<Tensor<F>> = bags.iter().map(|b| model.features(b)).collect::<Result<_>>()?;
    let base: Vec<BagTarget> = features
        .iter()
        .map(|f| model.predict_features(f).map(|p| p.label))
        .collect::<Result<_>>()?;
    let unshuffled_error = Confusion::from_pairs(base.iter().copied().zip(truth.iter().copied())).error_rate();
    let mut rng = Rng::labeled(seed, "eval-perm");
    let mut errors = Vec::with_capacity(n_perm);
    let mut flips = 0usize;
    for _ in 0..n_perm {
        let mut conf = Confusion::default();
        for ((f, &t), &b) in features.iter().zip(&truth).zip(&base) {
            let order = rng.permutation(f.rows());
            let label = model.predict_features(&permute_rows(f, &order))?.label;
            flips += usize::from(label != b);
            conf.record(label, t);
        }
        errors.push(conf.error_rate());
    }
    let (mean, std) = mean_std(&errors);
    Ok(PermutationReport {
        n_perm,
        unshuffled_error,
        std: if n_perm == 1 { 0.0 } else { std },
        mean,
        errors,
        flip_fraction: flips as f64 / (n_perm * bags.len()) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardinalityConfig {
    pub sizes: Vec<usize>,
    /// Test bags per size.
    pub n_test: usize,
    /// Fine-tuning schedule; `None` evaluates the model as is.
    pub finetune: Option<TrainConfig>,
    /// Bag count of the original training set; fine-tuning uses a fifth of it.
    pub train_bags: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardinalityRow {
    pub size: usize,
    pub error: f64,
    pub finetuned_error: Option<f64>,
}

/// Error on single-witness-pair multi-digit bags at each cardinality, with
/// optional fine-tuning on a fifth of the original training budget.
pub fn cardinality_generalization<F: Scalar>(
    model: &MilModel<F>,
    train_pool: &InstancePool,
    test_pool: &InstancePool,
    cfg: &CardinalityConfig,
) -> Result<Vec<CardinalityRow>> {
    if model.task() != ScenarioKind::MultiDigit {
        return Err(Error::Compatibility(format!(
            "cardinality study needs a multi_digit model, got {}",
            model.task()
        )));
    }
    let mut rows = Vec::new();
    for (i, &size) in cfg.sizes.iter().enumerate() {
        let s = cfg.seed.wrapping_add(1000 * i as u64);
        let test = make_pair_bags(size, cfg.n_test, test_pool, s)?;
        let error = error_rate(model, &test)?.error_rate;
        let finetuned_error = match &cfg.finetune {
            None => None,
            Some(tc) => {
                let n = (cfg.train_bags / 5).max(2);
                let tune = make_pair_bags(size, n, train_pool, s + 1)?;
                let val = make_pair_bags(size, (n / 5).max(2), train_pool, s + 2)?;
                let mut tuned = model.clone();
                train(&mut tuned, &tune, &val, tc)?;
                Some(error_rate(&tuned, &test)?.error_rate)
            }
        };
        rows.push(CardinalityRow {
            size,
            error,
            finetuned_error,
        });
    }
    Ok(rows)
}

/// Bag representations of every instance seen as a singleton bag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingletonFeatures {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub bag_index: Vec<usize>,
}

impl SingletonFeatures {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// The IDU works per instance, so each bag is encoded in one batch and every
/// row is then pooled on its own.
pub fn singleton_features<F: Scalar>(model: &MilModel<F>, bags: &[Bag]) -> Result<SingletonFeatures> {
    let mut out = SingletonFeatures {
        rows: Vec::new(),
        labels: Vec::new(),
        bag_index: Vec::new(),
    };
    for (j, bag) in bags.iter().enumerate() {
        let f = model.features(bag)?;
        for (i, &label) in bag.latent_labels().iter().enumerate() {
            let (s, _) = model.pool_features(&permute_rows(&f, &[i]))?;
            out.rows.push(s.iter().map(|x| x.as_f64()).collect());
            out.labels.push(label);
            out.bag_index.push(j);
        }
    }
    Ok(out)
}

/// Singleton features, k-means with the task's cluster count (or `k`), and purity.
pub fn cluster_split<F: Scalar>(
    model: &MilModel<F>,
    bags: &[Bag],
    k: Option<usize>,
    split: Split,
    seed: u64,
) -> Result<ClusterReport> {
    let feats = singleton_features(model, bags)?;
    let k = k.unwrap_or_else(|| model.task().cluster_count());
    let km = kmeans(&feats.rows, k, seed, 10)?;
    let mut report = cluster_purity(&km.assignments, &feats.labels, model.task(), k)?;
    report.split = Some(split);
    Ok(report)
}

pub fn instance_predict<F: Scalar>(model: &MilModel<F>, image: &[u8], rows: usize, cols: usize) -> Result<Prediction> {
    let bag = Bag::new(rows, cols, vec![image.into()], vec![0], None)?;
    model.predict(&bag)
}

/// Instance-level prediction quality with witnesses as the positive class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub tp_rate: f64,
    pub tn_rate: f64,
    pub mean_accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
    pub confusion: Confusion,
    pub split: Option<Split>,
}

pub fn instance_eval<F: Scalar>(model: &MilModel<F>, bags: &[Bag], split: Option<Split>) -> Result<InstanceReport> {
    let task = model.task();
    if !matches!(task, ScenarioKind::SingleDigit | ScenarioKind::MultiDigit) {
        return Err(Error::Compatibility(format!(
            "instance prediction needs a witness classification model, got {task}"
        )));
    }
    let mut conf = Confusion::default();
    for bag in bags {
        let f = model.features(bag)?;
        for (i, &label) in bag.latent_labels().iter().enumerate() {
            let p = model.predict_features(&permute_rows(&f, &[i]))?;
            conf.record(p.label, BagTarget::Binary(task.witnesses().contains(&label)));
        }
    }
    if conf.total == 0 {
        return Err(Error::Contract("instance evaluation needs at least one bag".into()));
    }
    let tp_rate = conf.recall();
    let positives = conf.tp + conf.fn_;
    let negatives = conf.tn + conf.fp;
    let tn_rate = if negatives == 0 {
        0.0
    } else {
        100.0 * conf.tn as f64 / negatives as f64
    };
    Ok(InstanceReport {
        tp_rate,
        tn_rate,
        mean_accuracy: (tp_rate + tn_rate) / 2.0,
        positives,
        negatives,
        confusion: conf,
        split,
    })
}

/// Contents of `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub task: ScenarioKind,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricBundle>,
    pub mean: f64,
    pub std: f64,
    /// Command-specific fields, written at the top level.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ExperimentResult {
    pub fn new(task: ScenarioKind, config_hash: impl Into<String>, summary: SeedSummary) -> Self {
        Self {
            task,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.into(),
            seeds: summary.seeds,
            mean: summary.mean_error,
            std: summary.std_error,
            per_seed: summary.per_seed,
            extra: serde_json::Map::new(),
        }
    }
}

/// One row per singleton: bag index, latent label, then the feature columns.
pub fn write_features_csv(mut out: impl Write, feats: &SingletonFeatures) -> Result<()> {
    let width = feats.rows.first().map_or(0, Vec::len);
    let header: Vec<String> = ["bag".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..width).map(|i| format!("s{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for ((row, &label), &bag) in feats.rows.iter().zip(&feats.labels).zip(&feats.bag_index) {
        let cols: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
        writeln!(out, "{bag},{label},{}", cols.join(","))?;
    }
    Ok(())
}

/// Forward hidden state after every step of every bag.
pub fn write_states_csv<F: Scalar>(mut out: impl Write, model: &MilModel<F>, bags: &[Bag]) -> Result<()> {
    let Pooler::Bilstm(bilstm) = &model.pooler else {
        return Err(Error::Compatibility(format!(
            "state export needs a bilstm model, got {}",
            model.pooler.kind().name()
        )));
    };
    let h = bilstm.hidden();
    let header: Vec<String> = ["bag", "step", "label"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..h).map(|i| format!("h{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (j, bag) in bags.iter().enumerate() {
        let f = model.features(bag)?;
        for (t, (state, label)) in state_trace(bilstm, &model.params, &f)?
            .iter()
            .zip(bag.latent_labels())
            .enumerate()
        {
            let cols: Vec<String> = state.iter().map(|x| format!("{:e}", x.as_f64())).collect();
            writeln!(out, "{j},{t},{label},{}", cols.join(","))?;
        }
    }
    Ok(())
}
