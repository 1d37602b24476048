//! Prediction unit, task losses, AdamW, the training loop and checkpoints.

mod adam;
mod checkpoint;
mod model;

use serde::{Deserialize, Serialize};

use crate::datasets::{shuffle_bag, Bag, Pixels};
use crate::encoders::images_tensor;
use crate::error::{Error, Result};
use crate::evaluation::Confusion;
use crate::mi_loss::mi_total;
use crate::numerics::{concat_rows, Rng, Tape, Var};
use crate::scalar::Scalar;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, TensorMeta,
    CHECKPOINT_VERSION,
};
#[cfg(test)]
pub(crate) use model::tiny_config;
pub use model::{
    task_loss, task_loss_var, BagForward, HeadVariant, MilModel, ModelConfig, Prediction, PredictionHead,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Bags whose gradients are averaged per optimizer step.
    pub batch_bags: usize,
    pub seed: u64,
    pub shuffle_instances: bool,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Instances per MI batch; short bags are topped up with other training instances.
    pub mi_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 100,
            batch_bags: 1,
            seed: 0,
            shuffle_instances: true,
            patience: 20,
            mi_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be at least 1".into()));
        }
        if self.batch_bags == 0 {
            return Err(Error::Contract("batch_bags must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Error of the pre-update predictions made during the epoch, percent.
    pub train_error: f64,
    pub mi_loss: Option<f64>,
    pub val_loss: f64,
    pub val_error: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_error: f64,
    pub stopped_early: bool,
    /// Shuffle stream state after the last epoch.
    pub rng: Rng,
}

struct StepResult<F> {
    loss: f64,
    mi: Option<f64>,
    raw: f64,
    grads: Vec<Option<Vec<F>>>,
}

fn components_text(parts: &[(&str, f64)]) -> String {
    parts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn bag_step<F: Scalar>(
    model: &MilModel<F>,
    bag: &Bag,
    mi_pool: &[&Pixels],
    mi_batch: usize,
    rng: &mut Rng,
    epoch: usize,
    bag_id: usize,
) -> Result<StepResult<F>> {
    let target = bag
        .target()
        .ok_or_else(|| Error::Contract(format!("training bag {bag_id} has no target")))?;
    let tape = Tape::with_finite_checks(false);
    let p = model.params.bind(&tape, true);
    let fwd = model.forward(&p, bag)?;
    let task = task_loss_var(fwd.raw, target, model.variant())?;
    let mut total = task;
    let mut mi_value = None;
    let mut parts = vec![("task", task.item().as_f64())];

    if let (Some(heads), Some(weights)) = (&model.mi, model.config.active_mi()) {
        let (mut f, mut map) = (fwd.idu.features, fwd.idu.local_map);
        let short = mi_batch.saturating_sub(bag.len()).max(usize::from(bag.len() < 2));
        if short > 0 && !mi_pool.is_empty() {
            let extra: Vec<&[u8]> = (0..short).map(|_| &mi_pool[rng.below(mi_pool.len())][..]).collect();
            let x = tape.constant(images_tensor(&extra, bag.rows(), bag.cols())?);
            let out = model.idu.forward(&p, x)?;
            f = concat_rows(&[f, out.features])?;
            map = concat_rows(&[map, out.local_map])?;
        }
        let c = heads.components(&p, f, map, rng)?;
        let mi = mi_total(&c, &weights)?;
        for (k, v) in [
            ("mi_global", c.global),
            ("mi_local", c.local),
            ("prior_encoder", c.prior_encoder),
            ("prior_discriminator", c.prior_discriminator),
        ] {
            parts.push((k, v.item().as_f64()));
        }
        mi_value = Some(mi.item().as_f64());
        total = total.add(mi)?;
    }

    let loss = total.item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            bag: bag_id,
            components: components_text(&parts),
        });
    }
    let mut grads = tape.backward(total)?;
    let grads = p.vars.iter().map(|&v: &Var<'_, F>| grads.take(v)).collect();
    Ok(StepResult {
        loss,
        mi: mi_value,
        raw: fwd.raw.item().as_f64(),
        grads,
    })
}

/// Mean task loss and error (percent) over labeled bags.
pub fn evaluate_loss<F: Scalar>(model: &MilModel<F>, bags: &[Bag]) -> Result<(f64, f64)> {
    let mut conf = Confusion::default();
    let mut loss = 0.0;
    for bag in bags {
        let target = bag
            .target()
            .ok_or_else(|| Error::Contract("evaluation bag has no target".into()))?;
        let f = model.features(bag)?;
        let (_, raw) = model.pool_features(&f)?;
        loss += task_loss(raw, target, model.variant())?;
        conf.record(Prediction::from_raw(raw, model.variant()).label, target);
    }
    Ok((loss / bags.len() as f64, conf.error_rate()))
}

/// Trains in place and leaves the model at its best validation epoch.
///
/// Every epoch visits the bags in a fresh order and, when enabled, feeds each
/// bag under a fresh instance permutation.
pub fn train<F: Scalar>(
    model: &mut MilModel<F>,
    train_bags: &[Bag],
    val_bags: &[Bag],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation bags".into()));
    }
    let mut shuffle_rng = Rng::labeled(cfg.seed, "shuffle");
    let mut mi_rng = Rng::labeled(cfg.seed, "mi");
    let mi_pool: Vec<&Pixels> = train_bags.iter().flat_map(|b| b.instances()).collect();
    let mut state = AdamState::new(&model.params);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, f64::INFINITY);
    let mut best_params = model.params.values().to_vec();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let order = shuffle_rng.permutation(train_bags.len());
        let mut conf = Confusion::default();
        let (mut loss_sum, mut mi_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_bags) {
            let mut acc: Vec<Option<Vec<F>>> = vec![None; model.params.len()];
            for &bag_id in chunk {
                let original = &train_bags[bag_id];
                let shuffled;
                let bag = if cfg.shuffle_instances {
                    shuffled = shuffle_bag(original, &mut shuffle_rng);
                    &shuffled
                } else {
                    original
                };
                let step = bag_step(model, bag, &mi_pool, cfg.mi_batch, &mut mi_rng, epoch, bag_id)?;
                loss_sum += step.loss;
                mi_sum += step.mi.unwrap_or(0.0);
                let target = bag.target().expect("checked in step");
                conf.record(Prediction::from_raw(step.raw, model.variant()).label, target);
                for (a, g) in acc.iter_mut().zip(step.grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
            if chunk.len() > 1 {
                let inv = F::one() / F::lit(chunk.len() as f64);
                acc.iter_mut().flatten().flatten().for_each(|x| *x *= inv);
            }
            adam_step(&mut model.params, &acc, &mut state, &cfg.adam)?;
        }
        let (val_loss, val_error) = evaluate_loss(model, val_bags)?;
        let n = train_bags.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_error: conf.error_rate(),
            mi_loss: model.config.active_mi().map(|_| mi_sum / n),
            val_loss,
            val_error,
        });
        if (val_error, val_loss) < best {
            best = (val_error, val_loss);
            best_params = model.params.values().to_vec();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params.values_mut().clone_from_slice(&best_params);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_error: best.0,
        stopped_early,
        rng: shuffle_rng,
    })
}
