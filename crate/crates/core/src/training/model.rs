use serde::{Deserialize, Serialize};

use crate::datasets::{Bag, BagTarget, ScenarioKind};
use crate::encoders::{bag_tensor, Idu, IduConfig, IduOutput};
use crate::error::{Error, Result};
use crate::mi_loss::{MiHeads, MiWeights};
use crate::numerics::{fan_in_uniform, sigmoid, softplus, Bound, ParamId, ParamSet, Rng, Tape, Tensor, Var};
use crate::pooling::{Pooled, Pooler, PoolingKind};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Affine map to a logit; the probability is its sigmoid.
    Classifier,
    /// Affine map to a raw count.
    Regressor,
}

impl HeadVariant {
    pub fn for_task(task: ScenarioKind) -> Self {
        if task.is_regression() {
            HeadVariant::Regressor
        } else {
            HeadVariant::Classifier
        }
    }
}

/// Prediction unit `g(S)`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub variant: HeadVariant,
    pub w: ParamId,
    pub b: ParamId,
}

impl PredictionHead {
    pub fn new<F: Scalar>(variant: HeadVariant, input: usize, params: &mut ParamSet<F>, rng: &mut Rng) -> Self {
        Self {
            variant,
            w: params.add("head.w", fan_in_uniform(&[1, input], input, rng)),
            b: params.add("head.b", Tensor::zeros(&[1])),
        }
    }

    /// `1 x 1` raw output: a logit or a count.
    pub fn forward<'t, F: Scalar>(&self, p: &Bound<'t, F>, s: Var<'t, F>) -> Result<Var<'t, F>> {
        s.matmul_nt(p.get(self.w))?.add_row_bias(p.get(self.b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: ScenarioKind,
    pub idu: IduConfig,
    pub pooling: PoolingKind,
    /// LSTM width `h`.
    pub hidden: usize,
    /// Attention width `d`.
    pub attention_dim: usize,
    /// MI regularizer weights; `None` builds no MI heads at all.
    pub mi: Option<MiWeights>,
    pub mi_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: ScenarioKind::SingleDigit,
            idu: IduConfig::default(),
            pooling: PoolingKind::Bilstm,
            hidden: 500,
            attention_dim: 128,
            mi: None,
            mi_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn variant(&self) -> HeadVariant {
        HeadVariant::for_task(self.task)
    }

    /// MI weights that actually contribute, if any.
    pub fn active_mi(&self) -> Option<MiWeights> {
        self.mi.filter(|w| !w.is_off())
    }
}

/// Bag-level prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub raw: f64,
    /// Classifier only.
    pub probability: Option<f64>,
    pub label: BagTarget,
}

impl Prediction {
    pub fn from_raw(raw: f64, variant: HeadVariant) -> Self {
        match variant {
            HeadVariant::Classifier => {
                let p = sigmoid(raw);
                Prediction {
                    raw,
                    probability: Some(p),
                    label: BagTarget::Binary(p >= 0.5),
                }
            }
            HeadVariant::Regressor => Prediction {
                raw,
                probability: None,
                label: BagTarget::Count(raw.max(0.0).round() as u32),
            },
        }
    }
}

/// Tape values of one bag's forward pass.
pub struct BagForward<'t, F: Scalar> {
    pub raw: Var<'t, F>,
    pub idu: IduOutput<'t, F>,
    pub pooled: Pooled<'t, F>,
}

/// IDU, pooling head, prediction unit and optional MI heads over one parameter set.
#[derive(Clone, Debug)]
pub struct MilModel<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    pub idu: Idu,
    pub pooler: Pooler,
    pub head: PredictionHead,
    pub mi: Option<MiHeads>,
}

impl<F: Scalar> MilModel<F> {
    /// MI heads draw from their own stream, so the rest of the model is the
    /// same with MI on or off.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if let Some(w) = &config.mi {
            w.validate()?;
        }
        let mut rng = Rng::labeled(seed, "init");
        let mut params = ParamSet::new();
        let idu = Idu::new(config.idu.clone(), &mut params, "idu.", &mut rng)?;
        let n = config.idu.n;
        let pooler = Pooler::new(
            config.pooling,
            n,
            config.hidden,
            config.attention_dim,
            &mut params,
            "bre.",
            &mut rng,
        );
        let head = PredictionHead::new(config.variant(), pooler.out_dim(), &mut params, &mut rng);
        let mi = config.mi.map(|_| {
            let mut mi_rng = Rng::labeled(seed, "init-mi");
            MiHeads::new(n, config.idu.conv2, config.mi_hidden, &mut params, "mi.", &mut mi_rng)
        });
        Ok(Self {
            config,
            params,
            idu,
            pooler,
            head,
            mi,
        })
    }

    pub fn variant(&self) -> HeadVariant {
        self.head.variant
    }

    pub fn task(&self) -> ScenarioKind {
        self.config.task
    }

    pub fn forward<'t>(&self, p: &Bound<'t, F>, bag: &Bag) -> Result<BagForward<'t, F>> {
        let tape = p.vars.first().map(Var::tape).ok_or_else(|| Error::Contract("unbound model".into()))?;
        let idu = self.idu.forward(p, tape.constant(bag_tensor(bag)?))?;
        let pooled = self.pooler.forward(p, idu.features)?;
        let raw = self.head.forward(p, pooled.s)?;
        Ok(BagForward { raw, idu, pooled })
    }

    /// `m x n` instance features of a bag.
    pub fn features(&self, bag: &Bag) -> Result<Tensor<F>> {
        crate::encoders::encode_bag(&self.idu, &self.params, bag)
    }

    /// Pooled representation `S` and raw output for a precomputed feature matrix.
    pub fn pool_features(&self, f: &Tensor<F>) -> Result<(Vec<F>, f64)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let pooled = self.pooler.forward(&p, tape.constant(f.clone()))?;
        let raw = self.head.forward(&p, pooled.s)?;
        Ok((pooled.s.value().to_vec(), raw.item().as_f64()))
    }

    pub fn predict_features(&self, f: &Tensor<F>) -> Result<Prediction> {
        Ok(Prediction::from_raw(self.pool_features(f)?.1, self.variant()))
    }

    pub fn predict(&self, bag: &Bag) -> Result<Prediction> {
        self.predict_features(&self.features(bag)?)
    }

    /// Bag representation `S`.
    pub fn representation(&self, bag: &Bag) -> Result<Vec<F>> {
        Ok(self.pool_features(&self.features(bag)?)?.0)
    }

    /// Task loss of a bag under the current parameters.
    pub fn loss(&self, bag: &Bag) -> Result<f64> {
        let target = bag
            .target()
            .ok_or_else(|| Error::Contract("loss needs a labeled bag".into()))?;
        let (_, raw) = self.pool_features(&self.features(bag)?)?;
        task_loss(raw, target, self.variant())
    }
}

fn check_target(target: BagTarget, variant: HeadVariant) -> Result<f64> {
    match (variant, target) {
        (HeadVariant::Classifier, BagTarget::Binary(b)) => Ok(f64::from(u8::from(b))),
        (HeadVariant::Regressor, BagTarget::Count(c)) => Ok(f64::from(c)),
        (v, t) => Err(Error::Contract(format!("target {t:?} is invalid for a {v:?} head"))),
    }
}

/// Loss of a raw head output: binary cross-entropy on the logit, written as
/// `softplus(z) - y z`, or squared error on the count.
pub fn task_loss(raw: f64, target: BagTarget, variant: HeadVariant) -> Result<f64> {
    let y = check_target(target, variant)?;
    Ok(match variant {
        HeadVariant::Classifier => softplus(raw) - y * raw,
        HeadVariant::Regressor => (raw - y).powi(2),
    })
}

/// Tape form of [`task_loss`].
pub fn task_loss_var<'t, F: Scalar>(raw: Var<'t, F>, target: BagTarget, variant: HeadVariant) -> Result<Var<'t, F>> {
    let y = check_target(target, variant)?;
    let tape = raw.tape();
    let yv = tape.constant(Tensor::full(&raw.shape(), F::lit(y)));
    match variant {
        HeadVariant::Classifier => raw.softplus()?.sub(raw.mul(yv)?)?.sum(),
        HeadVariant::Regressor => raw.sub(yv)?.square()?.sum(),
    }
}

#[cfg(test)]
pub(crate) fn tiny_config(task: ScenarioKind, pooling: PoolingKind) -> ModelConfig {
    ModelConfig {
        task,
        idu: IduConfig {
            conv1: 2,
            conv2: 3,
            kernel: 5,
            fc1: 8,
            n: 6,
            side: 28,
        },
        pooling,
        hidden: 4,
        attention_dim: 4,
        mi: None,
        mi_hidden: 5,
    }
}
