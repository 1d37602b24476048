//! Bag Representation Encoder: BiLSTM pooling and the order-invariant baselines.

mod attention;
mod lstm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamSet, Rng, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub use attention::AttentionParams;
pub use lstm::{BiLstm, BiLstmOutput, LstmParams, GATES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Bilstm,
    Attention,
    GatedAttention,
    Mean,
    Max,
}

impl PoolingKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Bilstm => "bilstm",
            PoolingKind::Attention => "attention",
            PoolingKind::GatedAttention => "gated_attention",
            PoolingKind::Mean => "mean",
            PoolingKind::Max => "max",
        }
    }
}

impl std::str::FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PoolingKind::Bilstm,
            PoolingKind::Attention,
            PoolingKind::GatedAttention,
            PoolingKind::Mean,
            PoolingKind::Max,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Contract(format!("unknown pooling {s:?}")))
    }
}

/// A pooling head and its parameter layout.
#[derive(Clone, Debug)]
pub enum Pooler {
    Bilstm(BiLstm),
    Attention(AttentionParams),
    Mean { n: usize },
    Max { n: usize },
}

/// Tape output of a pooling head.
pub struct Pooled<'t, F: Scalar> {
    /// `1 x out_dim`.
    pub s: Var<'t, F>,
    /// Attention weights, `m x 1`.
    pub weights: Option<Var<'t, F>>,
    /// Forward-direction hidden states, in observation order.
    pub trace: Option<Vec<Var<'t, F>>>,
}

impl Pooler {
    /// `h` is the LSTM width, `d` the attention width; each is ignored by the other kinds.
    pub fn new<F: Scalar>(
        kind: PoolingKind,
        n: usize,
        h: usize,
        d: usize,
        params: &mut ParamSet<F>,
        prefix: &str,
        rng: &mut Rng,
    ) -> Self {
        match kind {
            PoolingKind::Bilstm => Pooler::Bilstm(BiLstm::new(n, h, params, prefix, rng)),
            PoolingKind::Attention => Pooler::Attention(AttentionParams::new(n, d, false, params, prefix, rng)),
            PoolingKind::GatedAttention => Pooler::Attention(AttentionParams::new(n, d, true, params, prefix, rng)),
            PoolingKind::Mean => Pooler::Mean { n },
            PoolingKind::Max => Pooler::Max { n },
        }
    }

    pub fn kind(&self) -> PoolingKind {
        match self {
            Pooler::Bilstm(_) => PoolingKind::Bilstm,
            Pooler::Attention(a) if a.gated() => PoolingKind::GatedAttention,
            Pooler::Attention(_) => PoolingKind::Attention,
            Pooler::Mean { .. } => PoolingKind::Mean,
            Pooler::Max { .. } => PoolingKind::Max,
        }
    }

    /// Width of S; independent of the bag cardinality.
    pub fn out_dim(&self) -> usize {
        match self {
            Pooler::Bilstm(b) => 2 * b.hidden(),
            Pooler::Attention(a) => a.n,
            Pooler::Mean { n } | Pooler::Max { n } => *n,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, p: &Bound<'t, F>, f: Var<'t, F>) -> Result<Pooled<'t, F>> {
        let shape = f.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Contract(format!("pooling needs an m x n matrix with m >= 1, got {shape:?}")));
        }
        Ok(match self {
            Pooler::Bilstm(b) => {
                let out = b.forward(p, f)?;
                Pooled {
                    s: out.s,
                    weights: None,
                    trace: Some(out.forward.iter().map(|&(h, _)| h).collect()),
                }
            }
            Pooler::Attention(a) => {
                let (s, w) = a.forward(p, f)?;
                Pooled {
                    s,
                    weights: Some(w),
                    trace: None,
                }
            }
            Pooler::Mean { .. } => Pooled {
                s: f.mean_rows()?,
                weights: None,
                trace: None,
            },
            Pooler::Max { .. } => Pooled {
                s: f.max_rows()?,
                weights: None,
                trace: None,
            },
        })
    }
}

/// S together with the per-step states of both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct BagRepresentation<F> {
    pub s: Vec<F>,
    /// Forward direction `(h_t, c_t)` in observation order.
    pub trace: Vec<(Vec<F>, Vec<F>)>,
    /// Backward direction, in the order it observed the rows (last row first).
    pub backward_trace: Vec<(Vec<F>, Vec<F>)>,
}

fn states<F: Scalar>(v: &[(Var<'_, F>, Var<'_, F>)]) -> Vec<(Vec<F>, Vec<F>)> {
    v.iter().map(|(h, c)| (h.value().to_vec(), c.value().to_vec())).collect()
}

pub fn lstm_step<F: Scalar>(
    lstm: &LstmParams,
    params: &ParamSet<F>,
    x: &[F],
    h: &[F],
    c: &[F],
) -> Result<(Vec<F>, Vec<F>)> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let row = |v: &[F]| Tensor::new(&[1, v.len()], v.to_vec()).map(|t| tape.constant(t));
    let (h2, c2) = lstm.step(&p, row(x)?, row(h)?, row(c)?)?;
    Ok((h2.value().to_vec(), c2.value().to_vec()))
}

pub fn bilstm_pool<F: Scalar>(bilstm: &BiLstm, params: &ParamSet<F>, f: &Tensor<F>) -> Result<BagRepresentation<F>> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let out = bilstm.forward(&p, tape.constant(f.clone()))?;
    Ok(BagRepresentation {
        s: out.s.value().to_vec(),
        trace: states(&out.forward),
        backward_trace: states(&out.backward),
    })
}

/// Forward-direction hidden states, one per row of `f`.
pub fn state_trace<F: Scalar>(bilstm: &BiLstm, params: &ParamSet<F>, f: &Tensor<F>) -> Result<Vec<Vec<F>>> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let m = f.rows();
    let run = bilstm.fwd.run(&p, tape.constant(f.clone()), 0..m)?;
    Ok(run.into_iter().map(|(h, _)| h.value().to_vec()).collect())
}

/// `(S, a)` for the plain or gated attention head.
pub fn attention_pool<F: Scalar>(
    att: &AttentionParams,
    params: &ParamSet<F>,
    f: &Tensor<F>,
) -> Result<(Vec<F>, Vec<F>)> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let (s, a) = att.forward(&p, tape.constant(f.clone()))?;
    Ok((s.value().to_vec(), a.value().to_vec()))
}

pub fn mean_pool<F: Scalar>(f: &Tensor<F>) -> Result<Vec<F>> {
    let tape = Tape::new();
    Ok(tape.constant(f.clone()).mean_rows()?.value().to_vec())
}

pub fn max_pool<F: Scalar>(f: &Tensor<F>) -> Result<Vec<F>> {
    let tape = Tape::new();
    Ok(tape.constant(f.clone()).max_rows()?.value().to_vec())
}

#[cfg(test)]
mod tests;
