//! Mutual-information regularizer on IDU outputs: global and local
//! Jensen-Shannon MI estimators plus adversarial prior matching.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{concat_cols, fan_in_uniform, kaiming_uniform, Bound, ParamId, ParamSet, Rng, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MiWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.1,
        }
    }
}

impl MiWeights {
    pub const OFF: MiWeights = MiWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Contract(format!("MI weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn new<F: Scalar>(input: usize, hidden: usize, params: &mut ParamSet<F>, prefix: &str, rng: &mut Rng) -> Self {
        Self {
            w1: params.add(format!("{prefix}w1"), kaiming_uniform(&[hidden, input], input, rng)),
            b1: params.add(format!("{prefix}b1"), Tensor::zeros(&[hidden])),
            w2: params.add(format!("{prefix}w2"), fan_in_uniform(&[1, hidden], hidden, rng)),
            b2: params.add(format!("{prefix}b2"), Tensor::zeros(&[1])),
        }
    }

    /// `w2 . relu(pre + b1) + b2` for a precomputed `pre = W1 x`.
    fn finish<'t, F: Scalar>(&self, p: &Bound<'t, F>, pre: Var<'t, F>) -> Result<Var<'t, F>> {
        pre.add_row_bias(p.get(self.b1))?
            .relu()?
            .matmul_nt(p.get(self.w2))?
            .add_row_bias(p.get(self.b2))
    }

    fn forward<'t, F: Scalar>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        self.finish(p, x.matmul_nt(p.get(self.w1))?)
    }

    fn detached<'t, F: Scalar>(&self, p: &Bound<'t, F>) -> Bound<'t, F> {
        let mut vars = p.vars.clone();
        for id in [self.w1, self.b1, self.w2, self.b2] {
            vars[id.0] = p.get(id).detach();
        }
        Bound { vars }
    }
}

/// Global scorer `T_g`, local scorer `T_l` and prior discriminator `D`.
#[derive(Clone, Debug)]
pub struct MiHeads {
    pub n: usize,
    pub channels: usize,
    pub hidden: usize,
    global: Mlp,
    local_wf: ParamId,
    local: Mlp,
    prior: Mlp,
}

/// The four estimator terms of one batch.
#[derive(Clone, Copy)]
pub struct MiComponents<'t, F: Scalar> {
    pub global: Var<'t, F>,
    pub local: Var<'t, F>,
    /// Trains the encoder to fool `D`; `D`'s parameters are constants here.
    pub prior_encoder: Var<'t, F>,
    /// Trains `D`; the features are constants here.
    pub prior_discriminator: Var<'t, F>,
}

impl MiHeads {
    /// `T_l(f, c) = w2 . relu(Wc c + Wf f + b1) + b2` per cell; `T_g` sees
    /// `f` next to the channel means of the map; `D` sees `sigmoid(f)`.
    pub fn new<F: Scalar>(
        n: usize,
        channels: usize,
        hidden: usize,
        params: &mut ParamSet<F>,
        prefix: &str,
        rng: &mut Rng,
    ) -> Self {
        let global = Mlp::new(n + channels, hidden, params, &format!("{prefix}global."), rng);
        let local_wf = params.add(format!("{prefix}local.wf"), kaiming_uniform(&[hidden, n], n, rng));
        let local = Mlp::new(channels, hidden, params, &format!("{prefix}local."), rng);
        let prior = Mlp::new(n, hidden, params, &format!("{prefix}prior."), rng);
        Self {
            n,
            channels,
            hidden,
            global,
            local_wf,
            local,
            prior,
        }
    }

    /// Parameter ids of `T_g`, `T_l` and `D`.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for m in [&self.global, &self.local, &self.prior] {
            ids.extend([m.w1, m.b1, m.w2, m.b2]);
        }
        ids.push(self.local_wf);
        ids
    }

    fn check<F: Scalar>(&self, f: Var<'_, F>, map: Option<Var<'_, F>>) -> Result<usize> {
        let fs = f.shape();
        if fs.len() != 2 || fs[1] != self.n {
            return Err(dim_err("mi", format!("features {fs:?}, expected B x {}", self.n)));
        }
        if let Some(map) = map {
            let ms = map.shape();
            if ms.len() != 4 || ms[0] != fs[0] || ms[1] != self.channels {
                return Err(dim_err(
                    "mi",
                    format!("local map {ms:?} does not match features {fs:?} with {} channels", self.channels),
                ));
            }
        }
        Ok(fs[0])
    }

    /// `B x 1` global scores of `(f_i, map_{pair[i]})`.
    fn global_scores<'t, F: Scalar>(
        &self,
        p: &Bound<'t, F>,
        f: Var<'t, F>,
        summary: Var<'t, F>,
        pair: &[usize],
    ) -> Result<Var<'t, F>> {
        self.global.forward(p, concat_cols(&[f, summary.gather_rows(pair)?])?)
    }

    pub fn mi_global<'t, F: Scalar>(
        &self,
        p: &Bound<'t, F>,
        f: Var<'t, F>,
        map: Var<'t, F>,
        rng: &mut Rng,
    ) -> Result<Var<'t, F>> {
        let b = self.check(f, Some(map))?;
        if b < 2 {
            return Err(Error::Contract("mi_global needs a batch of at least 2".into()));
        }
        let summary = channel_means(map)?;
        let identity: Vec<usize> = (0..b).collect();
        let pos = self.global_scores(p, f, summary, &identity)?;
        let neg = self.global_scores(p, f, summary, &rng.derangement(b))?;
        jsd_loss(pos, neg)
    }

    /// Per-cell scores pairing `f_i` with every cell of `map_{pair[i]}`.
    fn local_scores<'t, F: Scalar>(
        &self,
        p: &Bound<'t, F>,
        f_proj: Var<'t, F>,
        cell_proj: Var<'t, F>,
        cells: usize,
        pair: &[usize],
    ) -> Result<Var<'t, F>> {
        let f_idx: Vec<usize> = (0..pair.len()).flat_map(|i| std::iter::repeat_n(i, cells)).collect();
        let c_idx: Vec<usize> = pair.iter().flat_map(|&j| j * cells..(j + 1) * cells).collect();
        let pre = cell_proj.gather_rows(&c_idx)?.add(f_proj.gather_rows(&f_idx)?)?;
        self.local.finish(p, pre)
    }

    pub fn mi_local<'t, F: Scalar>(
        &self,
        p: &Bound<'t, F>,
        f: Var<'t, F>,
        map: Option<Var<'t, F>>,
        rng: &mut Rng,
    ) -> Result<Var<'t, F>> {
        let map = map.ok_or_else(|| Error::Contract("mi_local needs the local feature map".into()))?;
        let b = self.check(f, Some(map))?;
        if b < 2 {
            return Err(Error::Contract("mi_local needs a batch of at least 2".into()));
        }
        let ms = map.shape();
        let cells = ms[2] * ms[3];
        let f_proj = f.matmul_nt(p.get(self.local_wf))?;
        let cell_proj = map.channels_last()?.matmul_nt(p.get(self.local.w1))?;
        let identity: Vec<usize> = (0..b).collect();
        let pos = self.local_scores(p, f_proj, cell_proj, cells, &identity)?;
        let neg = self.local_scores(p, f_proj, cell_proj, cells, &rng.derangement(b))?;
        jsd_loss(pos, neg)
    }

    /// `(encoder term, discriminator term)` against a `Uniform[0,1]^n` prior.
    pub fn prior_matching<'t, F: Scalar>(
        &self,
        p: &Bound<'t, F>,
        f: Var<'t, F>,
        rng: &mut Rng,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let b = self.check(f, None)?;
        let tape = f.tape();
        let fake = f.sigmoid()?;
        let real = tape.constant(Tensor::from_fn(&[b, self.n], |_| F::lit(rng.uniform())));
        let half = F::lit(0.5);
        let z_real = self.prior.forward(p, real)?;
        let z_fake = self.prior.forward(p, fake.detach())?;
        let disc = neg_softplus_mean(z_real)?.add(z_fake.softplus()?.mean()?)?.scale(half)?;
        let frozen = self.prior.detached(p);
        let enc = neg_softplus_mean(self.prior.forward(&frozen, fake)?)?;
        Ok((enc, disc))
    }

    pub fn components<'t, F: Scalar>(
        &self,
        p: &Bound<'t, F>,
        f: Var<'t, F>,
        map: Var<'t, F>,
        rng: &mut Rng,
    ) -> Result<MiComponents<'t, F>> {
        let global = self.mi_global(p, f, map, rng)?;
        let local = self.mi_local(p, f, Some(map), rng)?;
        let (prior_encoder, prior_discriminator) = self.prior_matching(p, f, rng)?;
        Ok(MiComponents {
            global,
            local,
            prior_encoder,
            prior_discriminator,
        })
    }

    /// `D`'s probability that each row of `v` came from the prior.
    pub fn discriminate<'t, F: Scalar>(&self, p: &Bound<'t, F>, v: Var<'t, F>) -> Result<Var<'t, F>> {
        self.prior.forward(p, v)?.sigmoid()
    }
}

/// `alpha * global + beta * local + gamma * (encoder + discriminator)`.
pub fn mi_total<'t, F: Scalar>(c: &MiComponents<'t, F>, w: &MiWeights) -> Result<Var<'t, F>> {
    w.validate()?;
    let prior = c.prior_encoder.add(c.prior_discriminator)?;
    c.global
        .scale(F::lit(w.alpha))?
        .add(c.local.scale(F::lit(w.beta))?)?
        .add(prior.scale(F::lit(w.gamma))?)
}

/// `mean softplus(-pos) + mean softplus(neg)`.
pub fn jsd_loss<'t, F: Scalar>(pos: Var<'t, F>, neg: Var<'t, F>) -> Result<Var<'t, F>> {
    neg_softplus_mean(pos)?.add(neg.softplus()?.mean()?)
}

fn neg_softplus_mean<'t, F: Scalar>(z: Var<'t, F>) -> Result<Var<'t, F>> {
    z.scale(-F::one())?.softplus()?.mean()
}

/// `B x C` per-channel spatial means of a `B x C x H x W` map.
pub fn channel_means<'t, F: Scalar>(map: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = map.shape();
    let cells = s[2] * s[3];
    let ones = map
        .tape()
        .constant(Tensor::full(&[cells, 1], F::one() / F::lit(cells as f64)));
    map.reshape(&[s[0] * s[1], cells])?.matmul(ones)?.reshape(&[s[0], s[1]])
}
