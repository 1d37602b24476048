use crate::error::{dim_err, Error, Result};
use crate::numerics::{concat_cols, fan_in_uniform, Bound, ParamId, ParamSet, Rng, Tensor, Var};
use crate::scalar::Scalar;

/// Gate order used for `w` and `b`.
pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// One LSTM direction: `W_* in R^{h x (n+h)}` applied to `[x_t; h]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub n: usize,
    pub h: usize,
    pub w: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LstmParams {
    /// Uniform `±1/sqrt(h)` weights; forget bias 1, other biases 0.
    pub fn new<F: Scalar>(n: usize, h: usize, params: &mut ParamSet<F>, prefix: &str, rng: &mut Rng) -> Self {
        let w = GATES.map(|g| params.add(format!("{prefix}w_{g}"), fan_in_uniform(&[h, n + h], h, rng)));
        let b = GATES.map(|g| {
            let init = if g == "f" { F::one() } else { F::zero() };
            params.add(format!("{prefix}b_{g}"), Tensor::full(&[h], init))
        });
        Self { n, h, w, b }
    }

    /// One recurrence on `1 x n` input and `1 x h` state.
    pub fn step<'t, F: Scalar>(
        &self,
        p: &Bound<'t, F>,
        x: Var<'t, F>,
        h: Var<'t, F>,
        c: Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        if x.shape() != [1, self.n] || h.shape() != [1, self.h] || c.shape() != [1, self.h] {
            return Err(dim_err(
                "lstm_step",
                format!(
                    "input {:?}, h {:?}, c {:?} for n={} h={}",
                    x.shape(),
                    h.shape(),
                    c.shape(),
                    self.n,
                    self.h
                ),
            ));
        }
        let xh = concat_cols(&[x, h])?;
        let affine = |k: usize| xh.matmul_nt(p.get(self.w[k]))?.add_row_bias(p.get(self.b[k]));
        let i = affine(0)?.sigmoid()?;
        let f = affine(1)?.sigmoid()?;
        let o = affine(2)?.sigmoid()?;
        let g = affine(3)?.tanh()?;
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh()?)?;
        Ok((h_next, c_next))
    }

    /// Runs over the rows of `f` in `order`, from zero state; returns every `(h_t, c_t)`.
    pub fn run<'t, F: Scalar>(
        &self,
        p: &Bound<'t, F>,
        f: Var<'t, F>,
        order: impl Iterator<Item = usize>,
    ) -> Result<Vec<(Var<'t, F>, Var<'t, F>)>> {
        let tape = f.tape();
        let mut h = tape.constant(Tensor::zeros(&[1, self.h]));
        let mut c = tape.constant(Tensor::zeros(&[1, self.h]));
        let mut states = Vec::new();
        for t in order {
            (h, c) = self.step(p, f.row(t)?, h, c)?;
            states.push((h, c));
        }
        Ok(states)
    }
}

/// Forward and backward directions over the bag.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

/// Tape-level BiLSTM output.
pub struct BiLstmOutput<'t, F: Scalar> {
    /// `1 x 2h`: final forward hidden state, then final backward hidden state.
    pub s: Var<'t, F>,
    pub forward: Vec<(Var<'t, F>, Var<'t, F>)>,
    pub backward: Vec<(Var<'t, F>, Var<'t, F>)>,
}

impl BiLstm {
    pub fn new<F: Scalar>(n: usize, h: usize, params: &mut ParamSet<F>, prefix: &str, rng: &mut Rng) -> Self {
        Self {
            fwd: LstmParams::new(n, h, params, &format!("{prefix}fwd."), rng),
            bwd: LstmParams::new(n, h, params, &format!("{prefix}bwd."), rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.h
    }

    pub fn forward<'t, F: Scalar>(&self, p: &Bound<'t, F>, f: Var<'t, F>) -> Result<BiLstmOutput<'t, F>> {
        let shape = f.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Contract(format!("bilstm_pool needs an m x n matrix with m >= 1, got {shape:?}")));
        }
        let m = shape[0];
        let forward = self.fwd.run(p, f, 0..m)?;
        let backward = self.bwd.run(p, f, (0..m).rev())?;
        let s = concat_cols(&[forward[m - 1].0, backward[m - 1].0])?;
        Ok(BiLstmOutput { s, forward, backward })
    }
}
