use crate::error::{Error, Result};
use crate::numerics::{fan_in_uniform, Bound, ParamId, ParamSet, Rng, Var};
use crate::scalar::Scalar;

/// `V, U in R^{d x n}`, `w in R^d`; `u` only for the gated variant.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub n: usize,
    pub d: usize,
    pub v: ParamId,
    pub w: ParamId,
    pub u: Option<ParamId>,
}

impl AttentionParams {
    pub fn new<F: Scalar>(
        n: usize,
        d: usize,
        gated: bool,
        params: &mut ParamSet<F>,
        prefix: &str,
        rng: &mut Rng,
    ) -> Self {
        let v = params.add(format!("{prefix}v"), fan_in_uniform(&[d, n], n, rng));
        let w = params.add(format!("{prefix}w"), fan_in_uniform(&[1, d], d, rng));
        let u = gated.then(|| params.add(format!("{prefix}u"), fan_in_uniform(&[d, n], n, rng)));
        Self { n, d, v, w, u }
    }

    pub fn gated(&self) -> bool {
        self.u.is_some()
    }

    /// `(S, a)`: `1 x n` pooled vector and `m x 1` weights.
    pub fn forward<'t, F: Scalar>(&self, p: &Bound<'t, F>, f: Var<'t, F>) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let shape = f.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Contract(format!("attention needs an m x n matrix with m >= 1, got {shape:?}")));
        }
        let mut hidden = f.matmul_nt(p.get(self.v))?.tanh()?;
        if let Some(u) = self.u {
            hidden = hidden.mul(f.matmul_nt(p.get(u))?.sigmoid()?)?;
        }
        let a = hidden.matmul_nt(p.get(self.w))?.softmax()?;
        Ok((a.matmul_tn(f)?, a))
    }
}
