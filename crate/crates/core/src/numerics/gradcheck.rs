use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Max over coordinates of `|analytic - central| / max(1, |analytic|, |central|)`
/// for a scalar function of one tensor.
pub fn grad_check<F, Fun>(f: Fun, x: &Tensor<F>, eps: f64) -> Result<f64>
where
    F: Scalar,
    Fun: for<'t> Fn(&'t Tape<F>, Var<'t, F>) -> Result<Var<'t, F>>,
{
    GradCheck::new(eps).run(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x))
}

/// Finite-difference check over several inputs, optionally on a random
/// subset of coordinates per input (large parameter sets).
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            max_coords_per_input: None,
            seed: 0,
        }
    }

    pub fn sampled(eps: f64, max_coords: usize, seed: u64) -> Self {
        Self {
            eps,
            max_coords_per_input: Some(max_coords),
            seed,
        }
    }

    pub fn run<F, Fun>(&self, f: Fun, inputs: &[Tensor<F>]) -> Result<f64>
    where
        F: Scalar,
        Fun: for<'t> Fn(&'t Tape<F>, &[Var<'t, F>]) -> Result<Var<'t, F>>,
    {
        let analytic: Vec<Tensor<F>> = {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let loss = f(&tape, &vars)?;
            let grads = tape.backward(loss)?;
            vars.iter()
                .map(|&v| grads.get(v).expect("input requires grad"))
                .collect()
        };
        let eval = |perturbed: &[Tensor<F>]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
            Ok(f(&tape, &vars)?.item().as_f64())
        };

        let mut rng = Rng::new(self.seed);
        let mut worst = 0.0f64;
        let mut work: Vec<Tensor<F>> = inputs.to_vec();
        for (which, input) in inputs.iter().enumerate() {
            let coords: Vec<usize> = match self.max_coords_per_input {
                Some(k) if k < input.len() => (0..k).map(|_| rng.below(input.len())).collect(),
                _ => (0..input.len()).collect(),
            };
            for i in coords {
                let orig = input.data()[i];
                work[which].data_mut()[i] = orig + F::lit(self.eps);
                let plus = eval(&work)?;
                work[which].data_mut()[i] = orig - F::lit(self.eps);
                let minus = eval(&work)?;
                work[which].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[which].data()[i].as_f64();
                let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }
}
