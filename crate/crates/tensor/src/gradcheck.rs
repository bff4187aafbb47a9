//! Central finite-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, eps)`.
    pub max_rel_error: f64,
    /// `(input, coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Checker configuration. `max_coords` limits how many coordinates per input
/// are perturbed (chosen with `seed`); `None` checks all of them.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub eps: f64,
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            eps: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::inference();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&tape, &vars)?.item()?;
    if !out.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(out)
}

impl GradCheck {
    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        if !(self.h > 0.0) {
            return Err(TensorError::contract("grad_check", "step h must be positive"));
        }
        let analytic: Vec<Vec<f64>> = {
            let tape = Tape::new();
            let vars: Vec<_> = inputs
                .iter()
                .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
                .collect();
            let out = f(&tape, &vars)?;
            if !out.item()?.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let grads = tape.backward(out)?;
            vars.iter()
                .zip(inputs)
                .map(|(v, t)| {
                    grads
                        .get(*v)
                        .map(|g| g.into_data())
                        .unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        };
        for k in 0..inputs.len() {
            let n = inputs[k].numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(c) if c < n => {
                    let mut v = sample(&mut rng, n, c).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            for j in coords {
                let orig = work[k].data()[j];
                work[k].data_mut()[j] = orig + self.h;
                let fp = eval(&f, &work)?;
                work[k].data_mut()[j] = orig - self.h;
                let fm = eval(&f, &work)?;
                work[k].data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * self.h);
                let a = analytic[k][j];
                let denom = a.abs().max(numeric.abs()).max(self.eps);
                let err = (a - numeric).abs() / denom;
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((k, j));
                }
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between the autodiff gradient of scalar `f` at `x`
/// and its central-difference estimate with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let checker = GradCheck {
        h,
        ..GradCheck::default()
    };
    let report = checker.run(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x))?;
    Ok(report.max_rel_error)
}
