//! Central finite-difference gradient checking.
//!
//! The checked function rebuilds its graph from scratch for every probe, so
//! the numeric side never touches the tape's backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Relative errors divide by `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Probe at most this many elements per input (sampled without replacement).
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` of the worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    /// Compares tape gradients of the scalar `f(inputs)` against central differences.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.backward(root)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
            let root = f(&mut tape, &vars)?;
            Ok(tape.value(root).item())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradReport::default();
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for (ii, input) in inputs.iter().enumerate() {
            let elems: Vec<usize> = match self.max_elements {
                Some(cap) if cap < input.len() => sample(&mut rng, input.len(), cap).into_vec(),
                _ => (0..input.len()).collect(),
            };
            for e in elems {
                let orig = input.data()[e];
                probe[ii].data_mut()[e] = orig + self.step;
                let up = eval(&probe)?;
                probe[ii].data_mut()[e] = orig - self.step;
                let down = eval(&probe)?;
                probe[ii].data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic[ii].data()[e];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                report.max_abs_err = report.max_abs_err.max(abs);
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.worst = Some((ii, e, a, numeric));
                }
            }
        }
        Ok(report)
    }
}
