//! Finite-difference validation of the tape's analytic gradients.
//!
//! Central differences at a configurable step are compared element-wise
//! against the backward pass. This is the independent oracle for every
//! differentiable block and loss in the crate.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a floor so that near-zero gradient pairs compare
/// absolutely instead of blowing up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Multi-input gradient checker. Each named input is perturbed element by
/// element; the closure rebuilds the graph from scratch for every
/// evaluation, so the analytic and numeric paths share no state.
pub struct GradCheck {
    step: f64,
    tol: f64,
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheck { step, tol }
    }

    pub fn inputs<'a>(self, inputs: &'a [(&'a str, &'a Tensor)]) -> GradCheckRun<'a> {
        GradCheckRun {
            step: self.step,
            tol: self.tol,
            inputs,
        }
    }
}

pub struct GradCheckRun<'a> {
    step: f64,
    tol: f64,
    inputs: &'a [(&'a str, &'a Tensor)],
}

impl<'a> GradCheckRun<'a> {
    /// Panics if any element's relative error exceeds the tolerance;
    /// returns the per-input reports otherwise.
    pub fn run<F>(&self, build: F) -> Vec<CheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |tensors: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
            let root = build(&mut g, &vars);
            g.value(root).item()
        };

        // analytic gradients
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|(_, t)| g.leaf((*t).clone()))
            .collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);

        let base: Vec<Tensor> = self.inputs.iter().map(|(_, t)| (*t).clone()).collect();
        let mut reports = Vec::new();
        for (k, (name, tensor)) in self.inputs.iter().enumerate() {
            let analytic = grads.get(vars[k], tensor.shape());
            let mut max_rel: f64 = 0.0;
            for e in 0..tensor.len() {
                let mut plus = base.clone();
                plus[k].data_mut()[e] += self.step;
                let mut minus = base.clone();
                minus[k].data_mut()[e] -= self.step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * self.step);
                let re = rel_err(analytic.data()[e], numeric);
                if re > max_rel {
                    max_rel = re;
                }
                assert!(
                    re <= self.tol,
                    "gradient mismatch for input '{}' element {}: analytic {} vs numeric {} (rel {})",
                    name,
                    e,
                    analytic.data()[e],
                    numeric,
                    re
                );
            }
            reports.push(CheckReport {
                name: name.to_string(),
                max_rel_err: max_rel,
                checked: tensor.len(),
            });
        }
        reports
    }
}

/// Single-input convenience wrapper.
pub fn check_scalar_fn<F>(input: &Tensor, step: f64, tol: f64, build: F) -> CheckReport
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let reports = GradCheck::new(step, tol)
        .inputs(&[("x", input)])
        .run(|g, vars| build(g, vars[0]));
    reports.into_iter().next().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let report = check_scalar_fn(&x, 1e-4, 1e-6, |g, v| {
            let sq = g.mul(v, v);
            g.sum_all(sq)
        });
        assert!(report.max_rel_err < 1e-6);
        assert_eq!(report.checked, 3);
    }

    #[test]
    #[should_panic(expected = "gradient mismatch")]
    fn detects_wrong_gradient() {
        use std::cell::Cell;
        // analytic pass sees factor 2, every numeric evaluation sees 3
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let calls = Cell::new(0usize);
        let _ = GradCheck::new(1e-3, 1e-6)
            .inputs(&[("x", &x)])
            .run(|g, vars| {
                let factor = if calls.get() == 0 { 2.0 } else { 3.0 };
                calls.set(calls.get() + 1);
                let s = g.scale(vars[0], factor);
                g.sum_all(s)
            });
    }
}
