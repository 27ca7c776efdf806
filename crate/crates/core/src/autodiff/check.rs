use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every input entry.
    pub max_relative_error: f64,
    /// Input and flat entry index where the maximum occurred.
    pub worst: (usize, usize),
}

impl GradCheck {
    pub fn within(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Checks the gradient of a scalar-valued graph builder.
///
/// `build` receives a fresh graph and one parameter leaf per input and must
/// return a single-element output. It is re-run for every perturbed entry,
/// so it has to be deterministic.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar output, got {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
    };
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[which].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for idx in 0..inputs[which].len() {
            let orig = inputs[which].data()[idx];
            work[which].data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst = (which, idx);
            }
        }
    }
    Ok(report)
}
