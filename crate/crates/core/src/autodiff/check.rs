//! Finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::{HirError, Result};

/// Central-difference gradient of `f` with respect to every entry of every
/// parameter tensor. `f` is evaluated on a fresh graph each time.
pub fn numeric_gradient<F>(f: &F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].rows(), params[p].cols());
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest relative disagreement between the recorded gradient and central
/// differences, over all coordinates of all parameters:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(HirError::Config(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    let numeric = numeric_gradient(&f, params, step)?;

    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let rel = (x - y).abs() / (x.abs() + y.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
