use super::graph::{Graph, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Evaluates `f` on fresh differentiable copies of `inputs` and returns the
/// loss together with dLoss/dInput for every input.
pub fn gradients<S, F>(f: F, inputs: &[Tensor<S>]) -> Result<(S, Vec<Vec<S>>)>
where
    S: Real,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::param("gradient check needs a scalar-valued function"));
    }
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![S::zero(); t.numel()], <[S]>::to_vec))
        .collect();
    Ok((g.value(loss).item(), grads))
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::param("gradient check needs a scalar-valued function"));
    }
    Ok(g.value(out).item())
}

/// Compares analytic gradients against central differences
/// `(f(x+h) - f(x-h)) / 2h` on every coordinate of every input and returns
/// the largest relative error, using `max(|analytic|, |numeric|, 1e-8)` as
/// the denominator.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::param(format!("finite-difference step must be positive, got {step}")));
    }
    let (_, analytic) = gradients(&f, inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (which, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + step;
            let up = eval_scalar(&f, &work)?;
            work[which].data_mut()[idx] = orig - step;
            let down = eval_scalar(&f, &work)?;
            work[which].data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * step);
            let denom = grad[idx].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grad[idx] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
