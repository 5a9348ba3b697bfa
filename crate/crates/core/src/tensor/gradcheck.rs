use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, inputs: &[Tensor], constants: &[Vec<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::replaying(constants.to_vec());
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t)).collect();
    let out = f(&mut graph, &vars)?;
    graph.value(out).item()
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every input coordinate.
///
/// The numeric side re-evaluates `f` with stop-gradient and straight-through
/// constants frozen at their unperturbed values, so blocked paths count as
/// constants on both sides of the comparison.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t)).collect();
    let out = f(&mut graph, &vars)?;
    if graph.value(out).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            graph.shape(out)
        )));
    }
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| graph.grad_or_zeros(v)).collect();
    let constants = graph.take_constants();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.clone();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + epsilon;
            let up = evaluate(&f, &probe, &constants)?;
            probe[i].data_mut()[j] = x - epsilon;
            let down = evaluate(&f, &probe, &constants)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
