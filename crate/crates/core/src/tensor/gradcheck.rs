use std::collections::BTreeMap;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn evaluate<F>(params: &BTreeMap<String, Tensor<f64>>, seed: u64, training: bool, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new(training, seed);
    let bound = g.bind(params)?;
    let loss = f(&mut g, &bound)?;
    g.value(loss).item()
}

/// Compares reverse-mode gradients of the scalar objective `f` against
/// `(f(p + eps) - f(p - eps)) / 2 eps` for every coordinate of every
/// parameter. Relative error is `|a - n| / (max(|a|, |n|) + 1e-8)`.
///
/// Every evaluation builds a fresh graph seeded with `seed`, so stochastic
/// ops (dropout) draw identical masks each time.
pub fn grad_check<F>(
    params: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    seed: u64,
    training: bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut g = Graph::new(training, seed);
    let bound = g.bind(params)?;
    let loss = f(&mut g, &bound)?;
    let base = g.value(loss).item()?;
    let grads = g.backward(loss)?.collect(&bound);

    let again = evaluate(params, seed, training, &f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic { first: base, second: again });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params {
        let analytic = &grads[name];
        for i in 0..tensor.numel() {
            let original = tensor.data()[i];
            probe.get_mut(name).expect("cloned key").data_mut()[i] = original + eps;
            let up = evaluate(&probe, seed, training, &f)?;
            probe.get_mut(name).expect("cloned key").data_mut()[i] = original - eps;
            let down = evaluate(&probe, seed, training, &f)?;
            probe.get_mut(name).expect("cloned key").data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
