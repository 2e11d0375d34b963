//! Reverse-mode automatic differentiation over dense tensors.
//!
//! [`Graph`] is the tape. [`forward`] and [`Tape::backward`] wrap it with
//! named inputs, and [`grad_check`] compares analytic gradients against
//! central finite differences.

mod graph;

use std::collections::BTreeMap;

pub use graph::{log_softmax_row, Graph, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NamedTensors = BTreeMap<String, Tensor>;
pub type NamedVars = BTreeMap<String, Var>;

/// A recorded forward pass ready for one backward sweep.
#[derive(Debug)]
pub struct Tape {
    graph: Graph,
    output: Var,
    inputs: NamedVars,
}

impl Tape {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn output(&self) -> f64 {
        self.graph.value(self.output).item()
    }

    /// Gradients for every named input, shaped like the input.
    pub fn backward(&mut self) -> Result<NamedTensors> {
        let grads = self.graph.backward(self.output)?;
        Ok(self
            .inputs
            .iter()
            .map(|(name, &v)| {
                let g = grads[v.id()].clone().unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)));
                (name.clone(), g)
            })
            .collect())
    }
}

/// Registers `inputs` as differentiable leaves, runs `builder` and checks
/// that it produced a scalar.
pub fn forward<F>(builder: F, inputs: &NamedTensors) -> Result<(Tensor, Tape)>
where
    F: FnOnce(&mut Graph, &NamedVars) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: NamedVars = inputs.iter().map(|(name, t)| (name.clone(), graph.input(t.clone()))).collect();
    let output = builder(&mut graph, &vars)?;
    let value = graph.value(output).clone();
    if !value.is_scalar() {
        return Err(Error::shape("forward", format!("builder returned {:?}, expected a scalar", value.shape())));
    }
    Ok((value, Tape { graph, output, inputs: vars }))
}

/// Value and gradients of `builder` at `inputs`.
pub fn value_and_grad<F>(builder: F, inputs: &NamedTensors) -> Result<(f64, NamedTensors)>
where
    F: FnOnce(&mut Graph, &NamedVars) -> Result<Var>,
{
    let (value, mut tape) = forward(builder, inputs)?;
    Ok((value.item(), tape.backward()?))
}

/// Maximum over all coordinates of
/// `|analytic - central| / max(1, |central|)` with step `eps`.
pub fn grad_check<F>(builder: F, params: &NamedTensors, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &NamedVars) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::input(format!("finite-difference step must be positive, got {eps}")));
    }
    if params.values().any(|t| !t.is_finite()) {
        return Err(Error::input("grad_check parameters must be finite"));
    }
    let (_, analytic) = value_and_grad(&builder, params)?;
    let eval = |p: &NamedTensors| -> Result<f64> {
        let v = forward(&builder, p)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::numeric(format!("non-finite loss at perturbed point: {e}")),
                other => other,
            })?
            .0
            .item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric("non-finite loss at perturbed point"))
        }
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, tensor) in params {
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            probe.get_mut(name).expect("name from params").data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("name from params").data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("name from params").data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * eps);
            let a = analytic[name].data()[i];
            worst = worst.max((a - central).abs() / central.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Convenience for building a name → tensor map.
pub fn named<const N: usize>(items: [(&str, Tensor); N]) -> NamedTensors {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
