//! Central finite-difference gradient verification.
//!
//! Gradient checks run in 64-bit only: the truncation plus roundoff error of
//! central differences in f32 would drown the tolerances being asserted.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{CompGraph, Exec, NodeId};

/// A graph plus a fixed set of f64 bindings (parameters and inputs) to check
/// gradients against. Stochastic inputs must be bound to frozen draws so the
/// perturbed evaluations see the same noise.
pub struct GradCheckSetup<'a> {
    pub graph: &'a CompGraph,
    pub bindings: BTreeMap<String, Tensor<f64>>,
    pub loss: NodeId,
}

impl<'a> GradCheckSetup<'a> {
    pub fn new(graph: &'a CompGraph, loss: NodeId) -> Self {
        GradCheckSetup {
            graph,
            bindings: BTreeMap::new(),
            loss,
        }
    }

    pub fn bind(mut self, name: &str, t: Tensor<f64>) -> Self {
        self.bindings.insert(name.to_string(), t);
        self
    }

    fn loss_at(&self, values: &BTreeMap<String, Tensor<f64>>) -> Result<f64> {
        let mut exec = Exec::new(self.graph);
        for (name, t) in values {
            exec.bind(self.graph, name, t)?;
        }
        exec.forward(self.graph)?;
        let v = exec.scalar(self.loss);
        if !v.is_finite() {
            return Err(Error::GradCheck("non-finite perturbed loss".into()));
        }
        Ok(v)
    }
}

/// Checks the backward gradient of one leaf against central finite
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)`, element by element.
///
/// Returns the maximum relative error over the leaf's elements, with the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(setup: &GradCheckSetup, leaf: &str, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::GradCheck(format!(
            "eps {eps} outside [1e-6, 1e-4]"
        )));
    }
    let id = setup
        .graph
        .leaf(leaf)
        .ok_or_else(|| Error::Graph(format!("unknown leaf '{leaf}'")))?;

    // Analytic gradient once.
    let mut exec = Exec::new(setup.graph);
    for (name, t) in &setup.bindings {
        exec.bind(setup.graph, name, t)?;
    }
    exec.forward(setup.graph)?;
    exec.backward(setup.graph, setup.loss)?;
    let analytic = exec.grad(setup.graph, id);

    let base = setup
        .bindings
        .get(leaf)
        .ok_or_else(|| Error::MissingBinding(leaf.to_string()))?
        .clone();
    let mut values = setup.bindings.clone();

    let mut max_rel = 0.0f64;
    for i in 0..base.numel() {
        let orig = base.data()[i];

        let mut plus = base.clone();
        plus.data_mut()[i] = orig + eps;
        values.insert(leaf.to_string(), plus);
        let f_plus = setup.loss_at(&values)?;

        let mut minus = base.clone();
        minus.data_mut()[i] = orig - eps;
        values.insert(leaf.to_string(), minus);
        let f_minus = setup.loss_at(&values)?;

        let numeric = (f_plus - f_minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::GradCheck("non-finite finite difference".into()));
        }
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    values.insert(leaf.to_string(), base);
    Ok(max_rel)
}

/// Runs [`grad_check`] over every trainable leaf of the graph and returns
/// `(leaf, max_rel_error)` pairs in name order.
pub fn grad_check_all(setup: &GradCheckSetup, eps: f64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for name in setup.graph.param_names() {
        let err = grad_check(setup, &name, eps)?;
        out.push((name, err));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphBuilder;

    #[test]
    fn sum_of_squares_passes_tightly() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[3]).unwrap();
        let sq = b.pow_scalar(x, 2.0);
        let loss = b.sum(sq, None).unwrap();
        let g = b.finish();
        let setup = GradCheckSetup::new(&g, loss).bind(
            "x",
            Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
        );
        let err = grad_check(&setup, "x", 1e-5).unwrap();
        assert!(err < 1e-7, "max rel error {err}");
    }

    #[test]
    fn constant_graph_checks_exactly() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[2]).unwrap();
        let z = b.mul_scalar(x, 0.0);
        let loss = b.sum(z, None).unwrap();
        let g = b.finish();
        let setup =
            GradCheckSetup::new(&g, loss).bind("x", Tensor::<f64>::filled(&[2], 3.0));
        let err = grad_check(&setup, "x", 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_outside_contract_is_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[1]).unwrap();
        let loss = b.sum(x, None).unwrap();
        let g = b.finish();
        let setup =
            GradCheckSetup::new(&g, loss).bind("x", Tensor::<f64>::filled(&[1], 1.0));
        assert!(grad_check(&setup, "x", 1e-3).is_err());
        assert!(grad_check(&setup, "x", 1e-7).is_err());
    }
}
