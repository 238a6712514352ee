//! Central-difference gradient oracle.
//!
//! This is the verification instrument for every differentiable op in the
//! crate: build the op under a fresh graph, backward once, then compare each
//! leaf gradient against (f(x+h) - f(x-h)) / 2h computed by re-running the
//! forward pass.

use super::{Bindings, Graph, NodeRef, Tensor};
use crate::error::{CoreError, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} coords (tol {:.1e}) -> {}",
            self.name,
            self.max_rel_err,
            self.checked,
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Relative error with an absolute floor of 1, so near-zero gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central differences of a scalar function of a flat vector.
pub fn central_diff<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let keep = xs[i];
        xs[i] = keep + step;
        let fp = f(&xs)?;
        xs[i] = keep - step;
        let fm = f(&xs)?;
        xs[i] = keep;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::NonFinite("central_diff"));
        }
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Check one graph-built function. `f` receives leaves for each input tensor
/// and returns any node; a non-scalar result is sum-reduced.
pub fn check_op<F>(name: &str, f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeRef]) -> Result<NodeRef>,
{
    let eval = |flat: &[f64]| -> Result<(Graph, Vec<NodeRef>, NodeRef)> {
        let mut g = Graph::new();
        let mut refs = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for t in inputs {
            let vals = flat[offset..offset + t.len()].to_vec();
            offset += t.len();
            let leaf = Tensor::new(t.shape().to_vec(), vals)?.requires_grad();
            refs.push(g.leaf(leaf));
        }
        let out = f(&mut g, &refs)?;
        let out = if g.value(out).len() == 1 { out } else { g.sum(out) };
        Ok((g, refs, out))
    };

    let flat0: Vec<f64> = inputs.iter().flat_map(|t| t.values().iter().copied()).collect();

    // Autodiff gradient at the base point.
    let (mut g, refs, out) = eval(&flat0)?;
    if !g.value(out).is_finite() {
        return Err(CoreError::NonFinite("gradcheck forward"));
    }
    g.backward(out)?;
    let mut auto = Vec::with_capacity(flat0.len());
    for (r, t) in refs.iter().zip(inputs) {
        match g.grad(*r) {
            Some(gr) => auto.extend_from_slice(gr),
            None => auto.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }

    // Finite-difference gradient with fresh forward passes.
    let fd = central_diff(
        |flat| {
            let (g, _, out) = eval(flat)?;
            Ok(g.value(out).values()[0])
        },
        &flat0,
        step,
    )?;

    let max_rel_err = auto
        .iter()
        .zip(&fd)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        tol,
        checked: flat0.len(),
    })
}

/// Check a forward pass that binds named parameters through [`Bindings`]:
/// the gradient of the (sum-reduced) output is validated against central
/// differences for the input tensor and every bound parameter.
pub fn check_bound<F>(
    name: &str,
    forward: F,
    input: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeRef, &mut Bindings) -> Result<NodeRef>,
{
    use std::collections::BTreeMap;

    // Base pass: learn the parameter set and collect autodiff gradients.
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = g.leaf(input.clone().requires_grad());
    let out = forward(&mut g, x, &mut b)?;
    let out = if g.value(out).len() == 1 { out } else { g.sum(out) };
    if !g.value(out).is_finite() {
        return Err(CoreError::NonFinite("gradcheck forward"));
    }
    g.backward(out)?;

    let mut auto = Vec::new();
    match g.grad(x) {
        Some(gr) => auto.extend_from_slice(gr),
        None => auto.extend(std::iter::repeat_n(0.0, input.len())),
    }
    let params: Vec<(String, Vec<f64>)> = b
        .params()
        .iter()
        .map(|(n, r)| (n.clone(), g.value(*r).values().to_vec()))
        .collect();
    for (_, r) in b.params() {
        match g.grad(*r) {
            Some(gr) => auto.extend_from_slice(gr),
            None => auto.extend(std::iter::repeat_n(0.0, g.value(*r).len())),
        }
    }

    // Flat layout: input values, then parameters in bind order.
    let mut flat: Vec<f64> = input.values().to_vec();
    for (_, v) in &params {
        flat.extend_from_slice(v);
    }
    let eval = |flat: &[f64]| -> Result<f64> {
        let mut overrides = BTreeMap::new();
        let mut offset = input.len();
        for (n, v) in &params {
            overrides.insert(n.clone(), flat[offset..offset + v.len()].to_vec());
            offset += v.len();
        }
        let mut g = Graph::new();
        let mut b = Bindings::with_overrides(overrides);
        let x = g.leaf(Tensor::new(input.shape().to_vec(), flat[..input.len()].to_vec())?);
        let out = forward(&mut g, x, &mut b)?;
        let out = if g.value(out).len() == 1 { out } else { g.sum(out) };
        Ok(g.value(out).values()[0])
    };
    let fd = central_diff(eval, &flat, step)?;

    let max_rel_err = auto
        .iter()
        .zip(&fd)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        tol,
        checked: flat.len(),
    })
}

/// Default step and tolerance used by the gradient suite.
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
