//! Finite-difference gradient verification.
//!
//! [`check`] compares the analytic gradients of a scalar-valued computation
//! against central differences of its forward pass. The numeric side rebuilds
//! the graph from scratch for every perturbed coordinate, so it exercises
//! only the forward code and stays independent of the backward
//! implementation it verifies. Builders must therefore be deterministic
//! functions of their inputs (re-seed any RNG inside the closure).

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over all coordinates of all inputs.
    pub max_rel_error: f64,
    /// Coordinate count compared.
    pub coords: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(1e-6)
}

/// Evaluate the builder's scalar output at the given inputs.
fn eval<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.scalar(out))
}

/// Compare analytic and central-difference gradients of `build` with respect
/// to every coordinate of every input, at step `h`.
pub fn check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward_values(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(*v).numel()]))
        .collect();

    // Numeric pass, one coordinate at a time.
    let mut max_rel = 0.0f64;
    let mut coords = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let plus = eval(&build, &work)?;
            work[ti].data_mut()[ci] = orig - h;
            let minus = eval(&build, &work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_rel = max_rel.max(rel_error(analytic[ti][ci], numeric));
            coords += 1;
        }
    }
    Ok(GradCheck { max_rel_error: max_rel, coords })
}
