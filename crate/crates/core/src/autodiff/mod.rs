//! Reverse-mode automatic differentiation and the Adam optimizer.

mod adam;
mod real;
mod tape;

pub use adam::AdamState;
pub use real::Real;
pub use tape::{sigmoid, softplus, softplus_inv, Gradients, Matrix, Tape, Unary, Var};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiffError {
    #[error("matrix at node {node} is not positive definite{}", context_suffix(.context))]
    NotPositiveDefinite { node: usize, context: Option<String> },
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { node: usize, op: &'static str },
}

fn context_suffix(c: &Option<String>) -> String {
    c.as_ref().map(|s| format!(" ({s})")).unwrap_or_default()
}

/// A named parameter array.
pub type NamedArray = (String, Matrix);

/// Evaluates `expr` at `params` and returns its value and exact gradients.
///
/// `expr` receives one leaf per parameter, in order, and must return a
/// `1 × 1` node.
pub fn evaluate_with_gradients<F>(expr: F, params: &[NamedArray]) -> Result<(f64, Vec<NamedArray>), DiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = params.iter().map(|(_, v)| tape.leaf(v.clone())).collect();
    let out = expr(&tape, &leaves);
    tape.check()?;
    let value = out.scalar();
    if !value.is_finite() {
        let (node, op) = tape.first_non_finite().unwrap_or((out.index(), "output"));
        return Err(DiffError::NonFinite { node, op });
    }
    let grads = tape.gradients(out);
    let named = params
        .iter()
        .zip(&leaves)
        .map(|((name, _), leaf)| (name.clone(), grads.wrt(*leaf)))
        .collect();
    Ok((value, named))
}

/// Central finite differences of a scalar function of several arrays.
pub fn finite_difference<F>(f: F, params: &[Matrix], step: f64) -> Vec<Matrix>
where
    F: Fn(&[Matrix]) -> f64,
{
    let mut work: Vec<Matrix> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let mut g = Matrix::zeros(params[k].nrows(), params[k].ncols());
        for idx in 0..params[k].len() {
            let orig = work[k][idx];
            work[k][idx] = orig + step;
            let up = f(&work);
            work[k][idx] = orig - step;
            let down = f(&work);
            work[k][idx] = orig;
            g[idx] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}
