//! Central finite-difference gradients, used to validate backward rules.

use serde::Serialize;

use super::Tensor;
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients for one component.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub component: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Central differences of a scalar function with respect to `inputs[which]`.
///
/// `f` must be a pure function of its inputs.
pub fn finite_difference_grad<F>(mut f: F, inputs: &[Tensor], which: usize, h: f64) -> Result<Tensor>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let base = inputs[which].data().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        work[which].set_data(plus)?;
        let fp = f(&work)?;
        let mut minus = base.clone();
        minus[i] -= h;
        work[which].set_data(minus)?;
        let fm = f(&work)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(inputs[which].shape().to_vec(), grad)
}

/// `||a - b|| / max(||a||, ||b||)`, with a floor on the denominator so that
/// two vanishing gradients compare as equal.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.data().iter().zip(numeric.data()).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.data().iter().copied())
        .max(norm(&mut numeric.data().iter().copied()))
        .max(1e-10);
    diff / scale
}
