//! Finite-difference gradient verification.
//!
//! Used throughout the test suite to check analytic gradients against
//! central differences: `(f(x + eps) - f(x - eps)) / (2 eps)`. Agreement is
//! measured per entry as `|a - fd| / max(|a|, |fd|, 1e-3)` — the floor keeps
//! the comparison meaningful for near-zero gradients, where the difference
//! quotient itself carries roundoff of about `ulp(loss) / eps`.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Denominator floor for [`relative_error`]. Entries smaller than this are
/// compared absolutely at the tolerance times the floor.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Check the gradient of a scalar-valued function of several tensors.
///
/// `build` receives a fresh graph and one bound var per input tensor (in
/// order) and returns the scalar loss var. Returns the maximum relative
/// error over every entry of every input. Inputs are restored bit-exactly.
pub fn max_grad_error(
    inputs: &mut [Tensor],
    eps: f64,
    mut build: impl FnMut(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    for t in inputs.iter_mut() {
        t.set_requires_grad(true);
    }

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        g.backward(loss)?;
        inputs
            .iter()
            .map(|t| g.grad_of(t).expect("gradient-tracking input without grad").to_vec())
            .collect()
    };

    let mut eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[j];
            inputs[ti].data_mut()[j] = orig + eps;
            let up = eval(inputs)?;
            inputs[ti].data_mut()[j] = orig - eps;
            let down = eval(inputs)?;
            inputs[ti].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[ti][j], fd));
        }
    }
    Ok(worst)
}
