use super::ReducedProblem;
use crate::error::{Error, Result};

/// Cox–Ross–Rubinstein tree for the American put on a one-dimensional GBM
/// with drift `mu_hat`, volatility `sigma_hat` and discount rate `r`:
/// up/down factors `e^{±σ̂√Δt}`, up-probability `(e^{μ̂Δt} − d)/(u − d)`,
/// exercise value `K − x` at every node.
pub fn binomial_american_put(problem: &ReducedProblem, x0: f64, steps: usize) -> Result<f64> {
    if steps < 1 {
        return Err(Error::Config("binomial tree needs at least one step".into()));
    }
    let dt = problem.horizon / steps as f64;
    let u = (problem.sigma_hat * dt.sqrt()).exp();
    let d = 1.0 / u;
    let q = ((problem.mu_hat * dt).exp() - d) / (u - d);
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!(
            "binomial tree with {steps} steps has up-probability {q} outside [0, 1]"
        )));
    }
    let disc = (-problem.rate * dt).exp();
    let k = problem.strike;
    // values[j] at level n corresponds to x0·u^j·d^{n−j} = x0·u^{2j−n}.
    let mut values: Vec<f64> = (0..=steps)
        .map(|j| (k - x0 * u.powi(2 * j as i32 - steps as i32)).max(0.0))
        .collect();
    for n in (0..steps).rev() {
        for j in 0..=n {
            let cont = disc * (q * values[j + 1] + (1.0 - q) * values[j]);
            let exercise = k - x0 * u.powi(2 * j as i32 - n as i32);
            values[j] = cont.max(exercise);
        }
    }
    Ok(values[0])
}
