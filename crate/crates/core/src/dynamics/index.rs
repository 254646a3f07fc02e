//! American put on the geometric-mean index of `d` independent geometric
//! Brownian motions.

use super::{Grid, ModelSpec, PathBatch};
use crate::diffgraph::Array;
use crate::error::{Error, Result};

/// `dX_j = μ X_j dt + σ X_j dW_j`, `j = 1..d`, with stopping payoff
/// `p(x) = K − G(x)`, terminal payoff `g = (K − G)⁺`, no running payoff,
/// where `G(x) = (x_1 ⋯ x_d)^{1/d}` is the geometric-mean index.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexPut {
    pub mu: f64,
    pub sigma: f64,
    pub strike: f64,
    pub rate: f64,
    pub horizon: f64,
    x0: Vec<f64>,
}

impl IndexPut {
    /// All assets start at 1.
    pub fn new(mu: f64, sigma: f64, strike: f64, dim: usize, rate: f64, horizon: f64) -> Result<Self> {
        Self::with_initial_state(mu, sigma, strike, vec![1.0; dim], rate, horizon)
    }

    pub fn with_initial_state(
        mu: f64,
        sigma: f64,
        strike: f64,
        x0: Vec<f64>,
        rate: f64,
        horizon: f64,
    ) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::Config("index dimension must be at least 1".into()));
        }
        if !(sigma >= 0.0 && horizon > 0.0 && [mu, strike, rate].iter().all(|v| v.is_finite())) {
            return Err(Error::Config("invalid index model parameters".into()));
        }
        Ok(Self {
            mu,
            sigma,
            strike,
            rate,
            horizon,
            x0,
        })
    }

    /// Drift and volatility of the one-dimensional index process.
    pub fn reduced(&self) -> (f64, f64) {
        index_reduce(self.mu, self.sigma, self.x0.len()).expect("dimension checked at construction")
    }
}

/// Real `d`-th root of the product, sign-preserving so that `d = 1` is the
/// identity even for negative Euler states.
pub fn geometric_mean(x: &[f64]) -> f64 {
    match x {
        [v] => *v,
        _ => {
            let prod: f64 = x.iter().product();
            prod.signum() * prod.abs().powf(1.0 / x.len() as f64)
        }
    }
}

/// `(μ̂, σ̂)` with `μ̂ = μ − σ²/2 + σ²/(2d)` and `σ̂ = σ/√d`: the geometric mean
/// of `d` i.i.d. GBMs is itself a GBM with these coefficients.
pub fn index_reduce(mu: f64, sigma: f64, dim: usize) -> Result<(f64, f64)> {
    if dim < 1 {
        return Err(Error::Config("index dimension must be at least 1".into()));
    }
    let d = dim as f64;
    let s2 = sigma * sigma;
    Ok((mu - s2 / 2.0 + s2 / (2.0 * d), sigma / d.sqrt()))
}

impl ModelSpec for IndexPut {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn noise_dim(&self) -> usize {
        self.x0.len()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rate(&self) -> f64 {
        self.rate
    }

    fn initial_state(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = self.mu * v;
        }
    }

    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        out.fill(0.0);
        for (j, v) in x.iter().enumerate() {
            out[j * d + j] = self.sigma * v;
        }
    }

    fn diffuse(&self, _t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        for ((o, v), w) in out.iter_mut().zip(x).zip(dw) {
            *o = self.sigma * v * w;
        }
    }

    fn running_payoff(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }

    fn terminal_payoff(&self, x: &[f64]) -> f64 {
        (self.strike - geometric_mean(x)).max(0.0)
    }

    fn stopping_payoff(&self, _t: f64, x: &[f64]) -> f64 {
        self.strike - geometric_mean(x)
    }

    /// `L(K − G) = −μ̂ G`.
    fn generator_of_stopping_payoff(&self, _t: f64, x: &[f64]) -> Option<f64> {
        Some(-self.reduced().0 * geometric_mean(x))
    }
}

/// Exact GBM states `X_{i+1} = X_i exp((μ − σ²/2) h + σ ΔW_i)` driven by the
/// given increments (`[B, N, n]`). Returns `[B, N + 1, n]`.
pub fn simulate_exact_gbm(mu: f64, sigma: f64, x0: &[f64], grid: &Grid, dw: &Array) -> Result<Array> {
    let shape = dw.shape();
    if shape.len() != 3 || shape[1] != grid.steps || shape[2] != x0.len() {
        return Err(Error::Dimension {
            op: "simulate_exact_gbm",
            left: vec![grid.steps, x0.len()],
            right: shape.to_vec(),
        });
    }
    let (b, steps, n) = (shape[0], shape[1], shape[2]);
    let drift = (mu - 0.5 * sigma * sigma) * grid.step();
    let mut out = Vec::with_capacity(b * (steps + 1) * n);
    for k in 0..b {
        let start = out.len();
        out.extend_from_slice(x0);
        for i in 0..steps {
            let w = &dw.data()[(k * steps + i) * n..(k * steps + i + 1) * n];
            for j in 0..n {
                let prev = out[start + i * n + j];
                out.push(prev * (drift + sigma * w[j]).exp());
            }
        }
    }
    Array::new(vec![b, steps + 1, n], out)
}

/// Per-step driver of the index: `ΔB = Σ_j ΔW_j / √n`. Returns `[B, N, 1]`.
pub fn reduced_increments(dw: &Array) -> Result<Array> {
    let shape = dw.shape();
    if shape.len() != 3 {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            len: dw.len(),
        });
    }
    let n = shape[2];
    let scale = 1.0 / (n as f64).sqrt();
    let data = dw.data().chunks_exact(n).map(|w| w.iter().sum::<f64>() * scale).collect();
    Array::new(vec![shape[0], shape[1], 1], data)
}

/// Largest `|log G(X) − log I|` over all paths and times, where `X` are the
/// `d`-dimensional exact states and `I` the one-dimensional exact index
/// states driven by the reduced increments.
pub fn index_path_identity_check(paths: &PathBatch, reduced: &Array) -> Result<f64> {
    let (b, steps) = (paths.batch(), paths.steps());
    if reduced.shape() != [b, steps + 1, 1] {
        return Err(Error::Dimension {
            op: "index_path_identity_check",
            left: vec![b, steps + 1, 1],
            right: reduced.shape().to_vec(),
        });
    }
    let d = paths.dim() as f64;
    let mut worst: f64 = 0.0;
    for k in 0..b {
        for i in 0..=steps {
            let log_g = paths.state(k, i).iter().map(|v| v.ln()).sum::<f64>() / d;
            let log_i = reduced.data()[k * (steps + 1) + i].ln();
            worst = worst.max((log_g - log_i).abs());
        }
    }
    Ok(worst)
}
