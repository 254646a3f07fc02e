//! One-dimensional finite-difference oracle for the American put on a GBM:
//! the variational inequality `max{LV − rV, p − V} = 0` and its penalized
//! approximation `V_t + LV − rV + λ(p − V)⁺ = 0`, with `p = K − x`,
//! `LV = ½σ̂²x²V'' + μ̂xV'` and terminal value `(K − x)⁺`.
//!
//! Crank–Nicolson in time (Rannacher start: the first step is two implicit
//! Euler half-steps), central differences in space with upwinding where the
//! cell Péclet number `|μ̂x|Δx / (½σ̂²x²)` exceeds 2, and a penalized Newton
//! iteration per step.
//! At `x = 0` the equation degenerates to `V_t − rV + λ(K − V)⁺ = 0`, which
//! is solved as is; `V(t, x_max) = 0`.

mod binomial;
mod tridiag;

use serde::{Deserialize, Serialize};

pub use binomial::binomial_american_put;
pub use tridiag::solve_tridiagonal;

use crate::diffgraph::Array;
use crate::dynamics::{index_reduce, IndexPut};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Coefficients of the reduced one-dimensional problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedProblem {
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub rate: f64,
    pub strike: f64,
    pub horizon: f64,
}

impl ReducedProblem {
    pub fn from_index(model: &IndexPut) -> Self {
        let (mu_hat, sigma_hat) = model.reduced();
        Self {
            mu_hat,
            sigma_hat,
            rate: model.rate,
            strike: model.strike,
            horizon: model.horizon,
        }
    }

    pub fn from_parameters(mu: f64, sigma: f64, dim: usize, rate: f64, strike: f64, horizon: f64) -> Result<Self> {
        let (mu_hat, sigma_hat) = index_reduce(mu, sigma, dim)?;
        Ok(Self {
            mu_hat,
            sigma_hat,
            rate,
            strike,
            horizon,
        })
    }

    /// Stopping payoff `p(x) = K − x`.
    pub fn obstacle(&self, x: f64) -> f64 {
        self.strike - x
    }
}

/// Space nodes on `[0, x_max]`, time step count and scheme weight
/// (`theta = 0.5` is Crank–Nicolson, `1` fully implicit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdGrid {
    pub nodes: Vec<f64>,
    pub time_steps: usize,
    pub theta: f64,
}

impl FdGrid {
    pub fn uniform(x_max: f64, count: usize, time_steps: usize) -> Result<Self> {
        if count < 3 {
            return Err(Error::Config("finite-difference grid needs at least 3 nodes".into()));
        }
        let dx = x_max / (count - 1) as f64;
        let mut nodes: Vec<f64> = (0..count).map(|i| i as f64 * dx).collect();
        nodes[count - 1] = x_max;
        Self::new(nodes, time_steps, 0.5)
    }

    /// Nodes concentrated around `center` by a sinh stretching; smaller
    /// `width` means stronger concentration.
    pub fn concentrated(x_max: f64, count: usize, time_steps: usize, center: f64, width: f64) -> Result<Self> {
        if count < 3 || !(width > 0.0) || !(0.0 < center && center < x_max) {
            return Err(Error::Config("invalid concentrated grid parameters".into()));
        }
        let c1 = (-center / width).asinh();
        let c2 = ((x_max - center) / width).asinh();
        let mut nodes: Vec<f64> = (0..count)
            .map(|i| {
                let xi = i as f64 / (count - 1) as f64;
                center + width * (c2 * xi + c1 * (1.0 - xi)).sinh()
            })
            .collect();
        nodes[0] = 0.0;
        nodes[count - 1] = x_max;
        Self::new(nodes, time_steps, 0.5)
    }

    pub fn new(nodes: Vec<f64>, time_steps: usize, theta: f64) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::Config("finite-difference grid needs at least 3 nodes".into()));
        }
        if nodes[0] != 0.0 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("space nodes must start at 0 and increase strictly".into()));
        }
        if time_steps < 1 || !(0.0..=1.0).contains(&theta) {
            return Err(Error::Config("need at least one time step and theta in [0, 1]".into()));
        }
        Ok(Self {
            nodes,
            time_steps,
            theta,
        })
    }

    pub fn x_max(&self) -> f64 {
        *self.nodes.last().expect("validated non-empty")
    }

    pub fn with_theta(mut self, theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::Config("theta must lie in [0, 1]".into()));
        }
        self.theta = theta;
        Ok(self)
    }
}

/// Newton/penalty controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when `max |ΔV| / max(1, |V|) < tol` or the active set settles.
    pub tol: f64,
    /// Discrete penalty enforcing the obstacle in the variational inequality.
    pub penalty: f64,
    pub max_iterations: usize,
    /// Replace the first Crank–Nicolson step by two implicit half-steps.
    pub rannacher: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            penalty: 1e7,
            max_iterations: 100,
            rannacher: true,
        }
    }
}

/// How the obstacle `V ≥ p` enters each time step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    /// No early exercise.
    None,
    /// Source term `λ(p − V)⁺` with the given λ (per unit time).
    Penalty(f64),
    /// Variational inequality, enforced by the discrete penalty of
    /// [`SolverOptions::penalty`].
    Obstacle,
}

/// Values on the grid; row `j` holds time `j·T/M`, row `M` the terminal data.
#[derive(Clone, Debug)]
pub struct FdSolution {
    pub values: Array,
    pub grid: FdGrid,
    pub problem: ReducedProblem,
}

impl FdSolution {
    pub fn row(&self, j: usize) -> &[f64] {
        self.values.row(j)
    }

    pub fn time(&self, j: usize) -> f64 {
        self.problem.horizon * j as f64 / self.grid.time_steps as f64
    }

    pub fn value_at(&self, t: f64, x: f64) -> Result<f64> {
        interpolate(self, t, x)
    }
}

/// Variational inequality solved by penalized Newton iteration.
pub fn solve_vi_1d(problem: &ReducedProblem, grid: &FdGrid, opts: &SolverOptions) -> Result<FdSolution> {
    solve_1d(problem, grid, Constraint::Obstacle, None, opts)
}

/// Penalized PDE with the model's finite λ; `lambda = 0` is the European problem.
pub fn solve_penalized_pde_1d(
    problem: &ReducedProblem,
    grid: &FdGrid,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<FdSolution> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("penalty must be non-negative, got {lambda}")));
    }
    solve_1d(problem, grid, Constraint::Penalty(lambda), None, opts)
}

/// Backward time stepping from `terminal` (default `(K − x)⁺`).
pub fn solve_1d(
    problem: &ReducedProblem,
    grid: &FdGrid,
    constraint: Constraint,
    terminal: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<FdSolution> {
    if !(problem.sigma_hat > 0.0) {
        return Err(Error::Config("reduced volatility must be positive".into()));
    }
    if !(grid.x_max() > problem.strike) {
        return Err(Error::Config("x_max must exceed the strike".into()));
    }
    let n = grid.nodes.len();
    let m = grid.time_steps;
    let operator = Operator::assemble(problem, &grid.nodes);
    let obstacle: Vec<f64> = grid.nodes.iter().map(|&x| problem.obstacle(x)).collect();
    let mut current: Vec<f64> = match terminal {
        Some(v) if v.len() == n => v.to_vec(),
        Some(v) => {
            return Err(Error::Dimension {
                op: "solve_1d terminal",
                left: vec![n],
                right: vec![v.len()],
            })
        }
        None => obstacle.iter().map(|p| p.max(0.0)).collect(),
    };
    current[n - 1] = 0.0;
    let mut values = vec![0.0; (m + 1) * n];
    values[m * n..].copy_from_slice(&current);
    let dt = problem.horizon / m as f64;
    let stepper = Stepper {
        operator: &operator,
        obstacle: &obstacle,
        constraint,
        opts,
    };
    for j in (0..m).rev() {
        current = if opts.rannacher && j == m - 1 {
            let half = stepper.step(&current, 0.5 * dt, 1.0, j)?;
            stepper.step(&half, 0.5 * dt, 1.0, j)?
        } else {
            stepper.step(&current, dt, grid.theta, j)?
        };
        values[j * n..(j + 1) * n].copy_from_slice(&current);
    }
    Ok(FdSolution {
        values: Array::new(vec![m + 1, n], values)?,
        grid: grid.clone(),
        problem: *problem,
    })
}

/// Tridiagonal discretization of `LV − rV`; the last row is the Dirichlet
/// boundary and is left zero.
struct Operator {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Operator {
    fn assemble(problem: &ReducedProblem, nodes: &[f64]) -> Self {
        let n = nodes.len();
        let (mu, s2, r) = (problem.mu_hat, problem.sigma_hat * problem.sigma_hat, problem.rate);
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        diag[0] = -r;
        for i in 1..n - 1 {
            let x = nodes[i];
            let (hm, hp) = (x - nodes[i - 1], nodes[i + 1] - x);
            let diffusion = 0.5 * s2 * x * x;
            let dlo = 2.0 * diffusion / (hm * (hm + hp));
            let dhi = 2.0 * diffusion / (hp * (hm + hp));
            let drift = mu * x;
            // Cell Péclet number |b|Δx/D with D = ½σ̂²x²; up to 2 the central
            // stencil keeps both off-diagonals non-negative.
            let peclet = (drift * hm.max(hp)).abs() / diffusion;
            let (mut lo, mut hi, mut centre) = (dlo, dhi, -(dlo + dhi) - r);
            if peclet <= 2.0 {
                lo -= drift / (hm + hp);
                hi += drift / (hm + hp);
            } else if drift > 0.0 {
                hi += drift / hp;
                centre -= drift / hp;
            } else {
                lo -= drift / hm;
                centre += drift / hm;
            }
            lower[i] = lo;
            diag[i] = centre;
            upper[i] = hi;
        }
        Self { lower, diag, upper }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.lower[i] * v[i - 1];
            }
            if i + 1 < n {
                s += self.upper[i] * v[i + 1];
            }
            out[i] = s;
        }
    }
}

struct Stepper<'a> {
    operator: &'a Operator,
    obstacle: &'a [f64],
    constraint: Constraint,
    opts: &'a SolverOptions,
}

impl Stepper<'_> {
    /// One θ-step from `next` (later time) back by `dt`; `index` names the
    /// target time row in errors.
    fn step(&self, next: &[f64], dt: f64, theta: f64, index: usize) -> Result<Vec<f64>> {
        let n = next.len();
        let op = self.operator;
        let mut explicit = vec![0.0; n];
        op.apply(next, &mut explicit);
        let mut rhs: Vec<f64> = next.iter().zip(&explicit).map(|(v, a)| v + (1.0 - theta) * dt * a).collect();
        let lower: Vec<f64> = op.lower.iter().map(|l| -theta * dt * l).collect();
        let upper: Vec<f64> = op.upper.iter().map(|u| -theta * dt * u).collect();
        let base: Vec<f64> = op.diag.iter().map(|d| 1.0 - theta * dt * d).collect();
        // Dirichlet row at x_max.
        let mut lower = lower;
        lower[n - 1] = 0.0;
        rhs[n - 1] = 0.0;
        let mut base = base;
        base[n - 1] = 1.0;

        let kappa = match self.constraint {
            Constraint::None => 0.0,
            Constraint::Penalty(lambda) => lambda * dt,
            Constraint::Obstacle => self.opts.penalty,
        };
        if kappa == 0.0 {
            return solve_tridiagonal(&lower, &base, &upper, &rhs);
        }
        let active_set = |v: &[f64]| -> Vec<bool> {
            (0..n).map(|i| i + 1 < n && self.obstacle[i] - v[i] > 0.0).collect()
        };
        let mut iterate = next.to_vec();
        let mut active = active_set(&iterate);
        for _ in 0..self.opts.max_iterations {
            let diag: Vec<f64> = (0..n).map(|i| base[i] + if active[i] { kappa } else { 0.0 }).collect();
            let b: Vec<f64> = (0..n)
                .map(|i| rhs[i] + if active[i] { kappa * self.obstacle[i] } else { 0.0 })
                .collect();
            let solved = solve_tridiagonal(&lower, &diag, &upper, &b)?;
            let change = solved
                .iter()
                .zip(&iterate)
                .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
                .fold(0.0, f64::max);
            iterate = solved;
            let implied = active_set(&iterate);
            // Either the update is below tolerance or the solution reproduces
            // the active set it was computed with, making it exact.
            if change < self.opts.tol || implied == active {
                return Ok(iterate);
            }
            active = implied;
        }
        Err(Error::NoConvergence {
            step: index,
            iterations: self.opts.max_iterations,
        })
    }
}

/// Bilinear interpolation in `(t, x)`.
pub fn interpolate(sol: &FdSolution, t: f64, x: f64) -> Result<f64> {
    let nodes = &sol.grid.nodes;
    let horizon = sol.problem.horizon;
    let m = sol.grid.time_steps;
    let slack = 1e-12 * horizon.max(1.0);
    if !(t >= -slack && t <= horizon + slack && x >= 0.0 && x <= sol.grid.x_max()) {
        return Err(Error::OutOfGrid { t, x });
    }
    let s = (t.clamp(0.0, horizon) / horizon) * m as f64;
    let j = (s.floor() as usize).min(m - 1);
    let wt = s - j as f64;
    let i = nodes.partition_point(|&v| v <= x).clamp(1, nodes.len() - 1) - 1;
    let wx = (x - nodes[i]) / (nodes[i + 1] - nodes[i]);
    let at = |row: usize| {
        let r = sol.row(row);
        if wx == 0.0 {
            r[i]
        } else {
            r[i] * (1.0 - wx) + r[i + 1] * wx
        }
    };
    Ok(if wt == 0.0 {
        at(j)
    } else {
        at(j) * (1.0 - wt) + at(j + 1) * wt
    })
}

/// `(λ, max over the grid of V − V^λ)` for each λ; solves run under `exec`.
pub fn penalty_error_curve(
    problem: &ReducedProblem,
    grid: &FdGrid,
    lambdas: &[f64],
    opts: &SolverOptions,
    exec: Exec,
) -> Result<Vec<(f64, f64)>> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) || lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("penalties must be positive and strictly increasing".into()));
    }
    let solutions = exec.map(lambdas.len() + 1, |k| match k {
        0 => solve_vi_1d(problem, grid, opts),
        _ => solve_penalized_pde_1d(problem, grid, lambdas[k - 1], opts),
    });
    let mut solutions = solutions.into_iter();
    let vi = solutions.next().expect("at least one solve")?;
    lambdas
        .iter()
        .zip(solutions)
        .map(|(&lambda, sol)| {
            let sol = sol?;
            let err = vi
                .values
                .data()
                .iter()
                .zip(sol.values.data())
                .map(|(a, b)| a - b)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((lambda, err))
        })
        .collect()
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn convergence_slope(hs: &[f64], errors: &[f64]) -> Result<f64> {
    if hs.len() != errors.len() || hs.len() < 3 {
        return Err(Error::DegenerateFit("need at least three (h, error) pairs"));
    }
    if hs.iter().chain(errors).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateFit("step sizes and errors must be positive"));
    }
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx < 1e-300 {
        return Err(Error::DegenerateFit("step sizes must not all coincide"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Value at `(0, x0)` on a base grid and its sensitivity to halving Δx and Δt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub base: f64,
    pub half_dx: f64,
    pub half_dt: f64,
    pub dx_change: f64,
    pub dt_change: f64,
}

/// Refinement diagnostics for the variational inequality on a uniform grid.
pub fn refinement_study(
    problem: &ReducedProblem,
    x_max: f64,
    count: usize,
    time_steps: usize,
    x0: f64,
    opts: &SolverOptions,
    exec: Exec,
) -> Result<Refinement> {
    let grids = [
        FdGrid::uniform(x_max, count, time_steps)?,
        FdGrid::uniform(x_max, 2 * count - 1, time_steps)?,
        FdGrid::uniform(x_max, count, 2 * time_steps)?,
    ];
    let values = exec.map(3, |k| solve_vi_1d(problem, &grids[k], opts).and_then(|s| interpolate(&s, 0.0, x0)));
    let mut values = values.into_iter();
    let base = values.next().expect("three solves")?;
    let half_dx = values.next().expect("three solves")?;
    let half_dt = values.next().expect("three solves")?;
    Ok(Refinement {
        base,
        half_dx,
        half_dt,
        dx_change: (half_dx - base).abs(),
        dt_change: (half_dt - base).abs(),
    })
}

#[cfg(test)]
mod tests;
