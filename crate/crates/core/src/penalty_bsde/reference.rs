//! Scalar implicit scheme `Y_i = E_i[Y_{i+1}] + f₁h + λ(−Y_i)⁺h`, evaluated
//! exactly on the recombining lattice of the Euler scheme driven by two-point
//! increments `ΔW = ±√h`.

use super::TransformedProblem;
use crate::dynamics::Grid;
use crate::error::{Error, Result};

/// Solves `y − λh(−y)⁺ = c`: `y = c` if `c ≥ 0`, else `y = c / (1 + λh)`.
pub fn implicit_step(c: f64, lambda: f64, h: f64) -> f64 {
    if c >= 0.0 {
        c
    } else {
        c / (1.0 + lambda * h)
    }
}

/// `Y₀` of the implicit scheme for a one-dimensional model whose Euler
/// lattice recombines (e.g. geometric Brownian motion).
pub fn implicit_reference_value(problem: &TransformedProblem<'_>, grid: &Grid) -> Result<f64> {
    Ok(implicit_reference_ladder(problem, grid)?[0][0])
}

/// All lattice values `Y_i(x_{i,j})`, `j = 0..=i` counting up-moves.
pub fn implicit_reference_ladder(problem: &TransformedProblem<'_>, grid: &Grid) -> Result<Vec<Vec<f64>>> {
    let m = problem.model;
    if m.dim() != 1 || m.noise_dim() != 1 {
        return Err(Error::Config("the lattice reference needs a one-dimensional model".into()));
    }
    let (h, steps) = (grid.step(), grid.steps);
    let sq = h.sqrt();
    let euler = |t: f64, x: f64, dw: f64| {
        let (mut b, mut s) = ([0.0], [0.0]);
        m.drift(t, &[x], &mut b);
        m.diffusion(t, &[x], &mut s);
        x + b[0] * h + s[0] * dw
    };
    let mut nodes = vec![vec![m.initial_state()[0]]];
    for i in 0..steps {
        let t = grid.time(i);
        let prev = &nodes[i];
        let mut next = Vec::with_capacity(i + 2);
        next.push(euler(t, prev[0], -sq));
        for j in 0..=i {
            let up = euler(t, prev[j], sq);
            if j < i {
                let down = euler(t, prev[j + 1], -sq);
                if (up - down).abs() > 1e-9 * up.abs().max(1.0) {
                    return Err(Error::Config("the Euler lattice of this model does not recombine".into()));
                }
            }
            next.push(up);
        }
        nodes.push(next);
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    values[steps] = nodes[steps].iter().map(|&x| problem.h1(&[x])).collect();
    for i in (0..steps).rev() {
        let t = grid.time(i);
        values[i] = (0..=i)
            .map(|j| {
                let expected = 0.5 * (values[i + 1][j] + values[i + 1][j + 1]);
                implicit_step(expected + problem.f1(t, &[nodes[i][j]]) * h, grid.lambda, h)
            })
            .collect();
    }
    Ok(values)
}
