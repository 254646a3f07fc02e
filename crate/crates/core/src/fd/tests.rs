use super::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn reduced(dim: usize) -> ReducedProblem {
    ReducedProblem::from_parameters(0.05, 2f64.sqrt(), dim, 0.05, 2.0, 1.0).unwrap()
}

fn benchmark_grid() -> FdGrid {
    FdGrid::uniform(40.0, 4001, 2000).unwrap()
}

fn coarse_grid() -> FdGrid {
    FdGrid::uniform(40.0, 1001, 400).unwrap()
}

/// `e^{−rT} E[(K − X_T)⁺]` for `X` a GBM with drift `mu`.
fn european_put(p: &ReducedProblem, x: f64, tau: f64) -> f64 {
    if tau == 0.0 {
        return (p.strike - x).max(0.0);
    }
    let n = Normal::new(0.0, 1.0).unwrap();
    let sd = p.sigma_hat * tau.sqrt();
    let d1 = ((x / p.strike).ln() + (p.mu_hat + 0.5 * p.sigma_hat.powi(2)) * tau) / sd;
    let d2 = d1 - sd;
    (-p.rate * tau).exp() * (p.strike * n.cdf(-d2) - x * (p.mu_hat * tau).exp() * n.cdf(-d1))
}

#[test]
fn binomial_oracle_matches_closed_form_without_early_exercise_value() {
    // With r = 0 early exercise of a put is never strictly optimal.
    let p = ReducedProblem {
        mu_hat: 0.0,
        sigma_hat: 0.3,
        rate: 0.0,
        strike: 1.0,
        horizon: 1.0,
    };
    let tree = binomial_american_put(&p, 1.0, 5000).unwrap();
    assert!((tree - european_put(&p, 1.0, 1.0)).abs() < 1e-4, "{tree}");
}

#[test]
fn binomial_oracle_converges_and_dominates_european() {
    let p = reduced(10);
    let a = binomial_american_put(&p, 1.0, 2500).unwrap();
    let b = binomial_american_put(&p, 1.0, 5000).unwrap();
    assert!((a - b).abs() < 5e-4);
    assert!(b >= european_put(&p, 1.0, 1.0));
    assert!(b >= 1.0);
    assert!(binomial_american_put(&p, 1.0, 0).is_err());
}

#[test]
fn table_values_for_ten_and_hundred_assets() {
    let opts = SolverOptions::default();
    for (dim, expected) in [(10, 1.4958), (100, 1.5307)] {
        let p = reduced(dim);
        let v = solve_vi_1d(&p, &benchmark_grid(), &opts).unwrap().value_at(0.0, 1.0).unwrap();
        assert!((v - expected).abs() < 1e-3, "d={dim}: {v}");
        let tree = binomial_american_put(&p, 1.0, 5000).unwrap();
        assert!((v - tree).abs() < 2e-3, "d={dim}: fd {v} tree {tree}");
    }
}

#[test]
fn one_asset_agrees_with_binomial_oracle() {
    let p = reduced(1);
    let v = solve_vi_1d(&p, &benchmark_grid(), &SolverOptions::default()).unwrap().value_at(0.0, 1.0).unwrap();
    let tree = binomial_american_put(&p, 1.0, 5000).unwrap();
    assert!((v - tree).abs() < 2e-3, "fd {v} tree {tree}");
}

#[test]
fn obstacle_holds_everywhere_and_terminal_row_is_payoff() {
    let p = reduced(10);
    let sol = solve_vi_1d(&p, &coarse_grid(), &SolverOptions::default()).unwrap();
    let m = sol.grid.time_steps;
    for (i, &x) in sol.grid.nodes.iter().enumerate() {
        assert_eq!(sol.row(m)[i], (2.0 - x).max(0.0));
        for j in 0..=m {
            assert!(sol.row(j)[i] >= p.obstacle(x) - 1e-9, "row {j} node {i}");
        }
    }
}

#[test]
fn low_volatility_put_dominates_intrinsic_value() {
    let p = ReducedProblem {
        mu_hat: 0.05,
        sigma_hat: 0.01,
        rate: 0.05,
        strike: 2.0,
        horizon: 1.0,
    };
    let sol = solve_vi_1d(&p, &coarse_grid(), &SolverOptions::default()).unwrap();
    for (i, &x) in sol.grid.nodes.iter().enumerate() {
        assert!(sol.row(0)[i] >= (2.0 - x).max(0.0) - 1e-9);
    }
}

#[test]
fn zero_penalty_is_the_european_problem() {
    let p = reduced(10);
    let sol = solve_penalized_pde_1d(&p, &benchmark_grid(), 0.0, &SolverOptions::default()).unwrap();
    for x in [0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0] {
        let fd = sol.value_at(0.0, x).unwrap();
        let exact = european_put(&p, x, 1.0);
        assert!((fd - exact).abs() < 1e-3, "x={x}: fd {fd} exact {exact}");
    }
    // At x = 0 the index stays at zero: the discounted strike.
    assert!((sol.row(0)[0] - 2.0 * (-0.05f64).exp()).abs() < 1e-6);
}

#[test]
fn huge_penalty_matches_variational_inequality() {
    let p = reduced(10);
    let grid = coarse_grid();
    let opts = SolverOptions::default();
    let vi = solve_vi_1d(&p, &grid, &opts).unwrap();
    let pen = solve_penalized_pde_1d(&p, &grid, 1e7, &opts).unwrap();
    let diff = vi.values.max_abs_diff(&pen.values);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn penalized_solutions_increase_towards_the_inequality() {
    let p = reduced(10);
    let grid = coarse_grid();
    let opts = SolverOptions::default();
    let mut previous = solve_penalized_pde_1d(&p, &grid, 0.0, &opts).unwrap();
    for lambda in [5.0, 10.0, 20.0, 40.0, 80.0] {
        let next = solve_penalized_pde_1d(&p, &grid, lambda, &opts).unwrap();
        for (a, b) in previous.values.data().iter().zip(next.values.data()) {
            assert!(a <= &(b + 1e-9), "λ={lambda}: {a} > {b}");
        }
        previous = next;
    }
    let vi = solve_vi_1d(&p, &grid, &opts).unwrap();
    for (a, b) in previous.values.data().iter().zip(vi.values.data()) {
        assert!(a <= &(b + 1e-9));
    }
}

#[test]
fn penalty_error_decays_like_inverse_lambda() {
    let p = reduced(10);
    let lambdas = [5.0, 10.0, 20.0, 40.0, 80.0];
    let curve = penalty_error_curve(&p, &coarse_grid(), &lambdas, &SolverOptions::default(), Exec::Parallel).unwrap();
    for w in curve.windows(2) {
        assert!(w[1].1 <= w[0].1);
    }
    let (ls, es): (Vec<f64>, Vec<f64>) = curve.iter().cloned().unzip();
    let slope = convergence_slope(&ls, &es).unwrap();
    assert!(slope <= -0.8, "slope {slope}");
    let scaled: Vec<f64> = curve.iter().map(|(l, e)| l * e).collect();
    let hi = scaled.iter().cloned().fold(0.0, f64::max);
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(hi < 2.0 * lo, "{scaled:?}");
    assert!(penalty_error_curve(&p, &coarse_grid(), &[10.0, 5.0], &SolverOptions::default(), Exec::Sequential).is_err());
}

#[test]
fn interpolation_reproduces_nodes_and_linear_profiles() {
    let p = reduced(10);
    let grid = FdGrid::uniform(4.0, 5, 2).unwrap();
    // V(t, x) = 3 − x + t on every node.
    let data: Vec<f64> = (0..3)
        .flat_map(|j| grid.nodes.iter().map(move |x| 3.0 - x + 0.5 * j as f64).collect::<Vec<_>>())
        .collect();
    let sol = FdSolution {
        values: Array::new(vec![3, 5], data).unwrap(),
        grid,
        problem: p,
    };
    assert_eq!(interpolate(&sol, 0.5, 2.0).unwrap(), 1.5);
    assert!((interpolate(&sol, 0.25, 1.5).unwrap() - 1.75).abs() < 1e-15);
    assert!((interpolate(&sol, 1.0, 4.0).unwrap() - 0.0).abs() < 1e-15);
    assert!(matches!(interpolate(&sol, 1.5, 1.0), Err(Error::OutOfGrid { .. })));
    assert!(interpolate(&sol, 0.5, 4.5).is_err());
}

#[test]
fn spatial_refinement_and_truncation_are_converged() {
    let p = reduced(10);
    let r = refinement_study(&p, 40.0, 4001, 2000, 1.0, &SolverOptions::default(), Exec::Parallel).unwrap();
    assert!(r.dx_change < 1e-3, "{r:?}");
    assert!(r.dt_change < 1e-3, "{r:?}");
    let doubled = solve_vi_1d(&p, &FdGrid::uniform(80.0, 8001, 2000).unwrap(), &SolverOptions::default())
        .unwrap()
        .value_at(0.0, 1.0)
        .unwrap();
    assert!((doubled - r.base).abs() < 1e-4, "{doubled} vs {}", r.base);
}

#[test]
fn richardson_ratio_shows_first_order_or_better_in_space() {
    let p = reduced(10);
    let opts = SolverOptions::default();
    // Away from the free boundary, deep in the continuation region.
    let at = |count: usize| {
        solve_vi_1d(&p, &FdGrid::uniform(40.0, count, 1000).unwrap(), &opts)
            .unwrap()
            .value_at(0.0, 3.0)
            .unwrap()
    };
    let (v1, v2, v3) = (at(401), at(801), at(1601));
    let order = ((v1 - v2) / (v2 - v3)).abs().log2();
    assert!(order >= 1.0, "order {order}: {v1} {v2} {v3}");
}

#[test]
fn raising_the_terminal_data_never_lowers_the_solution() {
    let p = reduced(10);
    let grid = coarse_grid();
    // Converge each Newton solve well below the comparison tolerance.
    let opts = SolverOptions {
        tol: 1e-13,
        ..SolverOptions::default()
    };
    let base: Vec<f64> = grid.nodes.iter().map(|x| (2.0 - x).max(0.0)).collect();
    let raised: Vec<f64> = grid
        .nodes
        .iter()
        .zip(&base)
        .map(|(x, b)| b + 0.1 * (-(x - 2.5f64).powi(2)).exp())
        .collect();
    for constraint in [Constraint::None, Constraint::Penalty(9.95), Constraint::Obstacle] {
        let lo = solve_1d(&p, &grid, constraint, Some(&base), &opts).unwrap();
        let hi = solve_1d(&p, &grid, constraint, Some(&raised), &opts).unwrap();
        for (a, b) in lo.values.data().iter().zip(hi.values.data()) {
            assert!(b >= &(a - 1e-9), "{constraint:?}: {b} < {a}");
        }
    }
}

#[test]
fn newton_failure_names_the_step() {
    let p = reduced(10);
    let opts = SolverOptions {
        max_iterations: 1,
        ..SolverOptions::default()
    };
    match solve_vi_1d(&p, &coarse_grid(), &opts) {
        Err(Error::NoConvergence { step, iterations: 1 }) => assert!(step < 400),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut p = reduced(10);
    assert!(solve_penalized_pde_1d(&p, &coarse_grid(), -1.0, &SolverOptions::default()).is_err());
    assert!(FdGrid::uniform(40.0, 2, 10).is_err());
    assert!(FdGrid::new(vec![0.0, 2.0, 1.0], 10, 0.5).is_err());
    assert!(solve_vi_1d(&p, &FdGrid::uniform(1.5, 11, 10).unwrap(), &SolverOptions::default()).is_err());
    p.sigma_hat = 0.0;
    assert!(solve_vi_1d(&p, &coarse_grid(), &SolverOptions::default()).is_err());
}

#[test]
fn concentrated_grid_reaches_the_same_value() {
    let p = reduced(10);
    let grid = FdGrid::concentrated(40.0, 1001, 2000, 2.0, 0.5).unwrap();
    let v = solve_vi_1d(&p, &grid, &SolverOptions::default()).unwrap().value_at(0.0, 1.0).unwrap();
    assert!((v - 1.4958).abs() < 1e-3, "{v}");
}

#[test]
fn synthetic_slopes() {
    let hs = [0.1, 0.05, 0.025, 0.0125];
    let lin: Vec<f64> = hs.iter().map(|h| 3.0 * h).collect();
    let root: Vec<f64> = hs.iter().map(|h| 0.7 * h.sqrt()).collect();
    assert!((convergence_slope(&hs, &lin).unwrap() - 1.0).abs() < 1e-6);
    assert!((convergence_slope(&hs, &root).unwrap() - 0.5).abs() < 1e-6);
    assert!(convergence_slope(&hs[..2], &lin[..2]).is_err());
    assert!(convergence_slope(&[0.1, 0.1, 0.1], &[1.0, 2.0, 3.0]).is_err());
    assert!(convergence_slope(&hs, &[1.0, 0.0, 1.0, 1.0]).is_err());
}
