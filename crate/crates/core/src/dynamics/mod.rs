//! Optimal stopping problems and the Euler–Maruyama path simulator.

mod index;
mod rng;

use std::io::Write;

pub use index::{
    geometric_mean, index_path_identity_check, index_reduce, reduced_increments,
    simulate_exact_gbm, IndexPut,
};
pub use rng::PathStream;

use crate::diffgraph::Array;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// States beyond this magnitude abort the simulation.
pub const EXPLOSION_BOUND: f64 = 1e12;

/// One finite-horizon optimal stopping problem: the state SDE
/// `dX = b(t,X) dt + σ(t,X) dW` together with the running payoff `f`,
/// terminal payoff `g`, stopping payoff `p` and discount rate `r`.
///
/// Implementors are trusted to satisfy the usual Lipschitz/Hölder regularity
/// and the lower bound on `Lp − rp + f`; nothing here checks them.
pub trait ModelSpec: Send + Sync {
    /// State dimension `d`.
    fn dim(&self) -> usize;
    /// Brownian dimension `n`.
    fn noise_dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn rate(&self) -> f64;
    fn initial_state(&self) -> &[f64];

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// Diffusion matrix `σ(t, x)`, `d × n` row-major.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `σ(t, x) · dw`. Override when σ has structure worth exploiting.
    fn diffuse(&self, t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        let (d, n) = (self.dim(), self.noise_dim());
        let mut sigma = vec![0.0; d * n];
        self.diffusion(t, x, &mut sigma);
        for (i, o) in out.iter_mut().enumerate() {
            *o = sigma[i * n..(i + 1) * n].iter().zip(dw).map(|(s, w)| s * w).sum();
        }
    }

    fn running_payoff(&self, t: f64, x: &[f64]) -> f64;
    fn terminal_payoff(&self, x: &[f64]) -> f64;
    fn stopping_payoff(&self, t: f64, x: &[f64]) -> f64;

    /// `h(x) = max(g(x), p(T, x))`.
    fn exercise_payoff(&self, x: &[f64]) -> f64 {
        self.terminal_payoff(x).max(self.stopping_payoff(self.horizon(), x))
    }

    /// `(L p)(t, x)` in closed form, when the model knows it.
    fn generator_of_stopping_payoff(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// Penalty parameter choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Penalty {
    /// `λ = 1/√h`.
    Auto,
    Value(f64),
}

/// Uniform partition of `[0, T]` into `steps` intervals plus the penalty λ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub horizon: f64,
    pub steps: usize,
    pub lambda: f64,
}

impl Grid {
    pub fn new(horizon: f64, steps: usize, penalty: Penalty) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let h = horizon / steps as f64;
        let lambda = match penalty {
            Penalty::Auto => 1.0 / h.sqrt(),
            Penalty::Value(l) if l >= 0.0 && l.is_finite() => l,
            Penalty::Value(l) => {
                return Err(Error::Config(format!("penalty must be non-negative, got {l}")))
            }
        };
        Ok(Self {
            horizon,
            steps,
            lambda,
        })
    }

    /// Step size `h = T / N`.
    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.step()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// Simulated Euler states together with the increments that produced them.
#[derive(Clone, Debug)]
pub struct PathBatch {
    /// `[B, N + 1, d]`
    pub states: Array,
    /// `[B, N, n]`
    pub dw: Array,
    /// `[N + 1]`, `times[i] = i·h`
    pub times: Vec<f64>,
}

impl PathBatch {
    pub fn batch(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.dw.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    pub fn noise_dim(&self) -> usize {
        self.dw.shape()[2]
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let d = self.dim();
        let off = (path * (self.steps() + 1) + step) * d;
        &self.states.data()[off..off + d]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let n = self.noise_dim();
        let off = (path * self.steps() + step) * n;
        &self.dw.data()[off..off + n]
    }

    /// FNV-1a over the bit patterns of all increments, in path-major order.
    pub fn increment_checksum(&self) -> u64 {
        fnv1a(self.dw.data().iter().flat_map(|v| v.to_bits().to_le_bytes()))
    }

    /// Columnar dump: header `path,step,t,x0..x{d-1},dw0..dw{n-1}`, one row
    /// per path and step; the increment columns are empty on the last step.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (d, n, steps) = (self.dim(), self.noise_dim(), self.steps());
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..d).map(|j| format!("x{j}")));
        header.extend((0..n).map(|j| format!("dw{j}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.batch() {
            for i in 0..=steps {
                write!(w, "{k},{i},{}", self.times[i])?;
                for v in self.state(k, i) {
                    write!(w, ",{v}")?;
                }
                if i < steps {
                    for v in self.increment(k, i) {
                        write!(w, ",{v}")?;
                    }
                } else {
                    for _ in 0..n {
                        write!(w, ",")?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Euler–Maruyama paths `X_{i+1} = X_i + b(t_i, X_i) h + σ(t_i, X_i) ΔW_i`.
///
/// Path `k` draws its increments from its own counter-based stream, so its
/// trajectory depends only on `(stream, k)`: not on the batch size, not on
/// the execution policy.
pub fn simulate_euler(
    model: &dyn ModelSpec,
    grid: &Grid,
    batch: usize,
    stream: PathStream,
    exec: Exec,
) -> Result<PathBatch> {
    if batch < 1 {
        return Err(Error::EmptyBatch("simulate_euler"));
    }
    let (d, n, steps) = (model.dim(), model.noise_dim(), grid.steps);
    if model.initial_state().len() != d {
        return Err(Error::Dimension {
            op: "simulate_euler x0",
            left: vec![d],
            right: vec![model.initial_state().len()],
        });
    }
    let h = grid.step();
    let paths = exec.map(batch, |k| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = stream.path_rng(k as u64);
        let mut states = Vec::with_capacity((steps + 1) * d);
        let mut dw = vec![0.0; steps * n];
        rng::fill_increments(&mut rng, h, &mut dw);
        states.extend_from_slice(model.initial_state());
        let mut drift = vec![0.0; d];
        let mut noise = vec![0.0; d];
        for i in 0..steps {
            let t = grid.time(i);
            let x = &states[i * d..(i + 1) * d];
            model.drift(t, x, &mut drift);
            model.diffuse(t, x, &dw[i * n..(i + 1) * n], &mut noise);
            for j in 0..d {
                let next = states[i * d + j] + drift[j] * h + noise[j];
                if !next.is_finite() || next.abs() > EXPLOSION_BOUND {
                    return Err(Error::StateExplosion {
                        path: k,
                        step: i + 1,
                    });
                }
                states.push(next);
            }
        }
        Ok((states, dw))
    });
    let mut states = Vec::with_capacity(batch * (steps + 1) * d);
    let mut dw = Vec::with_capacity(batch * steps * n);
    for p in paths {
        let (s, w) = p?;
        states.extend(s);
        dw.extend(w);
    }
    Ok(PathBatch {
        states: Array::new(vec![batch, steps + 1, d], states)?,
        dw: Array::new(vec![batch, steps, n], dw)?,
        times: grid.times(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Zero drift and diffusion.
    struct Frozen(Vec<f64>);

    impl ModelSpec for Frozen {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn noise_dim(&self) -> usize {
            2
        }
        fn horizon(&self) -> f64 {
            1.0
        }
        fn rate(&self) -> f64 {
            0.0
        }
        fn initial_state(&self) -> &[f64] {
            &self.0
        }
        fn drift(&self, _: f64, _: &[f64], out: &mut [f64]) {
            out.fill(0.0)
        }
        fn diffusion(&self, _: f64, _: &[f64], out: &mut [f64]) {
            out.fill(0.0)
        }
        fn running_payoff(&self, _: f64, _: &[f64]) -> f64 {
            0.0
        }
        fn terminal_payoff(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn stopping_payoff(&self, _: f64, _: &[f64]) -> f64 {
            0.0
        }
    }

    fn gbm(dim: usize) -> IndexPut {
        IndexPut::new(0.05, 2f64.sqrt(), 2.0, dim, 0.05, 1.0).unwrap()
    }

    #[test]
    fn auto_penalty_is_inverse_root_step() {
        let g = Grid::new(1.0, 99, Penalty::Auto).unwrap();
        assert!((g.lambda - 9.9499).abs() < 1e-4);
        assert!(Grid::new(1.0, 0, Penalty::Auto).is_err());
        assert!(Grid::new(1.0, 4, Penalty::Value(-1.0)).is_err());
    }

    #[test]
    fn frozen_dynamics_stay_at_x0() {
        let m = Frozen(vec![1.5, -2.0]);
        let g = Grid::new(1.0, 7, Penalty::Auto).unwrap();
        let p = simulate_euler(&m, &g, 5, PathStream::new(3, 0), Exec::Parallel).unwrap();
        for k in 0..5 {
            for i in 0..=7 {
                assert_eq!(p.state(k, i), &[1.5, -2.0]);
            }
        }
        assert_eq!(p.times[0], 0.0);
        assert!((p.times[7] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn path_depends_only_on_seed_and_index() {
        let m = gbm(3);
        let g = Grid::new(1.0, 10, Penalty::Auto).unwrap();
        let small = simulate_euler(&m, &g, 4, PathStream::new(9, 2), Exec::Sequential).unwrap();
        let large = simulate_euler(&m, &g, 32, PathStream::new(9, 2), Exec::Parallel).unwrap();
        let n = small.states.len();
        assert_eq!(small.states.data(), &large.states.data()[..n]);
        let other = simulate_euler(&m, &g, 4, PathStream::new(9, 3), Exec::Sequential).unwrap();
        assert_ne!(small.dw.data(), other.dw.data());
    }

    #[test]
    fn increment_statistics() {
        let m = gbm(1);
        let g = Grid::new(1.0, 50, Penalty::Auto).unwrap();
        let b = 4000;
        let p = simulate_euler(&m, &g, b, PathStream::new(1, 0), Exec::Parallel).unwrap();
        let w = p.dw.data();
        let count = w.len() as f64;
        let mean = w.iter().sum::<f64>() / count;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let h = g.step();
        assert!(mean.abs() < 4.0 * h.sqrt() / count.sqrt(), "mean {mean}");
        assert!((var / h - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn explosion_is_reported_with_path_and_step() {
        let m = IndexPut::new(5e3, 0.1, 1.0, 1, 0.0, 1.0).unwrap();
        let g = Grid::new(1.0, 10, Penalty::Auto).unwrap();
        match simulate_euler(&m, &g, 3, PathStream::new(0, 0), Exec::Sequential) {
            Err(Error::StateExplosion { path: 0, step }) => assert!(step >= 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_dump_has_one_row_per_path_step() {
        let m = gbm(2);
        let g = Grid::new(1.0, 3, Penalty::Auto).unwrap();
        let p = simulate_euler(&m, &g, 2, PathStream::new(0, 0), Exec::Sequential).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "path,step,t,x0,x1,dw0,dw1");
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines[4].starts_with("0,3,1,"));
    }

    #[test]
    fn gbm_sup_moment_is_stable_across_seeds() {
        let m = gbm(1);
        let g = Grid::new(1.0, 20, Penalty::Auto).unwrap();
        let estimates: Vec<f64> = (0..3)
            .map(|seed| {
                let p = simulate_euler(&m, &g, 20_000, PathStream::new(seed, 0), Exec::Parallel).unwrap();
                (0..p.batch())
                    .map(|k| (0..=20).map(|i| p.state(k, i)[0].powi(2)).fold(0.0, f64::max))
                    .sum::<f64>()
                    / p.batch() as f64
            })
            .collect();
        let lo = estimates.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = estimates.iter().cloned().fold(0.0, f64::max);
        assert!(lo.is_finite() && lo > 1.0);
        assert!(hi / lo < 1.5, "{estimates:?}");
    }
}
