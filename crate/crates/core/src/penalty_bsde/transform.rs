use crate::dynamics::ModelSpec;

/// The discounted excess value `U = (V − p)e^{−rt}` solves a BSDE with
/// driver `f₁(t, x) = (f + Lp − rp)(t, x)·e^{−rt}`, terminal value
/// `h₁(x) = (h(x) − p(T, x))·e^{−rT}` and penalty `λ(−U)⁺`.
#[derive(Clone, Copy)]
pub struct TransformedProblem<'a> {
    pub model: &'a dyn ModelSpec,
    /// Relative step of the finite-difference generator fallback.
    pub fd_step: f64,
    /// Use the model's closed-form `Lp` when it has one.
    pub closed_form: bool,
}

impl<'a> TransformedProblem<'a> {
    pub fn new(model: &'a dyn ModelSpec) -> Self {
        Self {
            model,
            fd_step: 1e-4,
            closed_form: true,
        }
    }

    /// Forces the finite-difference generator even when a closed form exists.
    pub fn with_finite_differences(mut self) -> Self {
        self.closed_form = false;
        self
    }

    pub fn f1(&self, t: f64, x: &[f64]) -> f64 {
        let m = self.model;
        let lp = self.generator(t, x);
        (m.running_payoff(t, x) + lp - m.rate() * m.stopping_payoff(t, x)) * (-m.rate() * t).exp()
    }

    pub fn h1(&self, x: &[f64]) -> f64 {
        let m = self.model;
        let horizon = m.horizon();
        (m.exercise_payoff(x) - m.stopping_payoff(horizon, x)) * (-m.rate() * horizon).exp()
    }

    /// `(L p)(t, x)`, closed form when available and enabled.
    pub fn generator(&self, t: f64, x: &[f64]) -> f64 {
        if self.closed_form {
            if let Some(v) = self.model.generator_of_stopping_payoff(t, x) {
                return v;
            }
        }
        self.generator_fd(t, x)
    }

    /// `∂ₜp + b·∇p + ½ tr(σσᵀ ∇²p)` by central differences (one-sided in
    /// time at the ends of `[0, T]`).
    pub fn generator_fd(&self, t: f64, x: &[f64]) -> f64 {
        let m = self.model;
        let (d, n) = (m.dim(), m.noise_dim());
        let p = |t: f64, y: &[f64]| m.stopping_payoff(t, y);
        let horizon = m.horizon();
        let ht = self.fd_step * horizon.max(1.0);
        let (lo, hi) = ((t - ht).max(0.0), (t + ht).min(horizon));
        let dt = (p(hi, x) - p(lo, x)) / (hi - lo);

        let mut b = vec![0.0; d];
        m.drift(t, x, &mut b);
        let mut sigma = vec![0.0; d * n];
        m.diffusion(t, x, &mut sigma);
        let step: Vec<f64> = x.iter().map(|v| self.fd_step * v.abs().max(1.0)).collect();
        let p0 = p(t, x);
        let mut y = x.to_vec();
        let mut shifted = |i: usize, si: f64, j: usize, sj: f64| {
            y[i] += si;
            y[j] += sj;
            let v = p(t, &y);
            y[i] -= si;
            y[j] -= sj;
            v
        };
        let mut out = dt;
        for i in 0..d {
            let (hi_i, lo_i) = (shifted(i, step[i], i, 0.0), shifted(i, -step[i], i, 0.0));
            out += b[i] * (hi_i - lo_i) / (2.0 * step[i]);
            for j in i..d {
                let a: f64 = (0..n).map(|k| sigma[i * n + k] * sigma[j * n + k]).sum();
                if a == 0.0 {
                    continue;
                }
                let second = if i == j {
                    (hi_i - 2.0 * p0 + lo_i) / (step[i] * step[i])
                } else {
                    let (si, sj) = (step[i], step[j]);
                    (shifted(i, si, j, sj) - shifted(i, si, j, -sj) - shifted(i, -si, j, sj) + shifted(i, -si, j, -sj))
                        / (4.0 * si * sj)
                };
                // Off-diagonal entries appear twice in the trace.
                out += if i == j { 0.5 * a * second } else { a * second };
            }
        }
        out
    }
}
