use crate::error::{Error, Result};
use crate::network::NetworkParams;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    /// Zero moments for `len` scalar parameters, `(β₁, β₂, ε) = (0.9, 0.999, 1e-8)`.
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn for_params(params: &NetworkParams) -> Self {
        Self::new(params.param_count())
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of a flat parameter vector.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: vec![self.first.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("parameter {i}")));
        }
        self.apply(params, grads, lr);
        Ok(())
    }

    /// One update of every tensor in `params`; a non-finite gradient aborts
    /// before anything changes and names the offending tensor.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) -> Result<()> {
        let mut bad = None;
        grads.visit(|name, a| {
            if bad.is_none() && a.check_finite().is_err() {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        let mut flat_grads = Vec::with_capacity(self.first.len());
        grads.visit(|_, a| flat_grads.extend_from_slice(a.data()));
        let mut flat = Vec::with_capacity(self.first.len());
        params.visit(|_, a| flat.extend_from_slice(a.data()));
        if flat.len() != self.first.len() || flat_grads.len() != flat.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: vec![self.first.len()],
                right: vec![flat.len(), flat_grads.len()],
            });
        }
        self.apply(&mut flat, &flat_grads, lr);
        let mut it = flat.into_iter();
        params.visit_mut(|_, a| {
            for x in a.data_mut() {
                *x = it.next().expect("length checked");
            }
        });
        Ok(())
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Reduce-on-plateau schedule on the per-epoch training loss: after
/// `patience` consecutive epochs without a strict improvement of the best
/// loss, `lr ← max(lr·factor, lr_min)` and the count restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    bad_epochs: usize,
    reductions: usize,
    pub factor: f64,
    pub patience: usize,
    pub lr_min: f64,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize, lr_min: f64) -> Result<Self> {
        if patience < 1 || !(lr_min <= lr0) || !(0.0 < factor && factor < 1.0) || !(lr_min > 0.0) {
            return Err(Error::Config(
                "scheduler needs patience ≥ 1, 0 < factor < 1 and 0 < lr_min ≤ lr0".into(),
            ));
        }
        Ok(Self {
            lr: lr0,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
            factor,
            patience,
            lr_min,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Feeds one epoch's loss; returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                let next = (self.lr * self.factor).max(self.lr_min);
                if next < self.lr {
                    self.reductions += 1;
                }
                self.lr = next;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
