//! The explicit penalized forward scheme
//! `V_{i+1} = V_i − f₁(tᵢ, Xᵢ)h − λ(−V_i)⁺h + Z(tᵢ, Xᵢ | θ)·ΔWᵢ`, `V₀ = v`,
//! its terminal loss against `h₁(X_N)`, and the scalar implicit reference
//! scheme used to check it.

mod reference;
mod transform;

use serde::{Deserialize, Serialize};

pub use reference::{implicit_reference_ladder, implicit_reference_value, implicit_step};
pub use transform::TransformedProblem;

use crate::diffgraph::{Array, Tape, Var};
use crate::dynamics::{simulate_euler, Grid, ModelSpec, PathBatch, PathStream};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::{input_features, z_forward_features, NetworkConfig, NetworkParams};

/// Terminal residual penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean absolute residual.
    #[default]
    L1,
    /// Mean squared residual.
    Mse,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
        })
    }
}

/// Parameter-independent data of one batch: network inputs for all time
/// slices stacked time-major (row `i·B + k` is path `k` at `tᵢ`), the
/// increments and drift terms per step, and the terminal targets `h₁(X_N)`.
#[derive(Clone, Debug)]
pub struct RolloutInputs {
    pub batch: usize,
    pub steps: usize,
    /// `λh`
    pub penalty_step: f64,
    /// `[N·B, d + 1]`
    pub features: Array,
    /// `N` arrays `[B, n]`
    pub increments: Vec<Array>,
    /// `N` arrays `[B]` holding `−f₁(tᵢ, Xᵢ)h`
    pub drift: Vec<Array>,
    /// `[B]`
    pub targets: Array,
}

impl RolloutInputs {
    pub fn new(cfg: &NetworkConfig, problem: &TransformedProblem<'_>, grid: &Grid, paths: &PathBatch) -> Result<Self> {
        let (b, steps, d) = (paths.batch(), paths.steps(), paths.dim());
        if steps != grid.steps || paths.times.len() != steps + 1 {
            return Err(Error::Dimension {
                op: "rollout grid/paths",
                left: vec![grid.steps],
                right: vec![steps],
            });
        }
        if d != cfg.dim || paths.noise_dim() != d {
            return Err(Error::Dimension {
                op: "rollout state/noise/network dimensions",
                left: vec![cfg.dim, cfg.dim],
                right: vec![d, paths.noise_dim()],
            });
        }
        let h = grid.step();
        let mut times = Vec::with_capacity(steps * b);
        let mut states = Vec::with_capacity(steps * b * d);
        let mut increments = Vec::with_capacity(steps);
        let mut drift = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = grid.time(i);
            let mut dw = Vec::with_capacity(b * d);
            let mut f = Vec::with_capacity(b);
            for k in 0..b {
                let x = paths.state(k, i);
                times.push(t);
                states.extend_from_slice(x);
                dw.extend_from_slice(paths.increment(k, i));
                f.push(-problem.f1(t, x) * h);
            }
            increments.push(Array::matrix(b, d, dw)?);
            drift.push(Array::vector(f));
        }
        let features = input_features(cfg, &times, &Array::matrix(steps * b, d, states)?)?;
        let targets = Array::vector((0..b).map(|k| problem.h1(paths.state(k, steps))).collect());
        Ok(Self {
            batch: b,
            steps,
            penalty_step: grid.lambda * h,
            features,
            increments,
            drift,
            targets,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.steps
    }
}

/// Tape handles of a rollout.
#[derive(Clone, Debug)]
pub struct RolloutVars {
    pub terminal: Var,
    /// `V_{t_0}, …, V_{t_N}` when requested.
    pub ladder: Option<Vec<Var>>,
}

/// Rollout values.
#[derive(Clone, Debug)]
pub struct RolloutResult {
    /// `[B]`
    pub terminal: Array,
    /// `[B, N + 1]` when requested; column 0 equals `v`.
    pub ladder: Option<Array>,
}

/// The forward recursion on a tape, given `v` (scalar) and the stacked
/// network output `z: [N·B, d]`.
pub fn rollout_on_tape(tape: &mut Tape, inputs: &RolloutInputs, v: Var, z: Var, keep_ladder: bool) -> Result<RolloutVars> {
    let b = inputs.batch;
    let expected = [inputs.rows(), inputs.increments.first().map_or(0, |a| a.row_len())];
    if tape.value(z).shape() != expected {
        return Err(Error::Dimension {
            op: "rollout network output",
            left: expected.to_vec(),
            right: tape.value(z).shape().to_vec(),
        });
    }
    let mut value = tape.broadcast(v, b)?;
    let mut ladder = keep_ladder.then(|| vec![value]);
    for i in 0..inputs.steps {
        let zi = tape.slice_rows(z, i * b, b)?;
        let noise = tape.row_dot(zi, inputs.increments[i].clone())?;
        let negated = tape.neg(value);
        let shortfall = tape.positive_part(negated);
        let penalty = tape.scale(shortfall, inputs.penalty_step);
        let penalized = tape.sub(value, penalty)?;
        let drifted = tape.add_const(penalized, &inputs.drift[i])?;
        value = tape.add(drifted, noise)?;
        if let Some(l) = ladder.as_mut() {
            l.push(value);
        }
    }
    Ok(RolloutVars { terminal: value, ladder })
}

/// Terminal residual loss `mean |V_N − h₁|` or `mean (V_N − h₁)²`.
pub fn loss(tape: &mut Tape, terminal: Var, targets: &Array, kind: LossKind) -> Result<Var> {
    let negated = Array::new(targets.shape().to_vec(), targets.data().iter().map(|v| -v).collect())?;
    let residual = tape.add_const(terminal, &negated)?;
    match kind {
        LossKind::L1 => tape.reduce_mean_abs(residual),
        LossKind::Mse => tape.reduce_mean_sq(residual),
    }
}

/// Evaluates the rollout without gradients.
pub fn rollout(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    problem: &TransformedProblem<'_>,
    grid: &Grid,
    paths: &PathBatch,
    keep_ladder: bool,
) -> Result<RolloutResult> {
    let inputs = RolloutInputs::new(cfg, problem, grid, paths)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let input = tape.constant(inputs.features.clone());
    let z = z_forward_features(&mut tape, &bound, cfg.eps_ln, input)?;
    let vars = rollout_on_tape(&mut tape, &inputs, bound.v, z, keep_ladder)?;
    let terminal = tape.value(vars.terminal).clone();
    let ladder = match vars.ladder {
        Some(steps) => {
            let (b, n) = (inputs.batch, steps.len());
            let mut data = vec![0.0; b * n];
            for (i, var) in steps.iter().enumerate() {
                for (k, v) in tape.value(*var).data().iter().enumerate() {
                    data[k * n + i] = *v;
                }
            }
            Some(Array::matrix(b, n, data)?)
        }
        None => None,
    };
    Ok(RolloutResult { terminal, ladder })
}

/// Loss value, parameter gradients and terminal values of one batch.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: f64,
    pub grads: NetworkParams,
    pub terminal: Array,
}

/// Evaluation controls for [`objective`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub kind: LossKind,
    /// Largest number of stacked network rows recorded on one tape.
    pub chunk_rows: usize,
    pub exec: Exec,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            kind: LossKind::L1,
            chunk_rows: 16_384,
            exec: Exec::default(),
        }
    }
}

/// Loss and exact gradients with respect to `(θ, v)`.
///
/// When the stacked batch fits in `chunk_rows`, a single tape records the
/// network and the rollout. Otherwise the work is split so that memory stays
/// bounded: the network output is computed chunk by chunk, the rollout is
/// differentiated with the output as a leaf, and the resulting output
/// cotangent is pulled back through each chunk's recomputed network
/// (chunks run under `exec`; their gradients are summed in chunk order, so
/// the result does not depend on the execution policy).
pub fn objective(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    inputs: &RolloutInputs,
    opts: &ObjectiveOptions,
) -> Result<Objective> {
    if opts.chunk_rows == 0 {
        return Err(Error::Config("chunk_rows must be positive".into()));
    }
    let rows = inputs.rows();
    if rows <= opts.chunk_rows {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let input = tape.constant(inputs.features.clone());
        let z = z_forward_features(&mut tape, &bound, cfg.eps_ln, input)?;
        let vars = rollout_on_tape(&mut tape, inputs, bound.v, z, false)?;
        let l = loss(&mut tape, vars.terminal, &inputs.targets, opts.kind)?;
        let mut grads = tape.backward(l)?;
        return Ok(Objective {
            loss: tape.value(l).data()[0],
            grads: bound.gradients(&mut grads, params),
            terminal: tape.value(vars.terminal).clone(),
        });
    }

    let width = inputs.features.row_len();
    let chunks: Vec<(usize, usize)> = (0..rows)
        .step_by(opts.chunk_rows)
        .map(|start| (start, opts.chunk_rows.min(rows - start)))
        .collect();
    let chunk_features = |start: usize, len: usize| {
        Array::matrix(len, width, inputs.features.data()[start * width..(start + len) * width].to_vec())
    };
    let forward = |tape: &mut Tape, start: usize, len: usize| -> Result<(crate::network::BoundParams, Var)> {
        let bound = params.bind(tape);
        let input = tape.constant(chunk_features(start, len)?);
        let z = z_forward_features(tape, &bound, cfg.eps_ln, input)?;
        Ok((bound, z))
    };

    let outputs = opts.exec.map(chunks.len(), |c| -> Result<Array> {
        let (start, len) = chunks[c];
        let mut tape = Tape::new();
        let (_, z) = forward(&mut tape, start, len)?;
        Ok(tape.value(z).clone())
    });
    let mut stacked = Vec::with_capacity(rows * cfg.dim);
    for o in outputs {
        stacked.extend(o?.into_data());
    }

    let mut tape = Tape::new();
    let v = tape.parameter(params.v.clone());
    let z = tape.parameter(Array::matrix(rows, cfg.dim, stacked)?);
    let vars = rollout_on_tape(&mut tape, inputs, v, z, false)?;
    let l = loss(&mut tape, vars.terminal, &inputs.targets, opts.kind)?;
    let mut outer = tape.backward(l)?;
    let z_cotangent = outer.take(z).unwrap_or_else(|| Array::zeros(&[rows, cfg.dim]));
    let v_grad = outer.take(v).unwrap_or_else(|| Array::zeros(&[1]));

    let partials = opts.exec.map(chunks.len(), |c| -> Result<NetworkParams> {
        let (start, len) = chunks[c];
        let mut tape = Tape::new();
        let (bound, z) = forward(&mut tape, start, len)?;
        let seed = Array::matrix(len, cfg.dim, z_cotangent.data()[start * cfg.dim..(start + len) * cfg.dim].to_vec())?;
        let mut grads = tape.backward_with_seed(z, seed)?;
        Ok(bound.gradients(&mut grads, params))
    });
    let mut grads = params.zeros_like();
    for p in partials {
        grads.accumulate(&p?);
    }
    grads.v = v_grad;
    Ok(Objective {
        loss: tape.value(l).data()[0],
        grads,
        terminal: tape.value(vars.terminal).clone(),
    })
}

/// `V̄ = v·e^{r·0} + p(0, x₀) = v + p(0, x₀)`.
pub fn recover_value(v: f64, model: &dyn ModelSpec) -> f64 {
    v + model.stopping_payoff(0.0, model.initial_state())
}

/// Mean of `h₁(X_T)` over a batch of Euler paths: a starting value for `v`
/// that puts the terminal residual near its floor.
pub fn pilot_initial_value(
    problem: &TransformedProblem<'_>,
    grid: &Grid,
    batch: usize,
    stream: PathStream,
    exec: Exec,
) -> Result<f64> {
    let paths = simulate_euler(problem.model, grid, batch, stream, exec)?;
    let steps = paths.steps();
    Ok((0..batch).map(|k| problem.h1(paths.state(k, steps))).sum::<f64>() / batch as f64)
}
