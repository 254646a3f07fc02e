//! Stochastic optimization of `(v, θ)`: fresh Euler paths every epoch,
//! Adam updates, a plateau schedule, and the accuracy/efficiency metrics.

mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use optim::{Adam, PlateauScheduler};

use crate::dynamics::{fnv1a, simulate_euler, Grid, ModelSpec, PathStream};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::network::{init_params, NetworkConfig, NetworkParams};
use crate::penalty_bsde::{
    objective, pilot_initial_value, recover_value, LossKind, ObjectiveOptions, RolloutInputs, TransformedProblem,
};

/// Relative distance to the benchmark that counts as "within the band".
pub const STABLE_BAND: f64 = 0.01;

/// Number of trailing epochs whose loss variance is reported.
pub const VARIANCE_WINDOW: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub factor: f64,
    pub patience: usize,
    pub lr_min: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Epochs between price evaluations; the last epoch is always evaluated.
    pub eval_stride: usize,
    /// Paths used to initialize `v`; 0 keeps `v = 0`.
    pub pilot_batch: usize,
    /// Largest number of stacked network rows recorded on one tape.
    pub chunk_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30_000,
            batch: 8192,
            lr0: 1e-3,
            factor: 0.5,
            patience: 1000,
            lr_min: 1e-7,
            loss: LossKind::L1,
            seed: 0,
            eval_stride: 100,
            pilot_batch: 1024,
            chunk_rows: 16_384,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::Config("training.batch must be at least 1".into()));
        }
        if self.eval_stride < 1 {
            return Err(Error::Config("training.eval_stride must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("training.lr0 must be positive".into()));
        }
        if self.chunk_rows < 1 {
            return Err(Error::Config("training.chunk_rows must be at least 1".into()));
        }
        PlateauScheduler::new(self.lr0, self.factor, self.patience, self.lr_min).map(|_| ())
    }
}

/// One epoch of training: the loss of the batch before the update, the
/// learning rate used for the update, wall-clock seconds since training
/// started, and the price estimate after the update on evaluation epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_s: f64,
    pub v_bar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub initial_v: f64,
    /// Price estimate `v + p(0, x₀)` after the last epoch.
    pub v_bar: f64,
    pub benchmark: Option<f64>,
    pub rel_error_pct: Option<f64>,
    /// Loss of the last epoch.
    pub cost_value: Option<f64>,
    /// Population variance of the last (up to) 1000 epoch losses.
    pub loss_variance: Option<f64>,
    pub total_s: f64,
    pub t_star_epoch: Option<usize>,
    pub t_star_s: Option<f64>,
    pub efficiency_pct: Option<f64>,
    /// FNV-1a digest of every Brownian increment drawn, in order.
    pub stream_checksum: u64,
    pub lr_reductions: usize,
}

impl RunRecord {
    /// `(epoch, elapsed_s, v_bar)` of every evaluation.
    pub fn evaluations(&self) -> Vec<(usize, f64, f64)> {
        self.epochs
            .iter()
            .filter_map(|e| e.v_bar.map(|v| (e.epoch, e.elapsed_s, v)))
            .collect()
    }
}

/// Index of the earliest evaluation after which every evaluation lies within
/// `band` relative distance of `benchmark`; `None` if the last one does not.
pub fn stable_entry_index(values: &[f64], benchmark: f64, band: f64) -> Option<usize> {
    let inside = |v: f64| ((v - benchmark) / benchmark).abs() <= band;
    let mut first = None;
    for (i, &v) in values.iter().enumerate().rev() {
        if inside(v) {
            first = Some(i);
        } else {
            break;
        }
    }
    first
}

/// Stable entry time `t*` of a finished run, in seconds.
pub fn stable_entry_time(record: &RunRecord, benchmark: f64) -> Option<f64> {
    let evals = record.evaluations();
    let values: Vec<f64> = evals.iter().map(|e| e.2).collect();
    stable_entry_index(&values, benchmark, STABLE_BAND).map(|i| evals[i].1)
}

/// Population variance.
pub fn population_variance(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// Initialized parameters with `v` set from the pilot batch (substream 0).
pub fn initial_params(
    model: &dyn ModelSpec,
    grid: &Grid,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<NetworkParams> {
    let mut params = init_params(net)?;
    if cfg.pilot_batch > 0 {
        let problem = TransformedProblem::new(model);
        let v = pilot_initial_value(&problem, grid, cfg.pilot_batch, PathStream::new(cfg.seed, 0), exec)?;
        params.set_v(v);
    }
    Ok(params)
}

/// Trains from freshly initialized parameters.
pub fn train(
    model: &dyn ModelSpec,
    grid: &Grid,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    benchmark: Option<f64>,
    exec: Exec,
) -> Result<(RunRecord, NetworkParams)> {
    net.validate()?;
    cfg.validate()?;
    if net.dim != model.dim() {
        return Err(Error::Dimension {
            op: "train network/model dimension",
            left: vec![net.dim],
            right: vec![model.dim()],
        });
    }
    let params = initial_params(model, grid, net, cfg, exec)?;
    train_from(model, grid, net, cfg, benchmark, exec, params)
}

/// Trains starting from `params`. Epoch `e` (1-based) draws its paths from
/// substream `e` of the seed, so runs that differ only in loss kind see the
/// same Brownian increments.
pub fn train_from(
    model: &dyn ModelSpec,
    grid: &Grid,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    benchmark: Option<f64>,
    exec: Exec,
    mut params: NetworkParams,
) -> Result<(RunRecord, NetworkParams)> {
    cfg.validate()?;
    let problem = TransformedProblem::new(model);
    let mut adam = Adam::for_params(&params);
    let mut scheduler = PlateauScheduler::new(cfg.lr0, cfg.factor, cfg.patience, cfg.lr_min)?;
    let opts = ObjectiveOptions {
        kind: cfg.loss,
        chunk_rows: cfg.chunk_rows,
        exec,
    };
    let initial_v = params.v();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut checksum_bytes: Vec<u8> = Vec::with_capacity(8 * cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let paths = simulate_euler(model, grid, cfg.batch, PathStream::new(cfg.seed, epoch as u64), exec)?;
        checksum_bytes.extend_from_slice(&paths.increment_checksum().to_le_bytes());
        let inputs = RolloutInputs::new(net, &problem, grid, &paths)?;
        let obj = objective(&params, net, &inputs, &opts)?;
        if !obj.loss.is_finite() {
            return Err(Error::NonFiniteGradient(format!("loss at epoch {epoch}")));
        }
        let lr = scheduler.lr();
        adam.step(&mut params, &obj.grads, lr)?;
        scheduler.step(obj.loss);
        let evaluate = epoch % cfg.eval_stride == 0 || epoch == cfg.epochs;
        records.push(EpochRecord {
            epoch,
            loss: obj.loss,
            lr,
            elapsed_s: start.elapsed().as_secs_f64(),
            v_bar: evaluate.then(|| recover_value(params.v(), model)),
        });
    }
    let total_s = start.elapsed().as_secs_f64();
    let v_bar = recover_value(params.v(), model);
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let tail = &losses[losses.len().saturating_sub(VARIANCE_WINDOW)..];
    let mut record = RunRecord {
        epochs: records,
        initial_v,
        v_bar,
        benchmark,
        rel_error_pct: benchmark.map(|b| 100.0 * (v_bar - b).abs() / b),
        cost_value: losses.last().copied(),
        loss_variance: population_variance(tail),
        total_s,
        t_star_epoch: None,
        t_star_s: None,
        efficiency_pct: None,
        stream_checksum: fnv1a(checksum_bytes),
        lr_reductions: scheduler.reductions(),
    };
    if let Some(b) = benchmark {
        let evals = record.evaluations();
        let values: Vec<f64> = evals.iter().map(|e| e.2).collect();
        if let Some(i) = stable_entry_index(&values, b, STABLE_BAND) {
            record.t_star_epoch = Some(evals[i].0);
            record.t_star_s = Some(evals[i].1);
            if total_s > 0.0 {
                record.efficiency_pct = Some(100.0 * evals[i].1 / total_s);
            }
        }
    }
    Ok((record, params))
}
