//! Experiment configuration files (TOML).
//!
//! ```toml
//! [model]
//! mu = 0.05
//! sigma = 1.4142135623730951
//! rate = 0.05
//! strike = 2.0
//! horizon = 1.0
//! dim = 10
//! x0 = 1.0            # every asset starts here
//!
//! [grid]
//! steps = 99
//! lambda = "auto"     # or a number; "auto" = 1/sqrt(T/N)
//!
//! [network]           # hidden, blocks, seed, eps_ln, normalize_time
//! [training]          # epochs, batch, lr0, patience, factor, lr_min, loss, ...
//! [benchmark]         # finite-difference oracle settings
//! [sweep]             # dims, workers
//! [output]            # directory, formats
//! ```
//!
//! Every section and field except `model.dim` has a default.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use dpm_core::dynamics::{Grid, IndexPut, Penalty};
use dpm_core::fd::{FdGrid, ReducedProblem, SolverOptions};
use dpm_core::network::NetworkConfig;
use dpm_core::penalty_bsde::LossKind;
use dpm_core::trainer::TrainConfig;
use dpm_core::Exec;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::sigma")]
    pub sigma: f64,
    #[serde(default = "defaults::rate")]
    pub rate: f64,
    #[serde(default = "defaults::strike")]
    pub strike: f64,
    #[serde(default = "defaults::horizon")]
    pub horizon: f64,
    pub dim: usize,
    #[serde(default = "defaults::x0")]
    pub x0: f64,
}

/// Penalty parameter: `"auto"` or a non-negative number.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum LambdaSetting {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for LambdaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LambdaSetting::Auto => s.serialize_str("auto"),
            LambdaSetting::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = LambdaSetting;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"auto\" or a non-negative number")
            }
            fn visit_str<E: de::Error>(self, s: &str) -> Result<LambdaSetting, E> {
                if s == "auto" {
                    Ok(LambdaSetting::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(s), &self))
                }
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<LambdaSetting, E> {
                Ok(LambdaSetting::Value(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<LambdaSetting, E> {
                Ok(LambdaSetting::Value(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<LambdaSetting, E> {
                Ok(LambdaSetting::Value(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default)]
    pub lambda: LambdaSetting,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            steps: defaults::steps(),
            lambda: LambdaSetting::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::eps_ln")]
    pub eps_ln: f64,
    #[serde(default = "defaults::yes")]
    pub normalize_time: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden: defaults::hidden(),
            blocks: defaults::blocks(),
            seed: 0,
            eps_ln: defaults::eps_ln(),
            normalize_time: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::lr0")]
    pub lr0: f64,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default = "defaults::factor")]
    pub factor: f64,
    #[serde(default = "defaults::lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "defaults::eval_stride")]
    pub eval_stride: usize,
    #[serde(default = "defaults::pilot_batch")]
    pub pilot_batch: usize,
    #[serde(default = "defaults::chunk_rows")]
    pub chunk_rows: usize,
    /// Seed of the Brownian path streams.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch: t.batch,
            lr0: t.lr0,
            patience: t.patience,
            factor: t.factor,
            lr_min: t.lr_min,
            loss: t.loss,
            eval_stride: t.eval_stride,
            pilot_batch: t.pilot_batch,
            chunk_rows: t.chunk_rows,
            seed: t.seed,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    /// Uniform space nodes on `[0, x_max]`.
    #[serde(default = "defaults::nodes")]
    pub nodes: usize,
    #[serde(default = "defaults::time_steps")]
    pub time_steps: usize,
    /// `x_max = x_max_factor · K`.
    #[serde(default = "defaults::x_max_factor")]
    pub x_max_factor: f64,
    #[serde(default = "defaults::theta")]
    pub theta: f64,
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
    /// Discrete penalty enforcing the obstacle.
    #[serde(default = "defaults::penalty")]
    pub penalty: f64,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    /// Binomial cross-check steps; 0 skips the check.
    #[serde(default = "defaults::binomial_steps")]
    pub binomial_steps: usize,
    /// Run the Δx/Δt halving and domain-doubling diagnostics.
    #[serde(default = "defaults::yes")]
    pub refine: bool,
    /// Model penalties for the `V − V^λ` sweep; empty skips it.
    #[serde(default)]
    pub penalty_sweep: Vec<f64>,
    /// Use this value instead of solving when training needs `V_b`.
    #[serde(default)]
    pub value: Option<f64>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            nodes: defaults::nodes(),
            time_steps: defaults::time_steps(),
            x_max_factor: defaults::x_max_factor(),
            theta: defaults::theta(),
            tolerance: defaults::tolerance(),
            penalty: defaults::penalty(),
            max_iterations: defaults::max_iterations(),
            binomial_steps: defaults::binomial_steps(),
            refine: true,
            penalty_sweep: Vec::new(),
            value: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Dimensions to run; empty means just `model.dim`.
    #[serde(default)]
    pub dims: Vec<usize>,
    /// Concurrent runs; 0 or 1 runs them one after another.
    #[serde(default)]
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub directory: Option<PathBuf>,
    /// `csv` enables time series, `json` enables summaries.
    #[serde(default = "defaults::formats")]
    pub formats: Vec<Format>,
    /// Save the trained parameters.
    #[serde(default = "defaults::yes")]
    pub checkpoint: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: None,
            formats: defaults::formats(),
            checkpoint: true,
        }
    }
}

mod defaults {
    use super::Format;

    pub fn mu() -> f64 {
        0.05
    }
    pub fn sigma() -> f64 {
        std::f64::consts::SQRT_2
    }
    pub fn rate() -> f64 {
        0.05
    }
    pub fn strike() -> f64 {
        2.0
    }
    pub fn horizon() -> f64 {
        1.0
    }
    pub fn x0() -> f64 {
        1.0
    }
    pub fn steps() -> usize {
        99
    }
    pub fn hidden() -> usize {
        dpm_core::network::DEFAULT_HIDDEN
    }
    pub fn blocks() -> usize {
        dpm_core::network::DEFAULT_BLOCKS
    }
    pub fn eps_ln() -> f64 {
        dpm_core::network::DEFAULT_LN_EPS
    }
    pub fn yes() -> bool {
        true
    }
    pub fn epochs() -> usize {
        super::TrainConfig::default().epochs
    }
    pub fn batch() -> usize {
        super::TrainConfig::default().batch
    }
    pub fn lr0() -> f64 {
        super::TrainConfig::default().lr0
    }
    pub fn patience() -> usize {
        super::TrainConfig::default().patience
    }
    pub fn factor() -> f64 {
        super::TrainConfig::default().factor
    }
    pub fn lr_min() -> f64 {
        super::TrainConfig::default().lr_min
    }
    pub fn eval_stride() -> usize {
        super::TrainConfig::default().eval_stride
    }
    pub fn pilot_batch() -> usize {
        super::TrainConfig::default().pilot_batch
    }
    pub fn chunk_rows() -> usize {
        super::TrainConfig::default().chunk_rows
    }
    pub fn nodes() -> usize {
        4001
    }
    pub fn time_steps() -> usize {
        2000
    }
    pub fn x_max_factor() -> f64 {
        20.0
    }
    pub fn theta() -> f64 {
        0.5
    }
    pub fn tolerance() -> f64 {
        super::SolverOptions::default().tol
    }
    pub fn penalty() -> f64 {
        super::SolverOptions::default().penalty
    }
    pub fn max_iterations() -> usize {
        super::SolverOptions::default().max_iterations
    }
    pub fn binomial_steps() -> usize {
        5000
    }
    pub fn formats() -> Vec<Format> {
        vec![Format::Csv, Format::Json]
    }
}

fn invalid(field: &str, why: impl fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {why}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }

    /// Field-level checks that do not need a solver.
    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        if m.dim < 1 {
            return Err(invalid("model.dim", "must be at least 1"));
        }
        if !(m.sigma > 0.0 && m.sigma.is_finite()) {
            return Err(invalid("model.sigma", "must be positive"));
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(invalid("model.horizon", "must be positive"));
        }
        if !(m.strike > 0.0 && m.strike.is_finite()) {
            return Err(invalid("model.strike", "must be positive"));
        }
        if !(m.x0 > 0.0 && m.x0.is_finite()) {
            return Err(invalid("model.x0", "must be positive"));
        }
        if !m.mu.is_finite() || !m.rate.is_finite() {
            return Err(invalid("model.mu/model.rate", "must be finite"));
        }
        if self.grid.steps < 1 {
            return Err(invalid("grid.steps", "must be at least 1"));
        }
        if let LambdaSetting::Value(l) = self.grid.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(invalid("grid.lambda", format!("must be \"auto\" or non-negative, got {l}")));
            }
        }
        self.network_config(m.dim)
            .validate()
            .map_err(|e| invalid("network", e))?;
        self.train_config().validate().map_err(|e| invalid("training", e))?;
        let b = &self.benchmark;
        if b.nodes < 3 {
            return Err(invalid("benchmark.nodes", "must be at least 3"));
        }
        if b.time_steps < 1 {
            return Err(invalid("benchmark.time_steps", "must be at least 1"));
        }
        if !(b.x_max_factor > 1.0) || b.x_max_factor * m.strike <= m.x0 {
            return Err(invalid("benchmark.x_max_factor", "x_max must exceed both K and x0"));
        }
        if !(0.0..=1.0).contains(&b.theta) {
            return Err(invalid("benchmark.theta", "must lie in [0, 1]"));
        }
        if !(b.tolerance > 0.0) || !(b.penalty > 0.0) || b.max_iterations < 1 {
            return Err(invalid("benchmark", "tolerance, penalty and max_iterations must be positive"));
        }
        if b.penalty_sweep.iter().any(|l| !(*l > 0.0)) || b.penalty_sweep.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("benchmark.penalty_sweep", "must be positive and strictly increasing"));
        }
        if let Some(v) = b.value {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid("benchmark.value", "must be positive"));
            }
        }
        if self.sweep.dims.iter().any(|&d| d < 1) {
            return Err(invalid("sweep.dims", "every dimension must be at least 1"));
        }
        Ok(())
    }

    /// Applies a command-line seed to both the network initialization and
    /// the path streams.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.network.seed = s;
            self.training.seed = s;
        }
        self
    }

    pub fn with_dim(&self, dim: usize) -> Self {
        let mut c = self.clone();
        c.model.dim = dim;
        c
    }

    pub fn model(&self) -> CliResult<IndexPut> {
        let m = &self.model;
        IndexPut::with_initial_state(m.mu, m.sigma, m.strike, vec![m.x0; m.dim], m.rate, m.horizon)
            .map_err(|e| invalid("model", e))
    }

    /// Time grid with the penalty resolved (`"auto"` → `1/√(T/N)`).
    pub fn time_grid(&self) -> CliResult<Grid> {
        let penalty = match self.grid.lambda {
            LambdaSetting::Auto => Penalty::Auto,
            LambdaSetting::Value(v) => Penalty::Value(v),
        };
        Grid::new(self.model.horizon, self.grid.steps, penalty).map_err(|e| invalid("grid", e))
    }

    pub fn network_config(&self, dim: usize) -> NetworkConfig {
        NetworkConfig {
            dim,
            hidden: self.network.hidden,
            blocks: self.network.blocks,
            eps_ln: self.network.eps_ln,
            seed: self.network.seed,
            horizon: self.model.horizon,
            normalize_time: self.network.normalize_time,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch: t.batch,
            lr0: t.lr0,
            factor: t.factor,
            patience: t.patience,
            lr_min: t.lr_min,
            loss: t.loss,
            seed: t.seed,
            eval_stride: t.eval_stride,
            pilot_batch: t.pilot_batch,
            chunk_rows: t.chunk_rows,
        }
    }

    pub fn reduced_problem(&self) -> CliResult<ReducedProblem> {
        let m = &self.model;
        ReducedProblem::from_parameters(m.mu, m.sigma, m.dim, m.rate, m.strike, m.horizon)
            .map_err(|e| invalid("model", e))
    }

    pub fn x_max(&self) -> f64 {
        self.benchmark.x_max_factor * self.model.strike
    }

    pub fn fd_grid(&self) -> CliResult<FdGrid> {
        let b = &self.benchmark;
        FdGrid::uniform(self.x_max(), b.nodes, b.time_steps)
            .and_then(|g| g.with_theta(b.theta))
            .map_err(|e| invalid("benchmark", e))
    }

    pub fn solver_options(&self) -> SolverOptions {
        let b = &self.benchmark;
        SolverOptions {
            tol: b.tolerance,
            penalty: b.penalty,
            max_iterations: b.max_iterations,
            ..SolverOptions::default()
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }

    /// Dimensions a sweep visits, ascending and without repeats.
    pub fn sweep_dims(&self) -> Vec<usize> {
        let mut dims = if self.sweep.dims.is_empty() {
            vec![self.model.dim]
        } else {
            self.sweep.dims.clone()
        };
        dims.sort_unstable();
        dims.dedup();
        dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FULL_D10: &str = r#"
        [model]
        dim = 10

        [grid]
        steps = 99
        lambda = "auto"
    "#;

    #[test]
    fn auto_lambda_resolves_from_steps() {
        let cfg = ExperimentConfig::parse(FULL_D10).unwrap();
        let lambda = cfg.time_grid().unwrap().lambda;
        assert!((lambda - 99f64.sqrt()).abs() < 1e-12);
        assert_eq!(format!("{lambda:.2}"), "9.95");
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::parse("[model]\ndim = 3\n").unwrap();
        assert_eq!(cfg.model.sigma, std::f64::consts::SQRT_2);
        assert_eq!(cfg.grid.steps, 99);
        assert_eq!(cfg.network.hidden, 128);
        assert_eq!(cfg.network.blocks, 8);
        assert_eq!(cfg.training.batch, 8192);
        assert_eq!(cfg.training.epochs, 30_000);
        assert_eq!(cfg.x_max(), 40.0);
        assert!(cfg.wants(Format::Csv) && cfg.wants(Format::Json));
    }

    #[test]
    fn numeric_lambda_accepts_integers_and_floats() {
        let a = ExperimentConfig::parse("[model]\ndim = 1\n[grid]\nlambda = 10\n").unwrap();
        let b = ExperimentConfig::parse("[model]\ndim = 1\n[grid]\nlambda = 9.5\n").unwrap();
        assert_eq!(a.grid.lambda, LambdaSetting::Value(10.0));
        assert_eq!(b.time_grid().unwrap().lambda, 9.5);
    }

    #[test]
    fn field_level_errors() {
        let cases = [
            ("[model]\ndim = 0\n", "model.dim"),
            ("[model]\ndim = 2\nsigma = -1.0\n", "model.sigma"),
            ("[model]\ndim = 2\n[grid]\nlambda = \"big\"\n", "auto"),
            ("[model]\ndim = 2\n[grid]\nlambda = -3.0\n", "grid.lambda"),
            ("[model]\ndim = 2\n[training]\nbatch = 0\n", "training"),
            ("[model]\ndim = 2\n[benchmark]\nnodes = 2\n", "benchmark.nodes"),
            ("[model]\ndim = 2\n[benchmark]\npenalty_sweep = [10.0, 5.0]\n", "penalty_sweep"),
            ("[model]\ndim = 2\n[training]\nloss = \"huber\"\n", "huber"),
            ("[model]\ndim = 2\nbogus = 1\n", "bogus"),
            ("[grid]\nsteps = 3\n", "missing field `model`"),
            ("[model]\nx0 = 1.0\n", "missing field `dim`"),
        ];
        for (text, needle) in cases {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }

    #[test]
    fn seed_override_applies_to_network_and_streams() {
        let cfg = ExperimentConfig::parse(FULL_D10).unwrap().with_seed(Some(42));
        assert_eq!(cfg.network.seed, 42);
        assert_eq!(cfg.training.seed, 42);
        assert_eq!(cfg.train_config().seed, 42);
        assert_eq!(cfg.network_config(10).seed, 42);
    }

    #[test]
    fn sweep_dims_sorted_unique() {
        let mut cfg = ExperimentConfig::parse(FULL_D10).unwrap();
        assert_eq!(cfg.sweep_dims(), [10]);
        cfg.sweep.dims = vec![50, 10, 20, 10];
        assert_eq!(cfg.sweep_dims(), [10, 20, 50]);
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            (1usize..300, -1.0f64..1.0, 0.01f64..3.0, 0.0f64..0.2, 0.5f64..4.0, 0.1f64..3.0),
            (1usize..500, prop_oneof![Just(LambdaSetting::Auto), (0.0f64..100.0).prop_map(LambdaSetting::Value)]),
            (2usize..256, 0usize..10, any::<u64>(), prop_oneof![Just(LossKind::L1), Just(LossKind::Mse)]),
            (0usize..100_000, 1usize..10_000, 1usize..5000, any::<bool>(), any::<bool>()),
            (proptest::collection::vec(1usize..300, 0..6), 0usize..8, proptest::option::of(0.5f64..2.0)),
        )
            .prop_map(|(m, g, n, t, s)| {
                let base = format!("[model]\ndim = {}\n", m.0);
                let mut c = ExperimentConfig::parse(&base).unwrap();
                c.model.mu = m.1;
                c.model.sigma = m.2;
                c.model.rate = m.3;
                c.model.strike = m.4;
                c.model.x0 = m.5;
                c.grid.steps = g.0;
                c.grid.lambda = g.1;
                c.network.hidden = n.0;
                c.network.blocks = n.1;
                c.network.seed = n.2;
                c.training.loss = n.3;
                c.training.epochs = t.0;
                c.training.batch = t.1;
                c.training.patience = t.2;
                c.training.exec = if t.3 { Exec::Parallel } else { Exec::Sequential };
                c.output.checkpoint = t.4;
                c.sweep.dims = s.0;
                c.sweep.workers = s.1;
                c.benchmark.value = s.2;
                c.output.directory = Some(PathBuf::from("runs/x"));
                c
            })
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(cfg in arb_config()) {
            let text = cfg.to_toml();
            let back = ExperimentConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_toml(), text);
        }
    }
}
