//! The five experiment commands. Every command writes deterministic files
//! (identical across reruns with equal configs and seeds) and keeps
//! wall-clock measurements in separate `*timing*` files.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use dpm_core::dynamics::ModelSpec;
use dpm_core::fd::{
    binomial_american_put, convergence_slope, interpolate, penalty_error_curve, refinement_study, solve_vi_1d,
    FdGrid,
};
use dpm_core::penalty_bsde::LossKind;
use dpm_core::trainer::{train, RunRecord};

use crate::config::{ExperimentConfig, Format};
use crate::error::{CliError, CliResult};

pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const TIMING_SERIES_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "params.json";
pub const BENCHMARK_FILE: &str = "benchmark.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const COMPARISON_TIMING_FILE: &str = "comparison_timing.json";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_TIMING_FILE: &str = "report_timing.csv";

/// Deterministic per-run results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dim: usize,
    pub steps: usize,
    pub lambda: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub network_seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub initial_v: f64,
    pub v_bar: f64,
    pub v_b: f64,
    pub rel_error_pct: f64,
    pub cost_value: Option<f64>,
    pub loss_variance: Option<f64>,
    pub t_star_epoch: Option<usize>,
    pub final_lr: Option<f64>,
    pub lr_reductions: usize,
    /// FNV-1a digest of all Brownian increments, hex.
    pub stream_checksum: String,
}

/// Wall-clock measurements of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub total_s: f64,
    pub t_star_s: Option<f64>,
    pub efficiency_pct: Option<f64>,
    pub benchmark_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub summary: RunSummary,
    pub timing: RunTiming,
    pub record: RunRecord,
    pub dir: PathBuf,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable result");
    text.push('\n');
    write_file(path, &text)
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let context = format!("cannot write {}", path.display());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(context, io),
        other => CliError::io(context, std::io::Error::other(format!("{other:?}"))),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Benchmark value `V_b` at the configured initial state: the configured
/// override, or the finite-difference solution of the reduced problem.
pub fn benchmark_value(cfg: &ExperimentConfig) -> CliResult<f64> {
    if let Some(v) = cfg.benchmark.value {
        return Ok(v);
    }
    let problem = cfg.reduced_problem()?;
    let sol = solve_vi_1d(&problem, &cfg.fd_grid()?, &cfg.solver_options())?;
    Ok(interpolate(&sol, 0.0, cfg.model.x0)?)
}

/// `dpm train`: trains one configuration into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<TrainOutcome> {
    let start = std::time::Instant::now();
    let v_b = benchmark_value(cfg)?;
    let benchmark_s = start.elapsed().as_secs_f64();
    run_training(cfg, out, v_b, benchmark_s)
}

fn run_training(cfg: &ExperimentConfig, out: &Path, v_b: f64, benchmark_s: f64) -> CliResult<TrainOutcome> {
    let model = cfg.model()?;
    let grid = cfg.time_grid()?;
    let net = cfg.network_config(model.dim());
    let tc = cfg.train_config();
    info!(
        "d = {}, N = {}, λ = {:.6} ({}), V_b = {v_b:.6}, out = {}",
        model.dim(),
        grid.steps,
        grid.lambda,
        match cfg.grid.lambda {
            crate::config::LambdaSetting::Auto => "auto = 1/sqrt(T/N)",
            crate::config::LambdaSetting::Value(_) => "fixed",
        },
        out.display()
    );
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let (record, params) = train(&model, &grid, &net, &tc, Some(v_b), cfg.training.exec)?;
    info!(
        "d = {}: V̄ = {:.6}, relative error {:.4}% after {} epochs",
        model.dim(),
        record.v_bar,
        record.rel_error_pct.unwrap_or(f64::NAN),
        tc.epochs
    );

    let summary = RunSummary {
        dim: model.dim(),
        steps: grid.steps,
        lambda: grid.lambda,
        loss: tc.loss,
        seed: tc.seed,
        network_seed: net.seed,
        epochs: tc.epochs,
        batch: tc.batch,
        hidden: net.hidden,
        blocks: net.blocks,
        initial_v: record.initial_v,
        v_bar: record.v_bar,
        v_b,
        rel_error_pct: record.rel_error_pct.expect("benchmark supplied"),
        cost_value: record.cost_value,
        loss_variance: record.loss_variance,
        t_star_epoch: record.t_star_epoch,
        final_lr: record.epochs.last().map(|e| e.lr),
        lr_reductions: record.lr_reductions,
        stream_checksum: format!("{:016x}", record.stream_checksum),
    };
    let timing = RunTiming {
        total_s: record.total_s,
        t_star_s: record.t_star_s,
        efficiency_pct: record.efficiency_pct,
        benchmark_s,
    };

    if cfg.wants(Format::Csv) {
        let path = out.join(METRICS_FILE);
        let mut w = csv_writer(&path)?;
        w.write_record(["epoch", "loss", "lr", "v_bar"]).map_err(|e| csv_error(&path, e))?;
        for e in &record.epochs {
            w.write_record([e.epoch.to_string(), e.loss.to_string(), e.lr.to_string(), opt(e.v_bar)])
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;

        let path = out.join(TIMING_SERIES_FILE);
        let mut w = csv_writer(&path)?;
        w.write_record(["epoch", "elapsed_s"]).map_err(|e| csv_error(&path, e))?;
        for e in &record.epochs {
            w.write_record([e.epoch.to_string(), e.elapsed_s.to_string()])
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;
    }
    if cfg.wants(Format::Json) {
        write_json(&out.join(SUMMARY_FILE), &summary)?;
        write_json(&out.join(TIMING_FILE), &timing)?;
    }
    if cfg.output.checkpoint {
        params.save(&net, &out.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        summary,
        timing,
        record,
        dir: out.to_path_buf(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParameters {
    pub mu: f64,
    pub sigma: f64,
    pub dim: usize,
    pub rate: f64,
    pub strike: f64,
    pub horizon: f64,
    /// Initial index value (geometric mean of the initial assets).
    pub x0: f64,
    pub mu_hat: f64,
    pub sigma_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkGrid {
    pub nodes: usize,
    pub time_steps: usize,
    pub x_max: f64,
    pub theta: f64,
    pub tolerance: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinomialCheck {
    pub steps: usize,
    pub value: f64,
    pub abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementDiagnostics {
    pub half_dx_value: f64,
    pub half_dt_value: f64,
    pub double_x_max_value: f64,
    pub dx_change: f64,
    pub dt_change: f64,
    pub x_max_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPoint {
    pub lambda: f64,
    pub sup_error: f64,
    pub lambda_times_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub parameters: BenchmarkParameters,
    pub grid: BenchmarkGrid,
    pub v_b: f64,
    pub binomial: Option<BinomialCheck>,
    pub refinement: Option<RefinementDiagnostics>,
    pub penalty_sweep: Vec<PenaltyPoint>,
    /// Log-log slope of the sup-error against λ.
    pub penalty_slope: Option<f64>,
}

/// `dpm benchmark`: finite-difference value of the reduced index put with
/// diagnostics, written to `out/benchmark.json`.
pub fn cmd_benchmark(cfg: &ExperimentConfig, out: &Path) -> CliResult<BenchmarkReport> {
    let problem = cfg.reduced_problem()?;
    let grid = cfg.fd_grid()?;
    let opts = cfg.solver_options();
    let b = &cfg.benchmark;
    let x0 = cfg.model.x0;
    let exec = cfg.training.exec;
    info!(
        "benchmark d = {}: μ̂ = {:.6}, σ̂ = {:.6}, {} nodes on [0, {}], {} time steps",
        cfg.model.dim,
        problem.mu_hat,
        problem.sigma_hat,
        b.nodes,
        cfg.x_max(),
        b.time_steps
    );
    let v_b = interpolate(&solve_vi_1d(&problem, &grid, &opts)?, 0.0, x0)?;
    info!("d = {}: V_b = {v_b:.6}", cfg.model.dim);

    let binomial = if b.binomial_steps > 0 {
        let value = binomial_american_put(&problem, x0, b.binomial_steps)?;
        Some(BinomialCheck {
            steps: b.binomial_steps,
            value,
            abs_diff: (value - v_b).abs(),
        })
    } else {
        None
    };

    let refinement = if b.refine {
        let r = refinement_study(&problem, cfg.x_max(), b.nodes, b.time_steps, x0, &opts, exec)?;
        let doubled = FdGrid::uniform(2.0 * cfg.x_max(), 2 * b.nodes - 1, b.time_steps)?.with_theta(b.theta)?;
        let wide = interpolate(&solve_vi_1d(&problem, &doubled, &opts)?, 0.0, x0)?;
        Some(RefinementDiagnostics {
            half_dx_value: r.half_dx,
            half_dt_value: r.half_dt,
            double_x_max_value: wide,
            dx_change: r.dx_change,
            dt_change: r.dt_change,
            x_max_change: (wide - v_b).abs(),
        })
    } else {
        None
    };

    let (penalty_sweep, penalty_slope) = if b.penalty_sweep.is_empty() {
        (Vec::new(), None)
    } else {
        let curve = penalty_error_curve(&problem, &grid, &b.penalty_sweep, &opts, exec)?;
        let slope = if curve.len() >= 3 {
            let (ls, es): (Vec<f64>, Vec<f64>) = curve.iter().copied().unzip();
            convergence_slope(&ls, &es).ok()
        } else {
            None
        };
        let points = curve
            .into_iter()
            .map(|(lambda, e)| PenaltyPoint {
                lambda,
                sup_error: e,
                lambda_times_error: lambda * e,
            })
            .collect();
        (points, slope)
    };

    let report = BenchmarkReport {
        parameters: BenchmarkParameters {
            mu: cfg.model.mu,
            sigma: cfg.model.sigma,
            dim: cfg.model.dim,
            rate: problem.rate,
            strike: problem.strike,
            horizon: problem.horizon,
            x0,
            mu_hat: problem.mu_hat,
            sigma_hat: problem.sigma_hat,
        },
        grid: BenchmarkGrid {
            nodes: b.nodes,
            time_steps: b.time_steps,
            x_max: cfg.x_max(),
            theta: b.theta,
            tolerance: b.tolerance,
            penalty: b.penalty,
        },
        v_b,
        binomial,
        refinement,
        penalty_sweep,
        penalty_slope,
    };
    create_dir(out)?;
    write_json(&out.join(BENCHMARK_FILE), &report)?;
    Ok(report)
}

/// Sub-directory of one sweep run.
pub fn sweep_dir(out: &Path, dim: usize) -> PathBuf {
    out.join(format!("d{dim:03}"))
}

/// `dpm sweep`: one isolated training run per dimension in `sweep.dims`,
/// then a consolidated report over them.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<RunSummary>> {
    let dims = cfg.sweep_dims();
    create_dir(out)?;
    let run = |d: usize| cmd_train(&cfg.with_dim(d), &sweep_dir(out, d)).map(|o| o.summary);
    let results: Vec<CliResult<RunSummary>> = run_isolated(&dims, cfg.sweep.workers, run)?;
    let summaries = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    cmd_report(&[out.to_path_buf()], out)?;
    Ok(summaries)
}

#[cfg(feature = "parallel")]
fn run_isolated<T: Send>(
    dims: &[usize],
    workers: usize,
    run: impl Fn(usize) -> T + Sync + Send,
) -> CliResult<Vec<T>> {
    use rayon::prelude::*;
    if workers <= 1 {
        return Ok(dims.iter().map(|&d| run(d)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("sweep.workers: {e}")))?;
    Ok(pool.install(|| dims.par_iter().map(|&d| run(d)).collect()))
}

#[cfg(not(feature = "parallel"))]
fn run_isolated<T: Send>(
    dims: &[usize],
    _workers: usize,
    run: impl Fn(usize) -> T + Sync + Send,
) -> CliResult<Vec<T>> {
    Ok(dims.iter().map(|&d| run(d)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRun {
    pub loss: LossKind,
    pub v_bar: f64,
    pub rel_error_pct: f64,
    pub t_star_epoch: Option<usize>,
    pub stream_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComparison {
    pub dim: usize,
    pub v_b: f64,
    pub runs: Vec<LossRun>,
    /// Both runs consumed identical Brownian increments.
    pub common_random_numbers: bool,
    /// `|rel_error_L1 − rel_error_MSE|` in percentage points.
    pub rel_error_gap_pp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTiming {
    pub loss: LossKind,
    pub total_s: f64,
    pub t_star_s: Option<f64>,
}

/// `dpm compare-loss`: paired L¹ and MSE runs on common random numbers.
pub fn cmd_compare_loss(cfg: &ExperimentConfig, out: &Path) -> CliResult<LossComparison> {
    let v_b = benchmark_value(cfg)?;
    create_dir(out)?;
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    for kind in [LossKind::L1, LossKind::Mse] {
        let mut c = cfg.clone();
        c.training.loss = kind;
        let o = run_training(&c, &out.join(kind.to_string()), v_b, 0.0)?;
        runs.push(LossRun {
            loss: kind,
            v_bar: o.summary.v_bar,
            rel_error_pct: o.summary.rel_error_pct,
            t_star_epoch: o.summary.t_star_epoch,
            stream_checksum: o.summary.stream_checksum.clone(),
        });
        timings.push(LossTiming {
            loss: kind,
            total_s: o.timing.total_s,
            t_star_s: o.timing.t_star_s,
        });
    }
    let cmp = LossComparison {
        dim: cfg.model.dim,
        v_b,
        common_random_numbers: runs[0].stream_checksum == runs[1].stream_checksum,
        rel_error_gap_pp: (runs[0].rel_error_pct - runs[1].rel_error_pct).abs(),
        runs,
    };
    if !cmp.common_random_numbers {
        warn!("L1 and MSE runs drew different Brownian increments");
    }
    info!(
        "relative error L1 {:.4}%, MSE {:.4}%, gap {:.4} pp",
        cmp.runs[0].rel_error_pct, cmp.runs[1].rel_error_pct, cmp.rel_error_gap_pp
    );
    write_json(&out.join(COMPARISON_FILE), &cmp)?;
    write_json(&out.join(COMPARISON_TIMING_FILE), &timings)?;
    Ok(cmp)
}

/// One row of the consolidated report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub summary: RunSummary,
    pub timing: Option<RunTiming>,
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "run",
    "d",
    "loss",
    "epochs",
    "batch",
    "v_bar",
    "v_b",
    "rel_error_pct",
    "cost_value",
    "loss_variance",
    "t_star_epoch",
    "lr_reductions",
    "stream_checksum",
];

pub const REPORT_TIMING_COLUMNS: [&str; 5] = ["run", "d", "total_s", "t_star_s", "efficiency_pct"];

fn run_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join(SUMMARY_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| CliError::io(format!("cannot list {}", root.display()), e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(format!("cannot list {}", root.display()), e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<Result<T, String>> {
    let text = fs::read_to_string(path).ok()?;
    Some(serde_json::from_str(&text).map_err(|e| e.to_string()))
}

/// Collects run summaries under `roots` (each a run directory or a
/// directory of run directories), sorted by dimension.
pub fn collect_runs(roots: &[PathBuf]) -> CliResult<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for root in roots {
        for dir in run_dirs(root)? {
            let name = dir
                .strip_prefix(root)
                .ok()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(&dir)
                .display()
                .to_string();
            match read_json::<RunSummary>(&dir.join(SUMMARY_FILE)) {
                None => warn!("{}: no {SUMMARY_FILE}, skipped", dir.display()),
                Some(Err(e)) => warn!("{}: unreadable {SUMMARY_FILE} ({e}), skipped", dir.display()),
                Some(Ok(summary)) => {
                    let timing = read_json::<RunTiming>(&dir.join(TIMING_FILE)).and_then(Result::ok);
                    rows.push(ReportRow {
                        run: name,
                        summary,
                        timing,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| (a.summary.dim, &a.run).cmp(&(b.summary.dim, &b.run)));
    Ok(rows)
}

/// `dpm report`: `report.csv` (deterministic columns) and
/// `report_timing.csv` in `out`, one row per completed run.
pub fn cmd_report(roots: &[PathBuf], out: &Path) -> CliResult<Vec<ReportRow>> {
    let rows = collect_runs(roots)?;
    if rows.is_empty() {
        warn!("no completed runs found; writing header-only report");
    }
    create_dir(out)?;
    let path = out.join(REPORT_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(REPORT_COLUMNS).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        let s = &r.summary;
        w.write_record([
            r.run.clone(),
            s.dim.to_string(),
            s.loss.to_string(),
            s.epochs.to_string(),
            s.batch.to_string(),
            s.v_bar.to_string(),
            s.v_b.to_string(),
            s.rel_error_pct.to_string(),
            opt(s.cost_value),
            opt(s.loss_variance),
            opt(s.t_star_epoch),
            s.lr_reductions.to_string(),
            s.stream_checksum.clone(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;

    let path = out.join(REPORT_TIMING_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(REPORT_TIMING_COLUMNS).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        let t = r.timing.as_ref();
        w.write_record([
            r.run.clone(),
            r.summary.dim.to_string(),
            opt(t.map(|t| t.total_s)),
            opt(t.and_then(|t| t.t_star_s)),
            opt(t.and_then(|t| t.efficiency_pct)),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;
    info!("report with {} run(s) written to {}", rows.len(), out.display());
    Ok(rows)
}
