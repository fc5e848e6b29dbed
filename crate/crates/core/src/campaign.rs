//! Single runs and Monte-Carlo campaigns driven by a [`RunConfig`].

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eqf::Eqf;
use crate::eval::{error_series, mc_aggregate, mean_nees, run_metrics, ErrorSeries, EvalError, RmseReport, RunMetrics};
use crate::iekf::Iekf;
use crate::lie::{exp_so3, Vec3};
use crate::model::{AttitudeFilter, DirectionMeasurement, FilterError, SensorSet};
use crate::replay::{replay, ReplayError, ReplayOutput};
use crate::sim::{gaussian3, rng_for, simulate, streams, GyroSample, SimData, SimError};
use crate::symmetry::SystemState;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "ABC_EQF_THREADS";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("at least one run required")]
    NoRuns,
}

/// Initial estimate and covariance for a run.
pub fn initial_estimate(cfg: &RunConfig, truth0: &SystemState, seed: u64) -> (SystemState, DMatrix<f64>) {
    let init = &cfg.init;
    let delta = match init.attitude_error {
        Some(e) => Vec3::from(e),
        None => gaussian3(&mut rng_for(seed, streams::INIT)) * init.attitude_std_deg.to_radians(),
    };
    let cal = if init.calibration.is_empty() {
        vec![crate::lie::Rotation::identity(); cfg.n]
    } else {
        init.calibration.iter().map(|c| exp_so3(&Vec3::from(*c))).collect()
    };
    let xi0 = SystemState {
        attitude: exp_so3(&delta) * truth0.attitude,
        bias: Vec3::from(init.bias),
        cal,
    };
    let dim = 6 + 3 * cfg.n;
    let mut sigma0 = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        sigma0[(i, i)] = match i {
            0..=2 => init.sigma_attitude_deg.to_radians().powi(2),
            3..=5 => init.sigma_bias.powi(2),
            _ => init.sigma_calibration_deg.to_radians().powi(2),
        };
    }
    (xi0, sigma0)
}

/// Filters selected by `cfg`, all starting from the same estimate.
pub fn build_filters(
    cfg: &RunConfig,
    sensors: &SensorSet,
    xi0: &SystemState,
    sigma0: &DMatrix<f64>,
) -> Result<Vec<Box<dyn AttitudeFilter>>, FilterError> {
    let noise = cfg.filter_noise();
    let opts = cfg.filter_options();
    let mut out: Vec<Box<dyn AttitudeFilter>> = Vec::new();
    if cfg.filter.eqf() {
        out.push(Box::new(Eqf::new_at(xi0, sensors.clone(), noise, opts, sigma0)?));
    }
    if cfg.filter.iekf() {
        out.push(Box::new(Iekf::new(
            xi0,
            sensors.clone(),
            noise,
            opts,
            sigma0,
            cfg.init.iekf_adapt,
        )?));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub name: &'static str,
    pub output: ReplayOutput,
    pub series: ErrorSeries,
    pub metrics: RunMetrics,
    /// Mean attitude NEES over the asymptotic window.
    pub nees: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub filters: Vec<FilterRun>,
}

/// Replay of one filter over a log.
#[derive(Debug, Clone)]
pub struct LogRun {
    pub name: &'static str,
    pub output: ReplayOutput,
    pub seconds: f64,
}

/// Replays every selected filter over the given logs from a common start.
pub fn replay_logs(
    cfg: &RunConfig,
    sensors: &SensorSet,
    start: (&SystemState, &DMatrix<f64>),
    gyro: &[GyroSample],
    meas: &[DirectionMeasurement],
    truth: Option<&dyn Fn(f64) -> SystemState>,
) -> Result<Vec<LogRun>, CampaignError> {
    let mut out = Vec::new();
    for mut f in build_filters(cfg, sensors, start.0, start.1)? {
        let clock = Instant::now();
        let output = replay(f.as_mut(), gyro, meas, truth)?;
        out.push(LogRun {
            name: f.name(),
            output,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

/// Runs every selected filter on pre-synthesized data.
pub fn run_on_data(cfg: &RunConfig, sim: &SimData, seed: u64) -> Result<RunResult, CampaignError> {
    let truth0 = sim.state_at(sim.truth.first().map_or(0.0, |s| s.t));
    let (xi0, sigma0) = initial_estimate(cfg, &truth0, seed);
    let split = cfg.duration * cfg.transient_fraction;
    let truth_fn = |t: f64| sim.state_at(t);
    let runs = replay_logs(cfg, &sim.sensors, (&xi0, &sigma0), &sim.gyro, &sim.meas, Some(&truth_fn))?;
    let mut filters = Vec::new();
    for r in runs {
        let series = error_series(&sim.truth, &r.output.snapshots)?;
        let metrics = run_metrics(&series, split)?;
        let nees = mean_nees(&r.output.snapshots, split);
        filters.push(FilterRun {
            name: r.name,
            output: r.output,
            series,
            metrics,
            nees,
            seconds: r.seconds,
        });
    }
    Ok(RunResult { seed, filters })
}

pub fn run_single(cfg: &RunConfig, seed: u64) -> Result<RunResult, CampaignError> {
    let sim = simulate(cfg, seed)?;
    run_on_data(cfg, &sim, seed)
}

/// Per-run figures kept by a campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub filters: Vec<(&'static str, RunMetrics, Option<f64>, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub runs: Vec<RunSummary>,
    pub reports: Vec<(String, RmseReport)>,
    /// Mean asymptotic attitude NEES per filter over all runs.
    pub nees: Vec<(String, f64)>,
    /// Mean replay time per filter (s).
    pub seconds: Vec<(String, f64)>,
}

/// Worker count: `explicit`, else [`THREADS_ENV`], else all cores.
pub fn worker_count(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `runs` independent runs with seeds `cfg.seed + k`, aggregated per filter.
pub fn montecarlo(cfg: &RunConfig, runs: usize, threads: Option<usize>) -> Result<McResult, CampaignError> {
    if runs == 0 {
        return Err(CampaignError::NoRuns);
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(threads))
        .build()
        .map_err(|e| CampaignError::Pool(e.to_string()))?;
    let results: Vec<Result<RunSummary, CampaignError>> = pool.install(|| {
        (0..runs)
            .into_par_iter()
            .map(|k| {
                let seed = cfg.seed.wrapping_add(k as u64);
                let r = run_single(cfg, seed)?;
                Ok(RunSummary {
                    seed,
                    filters: r
                        .filters
                        .into_iter()
                        .map(|f| (f.name, f.metrics, f.nees, f.seconds))
                        .collect(),
                })
            })
            .collect()
    });
    let runs: Vec<RunSummary> = results.into_iter().collect::<Result<_, _>>()?;
    let names: Vec<&'static str> = runs[0].filters.iter().map(|f| f.0).collect();
    let mut reports = Vec::new();
    let mut nees = Vec::new();
    let mut seconds = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.filters[i].1.clone()).collect();
        reports.push((name.to_string(), mc_aggregate(&metrics)?));
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.filters[i].2).collect();
        if !vals.is_empty() {
            nees.push((name.to_string(), vals.iter().sum::<f64>() / vals.len() as f64));
        }
        let secs = runs.iter().map(|r| r.filters[i].3).sum::<f64>() / runs.len() as f64;
        seconds.push((name.to_string(), secs));
    }
    Ok(McResult {
        runs,
        reports,
        nees,
        seconds,
    })
}
