//! Error metrics, RMSE aggregation and filter comparison tables.

use std::fmt::Write as _;

use thiserror::Error;

use crate::lie::{log_so3, Rotation};
use crate::replay::Snapshot;
use crate::sim::GroundTruthSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("estimate at t = {t} has no truth within {tol} s")]
    Misaligned { t: f64, tol: f64 },
    #[error("empty RMSE window")]
    EmptyWindow,
    #[error("comparison needs at least two filters, got {0}")]
    TooFewFilters(usize),
    #[error("calibration count mismatch: truth {truth}, estimate {estimate}")]
    CalibrationMismatch { truth: usize, estimate: usize },
}

/// Geodesic distance `‖log(R R̂ᵀ)‖` in degrees.
pub fn attitude_error_deg(r: &Rotation, rhat: &Rotation) -> f64 {
    log_so3(&(*r * rhat.transpose())).norm().to_degrees()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorSeries {
    pub t: Vec<f64>,
    pub att_err: Vec<f64>,
    pub bias_err: Vec<f64>,
    /// One series per calibration state.
    pub cal_err: Vec<Vec<f64>>,
}

impl ErrorSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Truth at `t`: geodesic interpolation between neighbouring samples.
/// Fails if `t` lies more than half a sample period outside the log.
pub fn truth_at(truth: &[GroundTruthSample], t: f64) -> Result<GroundTruthSample, EvalError> {
    let dt = match truth {
        [a, b, ..] => b.t - a.t,
        _ => 0.0,
    };
    let tol = 0.5 * dt.max(1e-9);
    let (first, last) = match (truth.first(), truth.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(EvalError::Misaligned { t, tol }),
    };
    if t < first.t - tol || t > last.t + tol {
        return Err(EvalError::Misaligned { t, tol });
    }
    let idx = truth.partition_point(|s| s.t <= t);
    if idx == 0 {
        return Ok(first.clone());
    }
    let a = &truth[idx - 1];
    let Some(b) = truth.get(idx) else {
        return Ok(a.clone());
    };
    let s = (t - a.t) / (b.t - a.t);
    if s <= 0.0 {
        return Ok(a.clone());
    }
    Ok(GroundTruthSample {
        t,
        attitude: a.attitude.slerp(&b.attitude, s),
        bias: a.bias * (1.0 - s) + b.bias * s,
        omega_true: a.omega_true * (1.0 - s) + b.omega_true * s,
        cal: a.cal.clone(),
    })
}

pub fn error_series(truth: &[GroundTruthSample], est: &[Snapshot]) -> Result<ErrorSeries, EvalError> {
    let n = est.first().map_or(0, |s| s.state.cal.len());
    let mut out = ErrorSeries {
        cal_err: vec![Vec::with_capacity(est.len()); n],
        ..Default::default()
    };
    for s in est {
        let tr = truth_at(truth, s.t)?;
        if tr.cal.len() != s.state.cal.len() {
            return Err(EvalError::CalibrationMismatch {
                truth: tr.cal.len(),
                estimate: s.state.cal.len(),
            });
        }
        out.t.push(s.t);
        out.att_err.push(attitude_error_deg(&tr.attitude, &s.state.attitude));
        out.bias_err.push((tr.bias - s.state.bias).norm());
        for (i, (c, ch)) in tr.cal.iter().zip(&s.state.cal).enumerate() {
            out.cal_err[i].push(attitude_error_deg(c, ch));
        }
    }
    Ok(out)
}

pub fn rmse(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyWindow);
    }
    Ok((values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt())
}

/// RMSE of each state over one time window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateRmse {
    pub attitude_deg: f64,
    pub bias: f64,
    pub cal_deg: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub transient: StateRmse,
    pub asymptotic: StateRmse,
}

fn window_rmse(series: &ErrorSeries, range: std::ops::Range<usize>) -> Result<StateRmse, EvalError> {
    Ok(StateRmse {
        attitude_deg: rmse(&series.att_err[range.clone()])?,
        bias: rmse(&series.bias_err[range.clone()])?,
        cal_deg: series
            .cal_err
            .iter()
            .map(|c| rmse(&c[range.clone()]))
            .collect::<Result<_, _>>()?,
    })
}

/// Transient RMSE over `t < split`, asymptotic over `t ≥ split`.
pub fn run_metrics(series: &ErrorSeries, split: f64) -> Result<RunMetrics, EvalError> {
    let k = series.t.partition_point(|&t| t < split);
    Ok(RunMetrics {
        transient: window_rmse(series, 0..k)?,
        asymptotic: window_rmse(series, k..series.len())?,
    })
}

/// Monte-Carlo summary: per-run RMSE averaged over runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RmseReport {
    pub runs: usize,
    pub transient: StateRmse,
    pub asymptotic: StateRmse,
}

fn mean_state(items: &[&StateRmse]) -> StateRmse {
    let k = items.len() as f64;
    let n = items[0].cal_deg.len();
    StateRmse {
        attitude_deg: items.iter().map(|s| s.attitude_deg).sum::<f64>() / k,
        bias: items.iter().map(|s| s.bias).sum::<f64>() / k,
        cal_deg: (0..n)
            .map(|i| items.iter().map(|s| s.cal_deg[i]).sum::<f64>() / k)
            .collect(),
    }
}

pub fn mc_aggregate(runs: &[RunMetrics]) -> Result<RmseReport, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyWindow);
    }
    let tr: Vec<_> = runs.iter().map(|r| &r.transient).collect();
    let asy: Vec<_> = runs.iter().map(|r| &r.asymptotic).collect();
    Ok(RmseReport {
        runs: runs.len(),
        transient: mean_state(&tr),
        asymptotic: mean_state(&asy),
    })
}

/// Relative tolerance for treating two table entries as tied.
pub const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub values: Vec<f64>,
    pub best: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub filters: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn mark_min(values: &[f64]) -> Vec<bool> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    values
        .iter()
        .map(|&v| v - min <= TIE_RTOL * min.abs().max(f64::MIN_POSITIVE))
        .collect()
}

/// Side-by-side table of transient and asymptotic RMSE per state, lowest
/// entry per row marked. `runtime` (seconds per filter) adds a relative
/// runtime row normalized to the first filter.
pub fn compare_report(
    reports: &[(String, RmseReport)],
    runtime: Option<&[f64]>,
) -> Result<Comparison, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewFilters(reports.len()));
    }
    let mut rows = Vec::new();
    let mut push = |label: String, values: Vec<f64>| {
        let best = mark_min(&values);
        rows.push(ComparisonRow { label, values, best });
    };
    let n_cal = reports[0].1.transient.cal_deg.len();
    for (phase, pick) in [
        ("transient", (|r: &RmseReport| &r.transient) as fn(&RmseReport) -> &StateRmse),
        ("asymptotic", |r: &RmseReport| &r.asymptotic),
    ] {
        push(
            format!("{phase}_attitude_deg"),
            reports.iter().map(|(_, r)| pick(r).attitude_deg).collect(),
        );
        push(format!("{phase}_bias"), reports.iter().map(|(_, r)| pick(r).bias).collect());
        for i in 0..n_cal {
            push(
                format!("{phase}_cal{}_deg", i + 1),
                reports
                    .iter()
                    .map(|(_, r)| pick(r).cal_deg.get(i).copied().unwrap_or(f64::NAN))
                    .collect(),
            );
        }
    }
    if let Some(times) = runtime {
        let base = times[0];
        push("runtime_percent".into(), times.iter().map(|t| 100.0 * t / base).collect());
    }
    Ok(Comparison {
        filters: reports.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

impl Comparison {
    /// Plain-text table; best entries are wrapped in `*`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28}", "metric");
        for f in &self.filters {
            let _ = write!(s, "{f:>16}");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:<28}", row.label);
            for (v, b) in row.values.iter().zip(&row.best) {
                let cell = if *b { format!("*{v:.4}*") } else { format!("{v:.4}") };
                let _ = write!(s, "{cell:>16}");
            }
            s.push('\n');
        }
        s
    }

    /// CSV with one value and one best-flag column per filter.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for f in &self.filters {
            let _ = write!(s, ",{f},{f}_best");
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.label);
            for (v, b) in row.values.iter().zip(&row.best) {
                let _ = write!(s, ",{v:.16e},{}", u8::from(*b));
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the recorded attitude NEES values at `t ≥ after`.
pub fn mean_nees(snapshots: &[Snapshot], after: f64) -> Option<f64> {
    let vals: Vec<f64> = snapshots
        .iter()
        .filter(|s| s.t >= after)
        .filter_map(|s| s.nees_attitude)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
