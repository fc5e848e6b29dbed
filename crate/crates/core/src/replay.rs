//! Drives a filter through a gyro log and a merged direction log.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{AttitudeFilter, DirectionMeasurement, FilterError};
use crate::sim::GyroSample;
use crate::symmetry::{SymmetryError, SystemState};

/// Measurements closer than this are fused into one stacked update.
pub const SAME_TIME_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{stream} timestamps not sorted at row {row}")]
    Unsorted { stream: &'static str, row: usize },
    #[error("empty gyro log")]
    NoGyro,
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Estimate recorded at a gyro timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub state: SystemState,
    pub sigma_diag: DVector<f64>,
    /// NEES of the attitude block, when truth is available.
    pub nees_attitude: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayOutput {
    pub snapshots: Vec<Snapshot>,
    pub updates: usize,
    pub skipped_updates: usize,
}

pub fn check_sorted(gyro: &[GyroSample], meas: &[DirectionMeasurement]) -> Result<(), ReplayError> {
    if let Some(i) = gyro.windows(2).position(|w| !(w[1].t > w[0].t)) {
        return Err(ReplayError::Unsorted { stream: "gyro", row: i + 1 });
    }
    if let Some(i) = meas.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(ReplayError::Unsorted { stream: "measurement", row: i + 1 });
    }
    Ok(())
}

/// `εᵀ Σ⁻¹ ε` over the first three error coordinates.
pub fn attitude_nees(eps: &DVector<f64>, sigma: &DMatrix<f64>) -> Option<f64> {
    let e = eps.rows(0, 3).into_owned();
    let block = sigma.view((0, 0), (3, 3)).into_owned();
    block.cholesky().map(|c| e.dot(&c.solve(&e)))
}

struct Driver<'a, F: ?Sized> {
    filter: &'a mut F,
    meas: &'a [DirectionMeasurement],
    next: usize,
    out: ReplayOutput,
}

impl<F: AttitudeFilter + ?Sized> Driver<'_, F> {
    fn advance_to(&mut self, t: f64, omega: &crate::lie::Vec3) -> Result<(), FilterError> {
        let dt = t - self.filter.time();
        if dt > 0.0 {
            self.filter.propagate(omega, dt)?;
        }
        self.filter.set_time(t);
        Ok(())
    }

    /// Applies every pending measurement group stamped before `t_end`
    /// (or at most `t_end` when `inclusive`), propagating with `omega`.
    fn consume(&mut self, t_end: f64, inclusive: bool, omega: &crate::lie::Vec3) -> Result<(), FilterError> {
        while let Some(first) = self.meas.get(self.next) {
            let due = if inclusive {
                first.t <= t_end + SAME_TIME_TOL
            } else {
                first.t < t_end - SAME_TIME_TOL
            };
            if !due {
                break;
            }
            let t0 = first.t;
            let mut end = self.next;
            while end < self.meas.len() && self.meas[end].t - t0 <= SAME_TIME_TOL {
                end += 1;
            }
            if t0 > self.filter.time() {
                self.advance_to(t0, omega)?;
            }
            match self.filter.update(&self.meas[self.next..end]) {
                Ok(()) => self.out.updates += 1,
                Err(FilterError::SingularS(_)) => self.out.skipped_updates += 1,
                Err(e) => return Err(e),
            }
            self.next = end;
        }
        Ok(())
    }
}

/// Replays the logs through `filter`. Gyro readings are held over their
/// interval; measurements are applied at their timestamps. A snapshot is
/// recorded at every gyro time after the measurements stamped there.
pub fn replay<F: AttitudeFilter + ?Sized>(
    filter: &mut F,
    gyro: &[GyroSample],
    meas: &[DirectionMeasurement],
    truth: Option<&dyn Fn(f64) -> SystemState>,
) -> Result<ReplayOutput, ReplayError> {
    check_sorted(gyro, meas)?;
    let first = gyro.first().ok_or(ReplayError::NoGyro)?;
    filter.set_time(first.t);
    let mut d = Driver {
        filter,
        meas,
        next: 0,
        out: ReplayOutput::default(),
    };
    d.out.snapshots.reserve(gyro.len());
    for (k, g) in gyro.iter().enumerate() {
        d.consume(g.t, true, &g.omega)?;
        let state = d.filter.estimate();
        let sigma = d.filter.covariance();
        let nees_attitude = match truth {
            Some(tr) => match d.filter.error_coords(&tr(g.t)) {
                Ok(eps) => attitude_nees(&eps, sigma),
                Err(FilterError::Symmetry(SymmetryError::OutOfChart(_))) => None,
                Err(e) => return Err(e.into()),
            },
            None => None,
        };
        d.out.snapshots.push(Snapshot {
            t: g.t,
            state,
            sigma_diag: sigma.diagonal(),
            nees_attitude,
        });
        let t_next = match gyro.get(k + 1) {
            Some(n) => n.t,
            None if k > 0 => g.t + (g.t - gyro[k - 1].t),
            None => g.t,
        };
        d.consume(t_next, false, &g.omega)?;
        d.advance_to(t_next, &g.omega)?;
    }
    Ok(d.out)
}
