//! Sensor descriptions, noise parameters, measurements and the shared
//! filter interface.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lie::{LieError, Vec3};
use crate::symmetry::{SensorLayout, SymmetryError, SystemState};

/// Tolerance on the norm of a fixed reference direction.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("innovation covariance is ill-conditioned (condition number {0:.3e}); update skipped")]
    SingularS(f64),
    #[error("unknown sensor id {0}")]
    UnknownSensor(usize),
    #[error("sensor {0} has a time-varying reference but the measurement carries none")]
    MissingReference(usize),
    #[error("invalid sensor configuration: {0}")]
    InvalidSensors(String),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Continuous-time process noise densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Gyro white noise, rad/√s.
    pub sigma_w: f64,
    /// Bias random walk, rad/(s·√s).
    pub sigma_bw: f64,
    /// Calibration pseudo-noise, rad/√s.
    pub sigma_kappa: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_w: 8.73e-4,
            sigma_bw: 1.75e-5,
            sigma_kappa: 1e-4,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig {
            sigma_w: 0.0,
            sigma_bw: 0.0,
            sigma_kappa: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.sigma_w) && ok(self.sigma_bw) && ok(self.sigma_kappa) {
            Ok(())
        } else {
            Err(FilterError::InvalidSensors(format!(
                "noise densities must be finite and non-negative: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Fixed(Vec3),
    /// Reference supplied with each measurement (e.g. a GNSS baseline).
    TimeVarying,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub id: usize,
    pub calibrated: bool,
    pub reference: Reference,
    /// Discrete direction noise std (unit-less).
    pub sigma_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMeasurement {
    pub t: f64,
    pub sensor_id: usize,
    pub y: Vec3,
    pub reference: Option<Vec3>,
}

/// Ordered sensor list with calibrated sensors first.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSet {
    sensors: Vec<SensorModel>,
    layout: SensorLayout,
}

/// One measurement resolved against its sensor.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedMeasurement {
    pub y: Vec3,
    pub d: Vec3,
    pub cal: Option<usize>,
    pub sigma_y: f64,
}

impl SensorSet {
    pub fn new(sensors: Vec<SensorModel>) -> Result<Self, FilterError> {
        let calibrated = sensors.iter().take_while(|s| s.calibrated).count();
        if sensors.iter().skip(calibrated).any(|s| s.calibrated) {
            return Err(FilterError::InvalidSensors(
                "calibrated sensors must precede uncalibrated ones".into(),
            ));
        }
        for (i, s) in sensors.iter().enumerate() {
            if sensors[..i].iter().any(|o| o.id == s.id) {
                return Err(FilterError::InvalidSensors(format!("duplicate sensor id {}", s.id)));
            }
            if let Reference::Fixed(d) = s.reference {
                if (d.norm() - 1.0).abs() > UNIT_TOL {
                    return Err(FilterError::InvalidSensors(format!(
                        "sensor {} reference is not a unit vector",
                        s.id
                    )));
                }
            }
            if !(s.sigma_y.is_finite() && s.sigma_y >= 0.0) {
                return Err(FilterError::InvalidSensors(format!(
                    "sensor {} has invalid sigma_y",
                    s.id
                )));
            }
        }
        let layout = SensorLayout::new(sensors.len(), calibrated)?;
        Ok(SensorSet { sensors, layout })
    }

    #[inline]
    pub fn layout(&self) -> &SensorLayout {
        &self.layout
    }

    #[inline]
    pub fn n_cal(&self) -> usize {
        self.layout.calibrated
    }

    #[inline]
    pub fn sensors(&self) -> &[SensorModel] {
        &self.sensors
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.sensors.iter().position(|s| s.id == id)
    }

    pub fn get(&self, id: usize) -> Option<&SensorModel> {
        self.sensors.iter().find(|s| s.id == id)
    }

    pub fn resolve(&self, m: &DirectionMeasurement) -> Result<ResolvedMeasurement, FilterError> {
        let pos = self
            .position(m.sensor_id)
            .ok_or(FilterError::UnknownSensor(m.sensor_id))?;
        let s = &self.sensors[pos];
        let d = match (s.reference, m.reference) {
            (_, Some(d)) => d,
            (Reference::Fixed(d), None) => d,
            (Reference::TimeVarying, None) => return Err(FilterError::MissingReference(s.id)),
        };
        Ok(ResolvedMeasurement {
            y: m.y,
            d,
            cal: self.layout.cal_index(pos),
            sigma_y: s.sigma_y,
        })
    }
}

/// How the update residual is formed from the mapped measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualMode {
    /// `ρ(X̂⁻¹, y) − d`.
    #[default]
    SubtractReference,
    /// `ρ(X̂⁻¹, y)` as written in the original algorithm listing.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MdMode {
    /// Exact integral of the transition-weighted process noise.
    #[default]
    Analytic,
    /// `M_d ≈ M_c Δt`.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceUpdate {
    #[default]
    Standard,
    Joseph,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterOptions {
    pub residual_mode: ResidualMode,
    pub md_mode: MdMode,
    pub covariance_update: CovarianceUpdate,
}

/// Common interface of the attitude filters.
pub trait AttitudeFilter: Send {
    fn name(&self) -> &'static str;
    fn time(&self) -> f64;
    fn set_time(&mut self, t: f64);
    fn propagate(&mut self, omega: &Vec3, dt: f64) -> Result<(), FilterError>;
    /// Applies one stacked update. On `SingularS` the state is left untouched.
    fn update(&mut self, meas: &[DirectionMeasurement]) -> Result<(), FilterError>;
    fn estimate(&self) -> SystemState;
    fn covariance(&self) -> &DMatrix<f64>;
    /// Error of the estimate relative to `truth` in the filter's own coordinates.
    fn error_coords(&self, truth: &SystemState) -> Result<DVector<f64>, FilterError>;
}

/// Symmetrizes in place.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

pub(crate) fn check_covariance(sigma: &DMatrix<f64>, dim: usize) -> Result<(), FilterError> {
    if sigma.nrows() != dim || sigma.ncols() != dim {
        return Err(FilterError::BadDimension(format!(
            "covariance is {}x{}, expected {dim}x{dim}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let scale = sigma.amax().max(1.0);
    if (sigma - sigma.transpose()).amax() > 1e-9 * scale {
        return Err(FilterError::BadDimension("covariance is not symmetric".into()));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::BadDimension("covariance has non-finite entries".into()));
    }
    let min_eig = sigma.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-9 * sigma.trace().abs().max(1e-300) {
        return Err(FilterError::BadDimension(format!(
            "covariance is not positive semi-definite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

/// Kalman gain `K = Σ Hᵀ S⁻¹` with `S = H Σ Hᵀ + N`, via Cholesky.
pub(crate) fn kalman_gain(
    sigma: &DMatrix<f64>,
    h: &DMatrix<f64>,
    n: &DMatrix<f64>,
) -> Result<DMatrix<f64>, FilterError> {
    let hs = h * sigma;
    let mut s = &hs * h.transpose() + n;
    symmetrize(&mut s);
    let eig = s.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= 1e12) {
        return Err(FilterError::SingularS(cond));
    }
    let chol = s.cholesky().ok_or(FilterError::SingularS(cond))?;
    Ok(chol.solve(&hs).transpose())
}

/// `(I − K H) Σ` or its Joseph form, symmetrized.
pub(crate) fn covariance_update(
    sigma: &DMatrix<f64>,
    k: &DMatrix<f64>,
    h: &DMatrix<f64>,
    n: &DMatrix<f64>,
    form: CovarianceUpdate,
) -> DMatrix<f64> {
    let dim = sigma.nrows();
    let ikh = DMatrix::identity(dim, dim) - k * h;
    let mut out = match form {
        CovarianceUpdate::Standard => &ikh * sigma,
        CovarianceUpdate::Joseph => &ikh * sigma * ikh.transpose() + k * n * k.transpose(),
    };
    symmetrize(&mut out);
    out
}
