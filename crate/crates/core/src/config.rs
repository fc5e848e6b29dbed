//! Run configuration shared by the simulator, the campaign driver and the CLI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::Vec3;
use crate::model::{CovarianceUpdate, FilterOptions, MdMode, NoiseConfig, ResidualMode};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FilterSelection {
    Eqf,
    Iekf,
    #[default]
    Both,
}

impl FilterSelection {
    pub fn eqf(self) -> bool {
        matches!(self, FilterSelection::Eqf | FilterSelection::Both)
    }

    pub fn iekf(self) -> bool {
        matches!(self, FilterSelection::Iekf | FilterSelection::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResidualModeConfig {
    #[default]
    Subtract,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MdModeConfig {
    #[default]
    Analytic,
    FirstOrder,
}

/// How gyro samples are synthesized from the true trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GyroSampling {
    /// Mean rate over the following sample interval, `log(R_kᵀ R_{k+1}) / Δt`.
    #[default]
    DeltaAngle,
    /// True rate at the sample instant.
    Instantaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GyroConfig {
    pub rate: f64,
    pub sigma_w: f64,
    pub sigma_bw: f64,
    /// Std of the initial true bias per axis when `bias` is not given.
    pub bias_std: f64,
    pub bias: Option<[f64; 3]>,
    pub sampling: GyroSampling,
}

impl Default for GyroConfig {
    fn default() -> Self {
        GyroConfig {
            rate: 200.0,
            sigma_w: 8.73e-4,
            sigma_bw: 1.75e-5,
            bias_std: 0.02,
            bias: None,
            sampling: GyroSampling::DeltaAngle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    /// Body-frame measurement of a known inertial direction.
    #[default]
    Body,
    /// Inertial baseline direction from two GNSS receivers.
    Gnss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub id: usize,
    pub kind: SensorKind,
    /// Inertial reference direction of a body sensor (normalized on load).
    pub reference: [f64; 3],
    pub rate: f64,
    /// Direction noise std; synthesis noise for body sensors and filter tuning for both kinds.
    pub sigma_y: f64,
    /// Filter-side direction noise std; defaults to `sigma_y`.
    pub filter_sigma_y: Option<f64>,
    pub dropout: f64,
    pub jitter: f64,
    /// True extrinsic calibration as a rotation vector (rad); used for calibrated sensors.
    pub calibration: [f64; 3],
    /// Body-frame receiver baseline (m) of a GNSS sensor.
    pub baseline: [f64; 3],
    /// Receiver position noise std per axis (m).
    pub pos_std: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            id: 0,
            kind: SensorKind::Body,
            reference: [1.0 / 2f64.sqrt(), 0.0, -1.0 / 2f64.sqrt()],
            rate: 100.0,
            sigma_y: 0.2,
            filter_sigma_y: None,
            dropout: 0.0,
            jitter: 0.0,
            calibration: [0.35, -0.35, 0.3],
            baseline: [0.0, 1.0, 0.0],
            pos_std: 0.1,
        }
    }
}

impl SensorConfig {
    pub fn magnetometer(id: usize) -> Self {
        SensorConfig {
            id,
            ..Default::default()
        }
    }

    pub fn gnss(id: usize) -> Self {
        SensorConfig {
            id,
            kind: SensorKind::Gnss,
            rate: 20.0,
            sigma_y: 0.1,
            calibration: [0.0; 3],
            ..Default::default()
        }
    }

    pub fn reference_vec(&self) -> Vec3 {
        Vec3::from(self.reference).normalize()
    }

    pub fn filter_sigma(&self) -> f64 {
        self.filter_sigma_y.unwrap_or(self.sigma_y)
    }

    pub fn calibration_vec(&self) -> Vec3 {
        Vec3::from(self.calibration)
    }

    pub fn baseline_vec(&self) -> Vec3 {
        Vec3::from(self.baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Range of the per-axis Euler amplitudes (rad), drawn per run.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Range of the per-axis frequencies (Hz), drawn per run.
    pub frequency_min: f64,
    pub frequency_max: f64,
    /// Fixed (roll, pitch, yaw) amplitudes; overrides the random draw.
    pub amplitude: Option<[f64; 3]>,
    pub frequency: Option<[f64; 3]>,
    pub phase: Option<[f64; 3]>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            amplitude_min: 0.2,
            amplitude_max: 0.8,
            frequency_min: 0.1,
            frequency_max: 0.5,
            amplitude: None,
            frequency: None,
            phase: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Std of the random initial attitude error per axis (deg).
    pub attitude_std_deg: f64,
    /// Fixed initial attitude error (rotation vector, rad); overrides the random draw.
    pub attitude_error: Option<[f64; 3]>,
    /// Initial bias estimate.
    pub bias: [f64; 3],
    /// Initial calibration estimates as rotation vectors; identity when empty.
    pub calibration: Vec<[f64; 3]>,
    /// Initial covariance stds.
    pub sigma_attitude_deg: f64,
    pub sigma_bias: f64,
    pub sigma_calibration_deg: f64,
    /// Conjugate the IEKF initial covariance by the initialization rotations.
    pub iekf_adapt: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            attitude_std_deg: 10.0,
            attitude_error: None,
            bias: [0.0; 3],
            calibration: Vec::new(),
            sigma_attitude_deg: 20.0,
            sigma_bias: 0.05,
            sigma_calibration_deg: 40.0,
            iekf_adapt: true,
        }
    }
}

/// Filter-side process noise; unset fields fall back to the gyro model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterNoiseConfig {
    pub sigma_w: Option<f64>,
    pub sigma_bw: Option<f64>,
    pub sigma_kappa: f64,
}

impl Default for FilterNoiseConfig {
    fn default() -> Self {
        FilterNoiseConfig {
            sigma_w: None,
            sigma_bw: None,
            sigma_kappa: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub duration: f64,
    /// Number of calibrated sensors; the first `n` entries of `sensors`.
    pub n: usize,
    pub filter: FilterSelection,
    pub residual_mode: ResidualModeConfig,
    pub md_mode: MdModeConfig,
    pub joseph: bool,
    /// Fraction of the run counted as transient.
    pub transient_fraction: f64,
    pub gyro: GyroConfig,
    pub sensors: Vec<SensorConfig>,
    pub trajectory: TrajectoryConfig,
    pub init: InitConfig,
    pub filter_noise: FilterNoiseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            duration: 70.0,
            n: 1,
            filter: FilterSelection::Both,
            residual_mode: ResidualModeConfig::Subtract,
            md_mode: MdModeConfig::Analytic,
            joseph: false,
            transient_fraction: 0.5,
            gyro: GyroConfig::default(),
            sensors: vec![SensorConfig::magnetometer(1), SensorConfig::gnss(2)],
            trajectory: TrajectoryConfig::default(),
            init: InitConfig::default(),
            filter_noise: FilterNoiseConfig::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be non-negative, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("duration", self.duration)?;
        if self.n > self.sensors.len() {
            return Err(ConfigError::new(
                "n",
                format!(
                    "{} calibrated sensors requested but only {} sensors configured",
                    self.n,
                    self.sensors.len()
                ),
            ));
        }
        if !(self.transient_fraction > 0.0 && self.transient_fraction < 1.0) {
            return Err(ConfigError::new("transient_fraction", "must lie in (0, 1)"));
        }
        positive("gyro.rate", self.gyro.rate)?;
        non_negative("gyro.sigma_w", self.gyro.sigma_w)?;
        non_negative("gyro.sigma_bw", self.gyro.sigma_bw)?;
        non_negative("gyro.bias_std", self.gyro.bias_std)?;
        for (i, s) in self.sensors.iter().enumerate() {
            let f = |name: &str| format!("sensors[{i}].{name}");
            if self.sensors[..i].iter().any(|o| o.id == s.id) {
                return Err(ConfigError::new(f("id"), format!("duplicate id {}", s.id)));
            }
            positive(&f("rate"), s.rate)?;
            non_negative(&f("sigma_y"), s.sigma_y)?;
            positive(&f("filter_sigma_y"), s.filter_sigma())?;
            non_negative(&f("jitter"), s.jitter)?;
            if !(0.0..=1.0).contains(&s.dropout) {
                return Err(ConfigError::new(f("dropout"), "must lie in [0, 1]"));
            }
            match s.kind {
                SensorKind::Body => {
                    let norm = Vec3::from(s.reference).norm();
                    if !(norm.is_finite() && norm > 1e-9) {
                        return Err(ConfigError::new(f("reference"), "must be a non-zero vector"));
                    }
                }
                SensorKind::Gnss => {
                    if !(s.baseline_vec().norm() > 0.0) {
                        return Err(ConfigError::new(f("baseline"), "must be non-zero"));
                    }
                    non_negative(&f("pos_std"), s.pos_std)?;
                }
            }
            if s.calibration.iter().any(|c| !c.is_finite()) {
                return Err(ConfigError::new(f("calibration"), "must be finite"));
            }
        }
        let t = &self.trajectory;
        if !(0.0 <= t.amplitude_min && t.amplitude_min <= t.amplitude_max) {
            return Err(ConfigError::new("trajectory.amplitude_min", "must satisfy 0 ≤ min ≤ max"));
        }
        if !(0.0 <= t.frequency_min && t.frequency_min <= t.frequency_max) {
            return Err(ConfigError::new("trajectory.frequency_min", "must satisfy 0 ≤ min ≤ max"));
        }
        non_negative("init.attitude_std_deg", self.init.attitude_std_deg)?;
        positive("init.sigma_attitude_deg", self.init.sigma_attitude_deg)?;
        positive("init.sigma_bias", self.init.sigma_bias)?;
        positive("init.sigma_calibration_deg", self.init.sigma_calibration_deg)?;
        if !self.init.calibration.is_empty() && self.init.calibration.len() != self.n {
            return Err(ConfigError::new(
                "init.calibration",
                format!("expected {} entries, got {}", self.n, self.init.calibration.len()),
            ));
        }
        non_negative("filter_noise.sigma_kappa", self.filter_noise.sigma_kappa)?;
        if let Some(v) = self.filter_noise.sigma_w {
            non_negative("filter_noise.sigma_w", v)?;
        }
        if let Some(v) = self.filter_noise.sigma_bw {
            non_negative("filter_noise.sigma_bw", v)?;
        }
        Ok(())
    }

    pub fn filter_noise(&self) -> NoiseConfig {
        NoiseConfig {
            sigma_w: self.filter_noise.sigma_w.unwrap_or(self.gyro.sigma_w),
            sigma_bw: self.filter_noise.sigma_bw.unwrap_or(self.gyro.sigma_bw),
            sigma_kappa: self.filter_noise.sigma_kappa,
        }
    }

    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            residual_mode: match self.residual_mode {
                ResidualModeConfig::Subtract => ResidualMode::SubtractReference,
                ResidualModeConfig::Literal => ResidualMode::Literal,
            },
            md_mode: match self.md_mode {
                MdModeConfig::Analytic => MdMode::Analytic,
                MdModeConfig::FirstOrder => MdMode::FirstOrder,
            },
            covariance_update: if self.joseph {
                CovarianceUpdate::Joseph
            } else {
                CovarianceUpdate::Standard
            },
        }
    }
}
