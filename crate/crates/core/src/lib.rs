//! Equivariant and invariant Kalman filters for gyro-aided attitude
//! estimation with gyroscope bias and online extrinsic calibration of
//! direction sensors, plus the simulation and evaluation harness around them.

pub mod campaign;
pub mod config;
pub mod eqf;
pub mod eval;
pub mod iekf;
pub mod lie;
pub mod model;
pub mod replay;
pub mod runtime;
pub mod sim;
pub mod symmetry;

pub use config::{ConfigError, FilterSelection, RunConfig, SensorConfig, SensorKind};
pub use eqf::Eqf;
pub use iekf::Iekf;
pub use lie::{Mat3, Rotation, Vec3};
pub use model::{
    AttitudeFilter, DirectionMeasurement, FilterError, FilterOptions, NoiseConfig, Reference, SensorModel,
    SensorSet,
};
pub use replay::{replay, Snapshot};
pub use sim::{GroundTruthSample, GyroSample, SimData};
pub use symmetry::{GroupElement, SystemState};
