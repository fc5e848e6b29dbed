//! Ground truth and sensor synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::{ConfigError, GyroConfig, GyroSampling, RunConfig, SensorKind, TrajectoryConfig};
use crate::lie::{exp_so3, log_so3, Rotation, Vec3};
use crate::model::{DirectionMeasurement, Reference, SensorModel, SensorSet};
use crate::symmetry::{output_component, SystemState};

/// RNG stream ids. Sensor streams are offset by the sensor's position.
pub mod streams {
    pub const TRAJECTORY: u64 = 1;
    pub const GYRO_NOISE: u64 = 2;
    pub const BIAS_WALK: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRUE_BIAS: u64 = 5;
    pub const SENSOR_NOISE: u64 = 100;
    pub const SENSOR_SCHEDULE: u64 = 200;
}

/// Generator for stream `stream` of run seed `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("GNSS baseline is degenerate ({0:.3e} m)")]
    DegenerateBaseline(f64),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

pub fn gaussian3(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Euler-angle Lissajous curve `θ_k(t) = A_k sin(2π f_k t + φ_k)` for
/// (roll, pitch, yaw), with attitude `Rz(yaw) Ry(pitch) Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lissajous {
    pub amplitude: [f64; 3],
    pub freq_hz: [f64; 3],
    pub phase: [f64; 3],
}

impl Lissajous {
    pub fn still() -> Self {
        Lissajous {
            amplitude: [0.0; 3],
            freq_hz: [0.0; 3],
            phase: [0.0; 3],
        }
    }

    pub fn from_config(cfg: &TrajectoryConfig, rng: &mut impl Rng) -> Self {
        let mut draw = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let mut amplitude = [0.0; 3];
        let mut freq_hz = [0.0; 3];
        let mut phase = [0.0; 3];
        for k in 0..3 {
            amplitude[k] = draw(cfg.amplitude_min, cfg.amplitude_max);
            freq_hz[k] = draw(cfg.frequency_min, cfg.frequency_max);
            phase[k] = draw(0.0, std::f64::consts::TAU);
        }
        Lissajous {
            amplitude: cfg.amplitude.unwrap_or(amplitude),
            freq_hz: cfg.frequency.unwrap_or(freq_hz),
            phase: cfg.phase.unwrap_or(phase),
        }
    }

    /// Euler angles and their rates.
    pub fn euler(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let mut ang = [0.0; 3];
        let mut rate = [0.0; 3];
        for k in 0..3 {
            let w = std::f64::consts::TAU * self.freq_hz[k];
            let (s, c) = (w * t + self.phase[k]).sin_cos();
            ang[k] = self.amplitude[k] * s;
            rate[k] = self.amplitude[k] * w * c;
        }
        (ang, rate)
    }

    pub fn attitude(&self, t: f64) -> Rotation {
        let (a, _) = self.euler(t);
        Rotation::from_euler_zyx(a[0], a[1], a[2])
    }

    /// Body angular velocity `vee(Rᵀ Ṙ)`.
    pub fn omega(&self, t: f64) -> Vec3 {
        let (a, r) = self.euler(t);
        let rx = exp_so3(&Vec3::new(a[0], 0.0, 0.0));
        let ry = exp_so3(&Vec3::new(0.0, a[1], 0.0));
        rx.transpose() * (ry.transpose() * Vec3::new(0.0, 0.0, r[2]))
            + rx.transpose() * Vec3::new(0.0, r[1], 0.0)
            + Vec3::new(r[0], 0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSample {
    pub t: f64,
    pub attitude: Rotation,
    pub bias: Vec3,
    pub omega_true: Vec3,
    pub cal: Vec<Rotation>,
}

impl GroundTruthSample {
    pub fn state(&self) -> SystemState {
        SystemState {
            attitude: self.attitude,
            bias: self.bias,
            cal: self.cal.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GyroSample {
    pub t: f64,
    pub omega: Vec3,
}

/// Sample times `k / rate` for `k / rate < duration`.
pub fn sample_times(duration: f64, rate: f64) -> Vec<f64> {
    let count = (duration * rate - 1e-9).ceil().max(0.0) as usize;
    (0..count).map(|k| k as f64 / rate).collect()
}

/// Attitude trajectory sampled at `rate`; bias and calibration left empty.
pub fn gen_trajectory(
    cfg: &TrajectoryConfig,
    duration: f64,
    rate: f64,
    seed: u64,
) -> (Lissajous, Vec<GroundTruthSample>) {
    let liss = Lissajous::from_config(cfg, &mut rng_for(seed, streams::TRAJECTORY));
    let samples = sample_times(duration, rate)
        .into_iter()
        .map(|t| GroundTruthSample {
            t,
            attitude: liss.attitude(t),
            bias: Vec3::zeros(),
            omega_true: liss.omega(t),
            cal: Vec::new(),
        })
        .collect();
    (liss, samples)
}

/// Gyro readings over the intervals `[t_k, t_k + 1/rate)`. Returns the
/// readings and the true bias held over each interval.
pub fn synth_gyro(
    liss: &Lissajous,
    times: &[f64],
    gyro: &GyroConfig,
    bias0: Vec3,
    seed: u64,
) -> (Vec<GyroSample>, Vec<Vec3>) {
    let dt = 1.0 / gyro.rate;
    let mut noise_rng = rng_for(seed, streams::GYRO_NOISE);
    let mut walk_rng = rng_for(seed, streams::BIAS_WALK);
    let noise_std = gyro.sigma_w / dt.sqrt();
    let walk_std = gyro.sigma_bw * dt.sqrt();
    let mut bias = bias0;
    let mut out = Vec::with_capacity(times.len());
    let mut biases = Vec::with_capacity(times.len());
    for &t in times {
        let rate = match gyro.sampling {
            GyroSampling::Instantaneous => liss.omega(t),
            GyroSampling::DeltaAngle => {
                let r0 = liss.attitude(t);
                let r1 = liss.attitude(t + dt);
                log_so3(&(r0.transpose() * r1)) / dt
            }
        };
        let mut omega = rate + bias;
        if noise_std > 0.0 {
            omega += gaussian3(&mut noise_rng) * noise_std;
        }
        out.push(GyroSample { t, omega });
        biases.push(bias);
        if walk_std > 0.0 {
            bias += gaussian3(&mut walk_rng) * walk_std;
        }
    }
    (out, biases)
}

/// Noisy body-frame direction `normalize(h_i(ξ) + n)`.
pub fn synth_direction(
    state: &SystemState,
    reference: &Vec3,
    cal: Option<usize>,
    sigma_y: f64,
    rng: &mut impl Rng,
) -> Vec3 {
    let mut y = output_component(state, reference, cal);
    if sigma_y > 0.0 {
        y += gaussian3(rng) * sigma_y;
    }
    y.normalize()
}

/// Dual-receiver baseline direction. Returns the body-frame direction `y`
/// and the measured inertial reference `d = (p₁ − p₂)/‖p₁ − p₂‖`.
pub fn synth_gnss_direction(
    state: &SystemState,
    baseline: &Vec3,
    cal: Option<usize>,
    pos_std: f64,
    rng: &mut impl Rng,
) -> Result<(Vec3, Vec3), SimError> {
    let mount = match cal {
        Some(i) => state.cal[i] * *baseline,
        None => *baseline,
    };
    let lever = state.attitude * mount;
    let mut p1 = lever * 0.5;
    let mut p2 = -lever * 0.5;
    if pos_std > 0.0 {
        p1 += gaussian3(rng) * pos_std;
        p2 += gaussian3(rng) * pos_std;
    }
    let diff = p1 - p2;
    let len = diff.norm();
    if len < 1e-6 {
        return Err(SimError::DegenerateBaseline(len));
    }
    Ok((baseline.normalize(), diff / len))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSchedule {
    pub rate: f64,
    pub dropout: f64,
    pub jitter: f64,
}

/// Retained slots of one sensor as `(sample time, timestamp)`. The
/// timestamp carries uniform jitter in `[−jitter, jitter]`, clamped to
/// `[0, duration)`.
pub fn schedule_times(
    schedule: &SensorSchedule,
    duration: f64,
    rng: &mut impl Rng,
) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for t in sample_times(duration, schedule.rate) {
        let dropped = rng.gen::<f64>() < schedule.dropout;
        let shift = if schedule.jitter > 0.0 {
            rng.gen_range(-schedule.jitter..=schedule.jitter)
        } else {
            0.0
        };
        if !dropped {
            out.push((t, (t + shift).clamp(0.0, duration * (1.0 - f64::EPSILON))));
        }
    }
    out
}

/// Schedules every sensor, samples each retained slot through `sample` at
/// its true time, stamps it with the jittered time and merges the streams
/// sorted by timestamp, ties broken by sensor id.
pub fn schedule_and_drop<F>(
    schedules: &[(usize, SensorSchedule)],
    duration: f64,
    seed: u64,
    mut sample: F,
) -> Vec<DirectionMeasurement>
where
    F: FnMut(usize, usize, f64) -> Option<DirectionMeasurement>,
{
    let mut all = Vec::new();
    for (pos, (id, sch)) in schedules.iter().enumerate() {
        let mut rng = rng_for(seed, streams::SENSOR_SCHEDULE + pos as u64);
        for (t, stamp) in schedule_times(sch, duration, &mut rng) {
            if let Some(mut m) = sample(pos, *id, t) {
                m.t = stamp;
                all.push(m);
            }
        }
    }
    all.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.sensor_id.cmp(&b.sensor_id)));
    all
}

/// A fully synthesized run.
#[derive(Debug, Clone)]
pub struct SimData {
    pub lissajous: Lissajous,
    /// Truth at each gyro time.
    pub truth: Vec<GroundTruthSample>,
    pub gyro: Vec<GyroSample>,
    pub meas: Vec<DirectionMeasurement>,
    pub sensors: SensorSet,
    pub true_cal: Vec<Rotation>,
    pub duration: f64,
}

impl SimData {
    /// True state at an arbitrary time (bias held per gyro interval).
    pub fn state_at(&self, t: f64) -> SystemState {
        let dt = if self.truth.len() > 1 {
            self.truth[1].t - self.truth[0].t
        } else {
            1.0
        };
        let k = ((t / dt).floor().max(0.0) as usize).min(self.truth.len().saturating_sub(1));
        SystemState {
            attitude: self.lissajous.attitude(t),
            bias: self.truth.get(k).map(|s| s.bias).unwrap_or_else(Vec3::zeros),
            cal: self.true_cal.clone(),
        }
    }
}

/// Filter-side sensor set described by a run configuration.
pub fn sensor_set(cfg: &RunConfig) -> Result<SensorSet, ConfigError> {
    let models = cfg
        .sensors
        .iter()
        .enumerate()
        .map(|(i, s)| SensorModel {
            id: s.id,
            calibrated: i < cfg.n,
            reference: match s.kind {
                SensorKind::Body => Reference::Fixed(s.reference_vec()),
                SensorKind::Gnss => Reference::TimeVarying,
            },
            sigma_y: s.filter_sigma(),
        })
        .collect();
    SensorSet::new(models).map_err(|e| ConfigError::new("sensors", e.to_string()))
}

/// Synthesizes truth, gyro and direction logs for one run.
pub fn simulate(cfg: &RunConfig, seed: u64) -> Result<SimData, SimError> {
    cfg.validate()?;
    let sensors = sensor_set(cfg)?;
    let liss = Lissajous::from_config(&cfg.trajectory, &mut rng_for(seed, streams::TRAJECTORY));
    let times = sample_times(cfg.duration, cfg.gyro.rate);
    let bias0 = match cfg.gyro.bias {
        Some(b) => Vec3::from(b),
        None => gaussian3(&mut rng_for(seed, streams::TRUE_BIAS)) * cfg.gyro.bias_std,
    };
    let (gyro, biases) = synth_gyro(&liss, &times, &cfg.gyro, bias0, seed);
    let true_cal: Vec<Rotation> = cfg.sensors[..cfg.n]
        .iter()
        .map(|s| exp_so3(&s.calibration_vec()))
        .collect();
    let truth: Vec<_> = times
        .iter()
        .zip(&biases)
        .map(|(&t, b)| GroundTruthSample {
            t,
            attitude: liss.attitude(t),
            bias: *b,
            omega_true: liss.omega(t),
            cal: true_cal.clone(),
        })
        .collect();

    let schedules: Vec<_> = cfg
        .sensors
        .iter()
        .map(|s| {
            (
                s.id,
                SensorSchedule {
                    rate: s.rate,
                    dropout: s.dropout,
                    jitter: s.jitter,
                },
            )
        })
        .collect();
    let mut noise_rngs: Vec<_> = (0..cfg.sensors.len())
        .map(|i| rng_for(seed, streams::SENSOR_NOISE + i as u64))
        .collect();
    let state_at = |t: f64| SystemState {
        attitude: liss.attitude(t),
        bias: Vec3::zeros(),
        cal: true_cal.clone(),
    };
    let meas = schedule_and_drop(&schedules, cfg.duration, seed, |pos, id, t| {
        let s = &cfg.sensors[pos];
        let cal = (pos < cfg.n).then_some(pos);
        let state = state_at(t);
        let rng = &mut noise_rngs[pos];
        match s.kind {
            SensorKind::Body => Some(DirectionMeasurement {
                t,
                sensor_id: id,
                y: synth_direction(&state, &s.reference_vec(), cal, s.sigma_y, rng),
                reference: None,
            }),
            SensorKind::Gnss => synth_gnss_direction(&state, &s.baseline_vec(), cal, s.pos_std, rng)
                .ok()
                .map(|(y, d)| DirectionMeasurement {
                    t,
                    sensor_id: id,
                    y,
                    reference: Some(d),
                }),
        }
    });

    Ok(SimData {
        lissajous: liss,
        truth,
        gyro,
        meas,
        sensors,
        true_cal,
        duration: cfg.duration,
    })
}
