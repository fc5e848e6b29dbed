//! Imperfect invariant EKF: right-invariant attitude and calibration errors,
//! Euclidean bias error.

use nalgebra::{DMatrix, DVector};

use crate::eqf::{input_noise, state_dim};
use crate::lie::{exp_so3, log_so3, wedge, Mat3, Vec3};
use crate::model::{
    check_covariance, covariance_update, kalman_gain, symmetrize, AttitudeFilter,
    DirectionMeasurement, FilterError, FilterOptions, NoiseConfig, ResolvedMeasurement,
    SensorSet,
};
use crate::symmetry::{GroupElement, SystemState};

fn set_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Mat3) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

#[derive(Debug, Clone, PartialEq)]
pub struct IekfState {
    pub xi: SystemState,
    pub sigma: DMatrix<f64>,
    pub t: f64,
}

impl IekfState {
    pub fn n(&self) -> usize {
        self.xi.n()
    }
}

/// `Π₀ = blkdiag(Â, Â, B̂_1 … B̂_n)` for the group element representing `xi0`.
pub fn init_adaptation(xi0: &SystemState) -> DMatrix<f64> {
    crate::eqf::eqf_b0(&GroupElement::from_state(xi0))
}

pub fn iekf_init(
    xi0: &SystemState,
    sigma0: &DMatrix<f64>,
    adapt: bool,
) -> Result<IekfState, FilterError> {
    check_covariance(sigma0, state_dim(xi0.n()))?;
    let sigma = if adapt {
        let pi = init_adaptation(xi0);
        let mut s = &pi * sigma0 * pi.transpose();
        symmetrize(&mut s);
        s
    } else {
        sigma0.clone()
    };
    Ok(IekfState {
        xi: xi0.clone(),
        sigma,
        t: 0.0,
    })
}

/// `F = [[0, −R̂, 0], [0, 0, 0], [0, 0, 0]]`.
pub fn iekf_f(rhat: &Mat3, n: usize) -> DMatrix<f64> {
    let d = state_dim(n);
    let mut f = DMatrix::zeros(d, d);
    set_block(&mut f, 0, 3, &(-rhat));
    f
}

/// `Φ = I + F Δt`, exact since `F² = 0`.
pub fn iekf_phi(rhat: &Mat3, dt: f64, n: usize) -> DMatrix<f64> {
    let d = state_dim(n);
    DMatrix::identity(d, d) + iekf_f(rhat, n) * dt
}

/// `M_c = B Σ_u Bᵀ` with `B = blkdiag(R̂, I, Ĉ_1 … Ĉ_n)`.
pub fn iekf_mc(xi: &SystemState, noise: &NoiseConfig) -> DMatrix<f64> {
    let n = xi.n();
    let d = state_dim(n);
    let mut b = DMatrix::identity(d, d);
    set_block(&mut b, 0, 0, xi.attitude.matrix());
    for (k, c) in xi.cal.iter().enumerate() {
        set_block(&mut b, 6 + 3 * k, 6 + 3 * k, c.matrix());
    }
    &b * input_noise(noise, n) * b.transpose()
}

pub fn iekf_propagate(
    s: &IekfState,
    omega: &Vec3,
    dt: f64,
    noise: &NoiseConfig,
) -> Result<IekfState, FilterError> {
    if !(dt > 0.0) {
        return Err(FilterError::NonPositiveDt(dt));
    }
    let n = s.n();
    let phi = iekf_phi(s.xi.attitude.matrix(), dt, n);
    let mut sigma = &phi * &s.sigma * phi.transpose() + iekf_mc(&s.xi, noise) * dt;
    symmetrize(&mut sigma);
    let xi = SystemState {
        attitude: s.xi.attitude * exp_so3(&((omega - s.xi.bias) * dt)),
        ..s.xi.clone()
    };
    Ok(IekfState {
        xi,
        sigma,
        t: s.t + dt,
    })
}

/// Measurement Jacobian rows: `[d^, 0, d^R̂]` calibrated, `[d^, 0, 0]` otherwise.
pub fn iekf_h(rhat: &Mat3, rows: &[(Vec3, Option<usize>)], n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(3 * rows.len(), state_dim(n));
    for (k, (d, cal)) in rows.iter().enumerate() {
        let dw = wedge(d);
        set_block(&mut h, 3 * k, 0, &dw);
        if let Some(i) = cal {
            set_block(&mut h, 3 * k, 6 + 3 * i, &(dw * rhat));
        }
    }
    h
}

pub fn iekf_update_resolved(
    s: &IekfState,
    meas: &[ResolvedMeasurement],
    opts: &FilterOptions,
) -> Result<IekfState, FilterError> {
    if meas.is_empty() {
        return Ok(s.clone());
    }
    let n = s.n();
    let rhat = s.xi.attitude;
    let rows: Vec<_> = meas.iter().map(|m| (m.d, m.cal)).collect();
    let h = iekf_h(rhat.matrix(), &rows, n);

    let m3 = 3 * meas.len();
    let mut dmat = DMatrix::zeros(m3, m3);
    let mut resid = DVector::zeros(m3);
    for (k, m) in meas.iter().enumerate() {
        let map = match m.cal {
            Some(i) => rhat * s.xi.cal[i],
            None => rhat,
        };
        set_block(&mut dmat, 3 * k, 3 * k, map.matrix());
        resid
            .fixed_rows_mut::<3>(3 * k)
            .copy_from(&(map * m.y - m.d));
    }
    let sigma_y = DMatrix::from_diagonal(&DVector::from_fn(m3, |r, _| meas[r / 3].sigma_y.powi(2)));
    let nmat = &dmat * sigma_y * dmat.transpose();

    let k = kalman_gain(&s.sigma, &h, &nmat)?;
    let delta = &k * resid;
    let dr: Vec3 = delta.fixed_rows::<3>(0).into();
    let db: Vec3 = delta.fixed_rows::<3>(3).into();
    let xi = SystemState {
        attitude: (exp_so3(&dr) * rhat).renormalized(),
        bias: s.xi.bias + db,
        cal: s
            .xi
            .cal
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let dc: Vec3 = delta.fixed_rows::<3>(6 + 3 * i).into();
                (exp_so3(&dc) * *c).renormalized()
            })
            .collect(),
    };
    let sigma = covariance_update(&s.sigma, &k, &h, &nmat, opts.covariance_update);
    Ok(IekfState { xi, sigma, t: s.t })
}

pub fn iekf_update(
    s: &IekfState,
    meas: &[DirectionMeasurement],
    sensors: &SensorSet,
    opts: &FilterOptions,
) -> Result<IekfState, FilterError> {
    let resolved = meas
        .iter()
        .map(|m| sensors.resolve(m))
        .collect::<Result<Vec<_>, _>>()?;
    iekf_update_resolved(s, &resolved, opts)
}

/// Error `η = (log(R R̂ᵀ), b − b̂, log(C_i Ĉ_iᵀ))`.
pub fn iekf_error(estimate: &SystemState, truth: &SystemState) -> DVector<f64> {
    let n = estimate.n();
    let mut e = DVector::zeros(state_dim(n));
    e.fixed_rows_mut::<3>(0)
        .copy_from(&log_so3(&(truth.attitude * estimate.attitude.transpose())));
    e.fixed_rows_mut::<3>(3).copy_from(&(truth.bias - estimate.bias));
    for i in 0..n {
        e.fixed_rows_mut::<3>(6 + 3 * i)
            .copy_from(&log_so3(&(truth.cal[i] * estimate.cal[i].transpose())));
    }
    e
}

#[derive(Debug, Clone)]
pub struct Iekf {
    pub state: IekfState,
    sensors: SensorSet,
    noise: NoiseConfig,
    opts: FilterOptions,
    steps: usize,
}

impl Iekf {
    pub fn new(
        xi0: &SystemState,
        sensors: SensorSet,
        noise: NoiseConfig,
        opts: FilterOptions,
        sigma0: &DMatrix<f64>,
        adapt: bool,
    ) -> Result<Self, FilterError> {
        if xi0.n() != sensors.n_cal() {
            return Err(FilterError::BadDimension(format!(
                "initial state has {} calibrations, sensors expect {}",
                xi0.n(),
                sensors.n_cal()
            )));
        }
        Ok(Iekf {
            state: iekf_init(xi0, sigma0, adapt)?,
            sensors,
            noise,
            opts,
            steps: 0,
        })
    }
}

impl AttitudeFilter for Iekf {
    fn name(&self) -> &'static str {
        "iekf"
    }

    fn time(&self) -> f64 {
        self.state.t
    }

    fn set_time(&mut self, t: f64) {
        self.state.t = t;
    }

    fn propagate(&mut self, omega: &Vec3, dt: f64) -> Result<(), FilterError> {
        self.state = iekf_propagate(&self.state, omega, dt, &self.noise)?;
        self.steps += 1;
        if self.steps % crate::eqf::RENORMALIZE_EVERY == 0 {
            self.state.xi.attitude = self.state.xi.attitude.renormalized();
        }
        Ok(())
    }

    fn update(&mut self, meas: &[DirectionMeasurement]) -> Result<(), FilterError> {
        self.state = iekf_update(&self.state, meas, &self.sensors, &self.opts)?;
        Ok(())
    }

    fn estimate(&self) -> SystemState {
        self.state.xi.clone()
    }

    fn covariance(&self) -> &DMatrix<f64> {
        &self.state.sigma
    }

    fn error_coords(&self, truth: &SystemState) -> Result<DVector<f64>, FilterError> {
        Ok(iekf_error(&self.state.xi, truth))
    }
}
