//! Equivariant filter: exact group integrator for the mean, closed-form
//! transition matrix and process noise for the covariance, and the
//! equivariant update.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::lie::{exp_sdp, exp_so3, wedge, Mat3, Rotation, Vec3};
use crate::model::{
    check_covariance, covariance_update, kalman_gain, symmetrize, AttitudeFilter,
    DirectionMeasurement, FilterError, FilterOptions, MdMode, NoiseConfig, ResidualMode,
    ResolvedMeasurement, SensorSet,
};
use crate::symmetry::{
    coords_theta, state_error, state_from_group, GroupElement, SystemState,
};

/// Propagation steps between re-orthonormalizations.
pub const RENORMALIZE_EVERY: usize = 1000;

const PHI_SERIES_THRESHOLD: f64 = 1e-4;
const MD_SERIES_THRESHOLD: f64 = 1.0;

#[inline]
pub fn state_dim(n: usize) -> usize {
    6 + 3 * n
}

fn set_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Mat3) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

/// Estimate `X̂` and error covariance `Σ` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub xhat: GroupElement,
    pub sigma: DMatrix<f64>,
    pub t: f64,
}

impl FilterState {
    pub fn n(&self) -> usize {
        self.xhat.n()
    }

    pub fn estimate(&self) -> SystemState {
        state_from_group(&self.xhat, &SystemState::identity(self.n()))
            .expect("group and origin share n")
    }
}

/// Identity estimate with covariance `sigma0`.
pub fn eqf_init(n: usize, sigma0: &DMatrix<f64>) -> Result<FilterState, FilterError> {
    check_covariance(sigma0, state_dim(n))?;
    Ok(FilterState {
        xhat: GroupElement::identity(n),
        sigma: sigma0.clone(),
        t: 0.0,
    })
}

/// Estimate starting at `xi0` (i.e. `X̂₀` with `φ(X̂₀, ξ₀) = xi0`).
pub fn eqf_init_at(xi0: &SystemState, sigma0: &DMatrix<f64>) -> Result<FilterState, FilterError> {
    check_covariance(sigma0, state_dim(xi0.n()))?;
    Ok(FilterState {
        xhat: GroupElement::from_state(xi0),
        sigma: sigma0.clone(),
        t: 0.0,
    })
}

/// `ω₀ = Â ω + â`.
#[inline]
pub fn omega0(xhat: &GroupElement, omega: &Vec3) -> Vec3 {
    xhat.nav.rot * *omega + xhat.nav.vec
}

/// Linearized error dynamics at the origin.
pub fn compute_a0(omega0: &Vec3, n: usize) -> DMatrix<f64> {
    let d = state_dim(n);
    let w = wedge(omega0);
    let mut a = DMatrix::zeros(d, d);
    set_block(&mut a, 0, 3, &(-Mat3::identity()));
    set_block(&mut a, 3, 3, &w);
    for i in 0..n {
        set_block(&mut a, 6 + 3 * i, 6 + 3 * i, &w);
    }
    a
}

/// Output matrix rows for a list of resolved measurements.
pub fn compute_c0_rows(rows: &[(Vec3, Option<usize>)], n: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(3 * rows.len(), state_dim(n));
    for (k, (d, cal)) in rows.iter().enumerate() {
        let dw = wedge(d);
        set_block(&mut c, 3 * k, 0, &dw);
        if let Some(i) = cal {
            set_block(&mut c, 3 * k, 6 + 3 * i, &dw);
        }
    }
    c
}

/// Output matrix of the full sensor stack for the given references.
pub fn compute_c0(sensors: &SensorSet, refs: &[Vec3]) -> Result<DMatrix<f64>, FilterError> {
    let layout = sensors.layout();
    if refs.len() != layout.total {
        return Err(FilterError::BadDimension(format!(
            "{} references for {} sensors",
            refs.len(),
            layout.total
        )));
    }
    let rows: Vec<_> = refs
        .iter()
        .enumerate()
        .map(|(i, d)| (*d, layout.cal_index(i)))
        .collect();
    Ok(compute_c0_rows(&rows, layout.calibrated))
}

/// `Φ₁₂` and `Φ₂₂` blocks of `exp(A⁰ Δt)`.
pub fn phi_blocks(omega0: &Vec3, dt: f64) -> (Mat3, Mat3) {
    let w = wedge(omega0);
    let w2 = w * w;
    let i = Mat3::identity();
    let theta = omega0.norm();
    let x = theta * dt;
    if x < PHI_SERIES_THRESHOLD {
        let phi12 = -(i + w * (dt / 2.0) + w2 * (dt * dt / 6.0)) * dt;
        let phi22 = i + w * dt + w2 * (dt * dt / 2.0);
        return (phi12, phi22);
    }
    let t2 = theta * theta;
    let psi1 = (1.0 - x.cos()) / t2;
    let psi2 = (x - x.sin()) / (t2 * theta);
    let psi3 = x.sin() / theta;
    let phi12 = -(i * dt + w * psi1 + w2 * psi2);
    let phi22 = i + w * psi3 + w2 * psi1;
    (phi12, phi22)
}

/// Closed-form state-transition matrix `exp(A⁰ Δt)`.
pub fn compute_phi(omega0: &Vec3, dt: f64, n: usize) -> DMatrix<f64> {
    let d = state_dim(n);
    let (phi12, phi22) = phi_blocks(omega0, dt);
    let mut phi = DMatrix::identity(d, d);
    set_block(&mut phi, 0, 3, &phi12);
    set_block(&mut phi, 3, 3, &phi22);
    for i in 0..n {
        set_block(&mut phi, 6 + 3 * i, 6 + 3 * i, &phi22);
    }
    phi
}

/// Integrals over `[0, Δt]` of the `ω^ω^` coefficient of `Φ₁₂Φ₁₂ᵀ` and of
/// the `ω^`, `ω^ω^` coefficients of `Φ₁₂Φ₂₂ᵀ`.
fn md_coefficients(theta: f64, dt: f64) -> (f64, f64, f64) {
    let x = theta * dt;
    if x < MD_SERIES_THRESHOLD {
        let x2 = x * x;
        let horner = |c: &[f64]| c.iter().rev().fold(0.0, |acc, k| acc * x2 + k);
        let ia = dt.powi(5)
            * horner(&[
                1.0 / 60.0,
                -1.0 / 2520.0,
                1.0 / 181440.0,
                -1.0 / 19958400.0,
                1.0 / 3113510400.0,
                -1.0 / 653837184000.0,
                1.0 / 177843714048000.0,
            ]);
        let ib = -dt.powi(3)
            * horner(&[
                1.0 / 6.0,
                -1.0 / 120.0,
                1.0 / 5040.0,
                -1.0 / 362880.0,
                1.0 / 39916800.0,
                -1.0 / 6227020800.0,
                1.0 / 1307674368000.0,
            ]);
        let ic = dt.powi(4)
            * horner(&[
                1.0 / 24.0,
                -1.0 / 720.0,
                1.0 / 40320.0,
                -1.0 / 3628800.0,
                1.0 / 479001600.0,
                -1.0 / 87178291200.0,
                1.0 / 20922789888000.0,
            ]);
        (ia, ib, ic)
    } else {
        let (s, c) = x.sin_cos();
        let ia = (x * x * x - 6.0 * x + 6.0 * s) / (3.0 * theta.powi(5));
        let ib = (s - x) / theta.powi(3);
        let ic = (x * x / 2.0 + c - 1.0) / theta.powi(4);
        (ia, ib, ic)
    }
}

/// Discrete process noise `∫₀^Δt Φ(s) M_c Φ(s)ᵀ ds` for isotropic noise.
pub fn compute_md(omega0: &Vec3, dt: f64, noise: &NoiseConfig, n: usize) -> DMatrix<f64> {
    let d = state_dim(n);
    let w = wedge(omega0);
    let w2 = w * w;
    let i = Mat3::identity();
    let sw2 = noise.sigma_w * noise.sigma_w;
    let st2 = noise.sigma_bw * noise.sigma_bw;
    let sk2 = noise.sigma_kappa * noise.sigma_kappa;
    let (ia, ib, ic) = md_coefficients(omega0.norm(), dt);

    let md11 = i * (sw2 * dt) + (i * (dt * dt * dt / 3.0) + w2 * ia) * st2;
    let md12 = -(i * (dt * dt / 2.0) + w * ib + w2 * ic) * st2;
    let md22 = i * (st2 * dt);

    let mut md = DMatrix::zeros(d, d);
    set_block(&mut md, 0, 0, &md11);
    set_block(&mut md, 0, 3, &md12);
    set_block(&mut md, 3, 0, &md12.transpose());
    set_block(&mut md, 3, 3, &md22);
    for k in 0..n {
        set_block(&mut md, 6 + 3 * k, 6 + 3 * k, &(i * (sk2 * dt)));
    }
    md
}

/// `blkdiag(Â, Â, B̂_1 … B̂_n)`.
pub fn eqf_b0(xhat: &GroupElement) -> DMatrix<f64> {
    let n = xhat.n();
    let mut b = DMatrix::zeros(state_dim(n), state_dim(n));
    set_block(&mut b, 0, 0, xhat.nav.rot.matrix());
    set_block(&mut b, 3, 3, xhat.nav.rot.matrix());
    for (k, bk) in xhat.cal.iter().enumerate() {
        set_block(&mut b, 6 + 3 * k, 6 + 3 * k, bk.matrix());
    }
    b
}

/// Continuous input noise `blkdiag(σ_w² I, σ_bw² I, σ_κ² I …)`.
pub fn input_noise(noise: &NoiseConfig, n: usize) -> DMatrix<f64> {
    let d = state_dim(n);
    DMatrix::from_diagonal(&DVector::from_fn(d, |r, _| match r {
        0..=2 => noise.sigma_w.powi(2),
        3..=5 => noise.sigma_bw.powi(2),
        _ => noise.sigma_kappa.powi(2),
    }))
}

/// `M_c = B⁰ Σ_u B⁰ᵀ`.
pub fn eqf_mc(xhat: &GroupElement, noise: &NoiseConfig) -> DMatrix<f64> {
    let n = xhat.n();
    let mut m = DMatrix::zeros(state_dim(n), state_dim(n));
    let a = xhat.nav.rot.matrix();
    let aat = a * a.transpose();
    set_block(&mut m, 0, 0, &(aat * noise.sigma_w.powi(2)));
    set_block(&mut m, 3, 3, &(aat * noise.sigma_bw.powi(2)));
    for (k, bk) in xhat.cal.iter().enumerate() {
        let b = bk.matrix();
        set_block(&mut m, 6 + 3 * k, 6 + 3 * k, &(b * b.transpose() * noise.sigma_kappa.powi(2)));
    }
    m
}

/// Output noise mapping: `B̂_i` rows for calibrated sensors, `Â` otherwise.
pub fn eqf_d0(xhat: &GroupElement, cals: &[Option<usize>]) -> DMatrix<f64> {
    let m = cals.len();
    let mut d = DMatrix::zeros(3 * m, 3 * m);
    for (k, cal) in cals.iter().enumerate() {
        let r = match cal {
            Some(i) => xhat.cal[*i].matrix(),
            None => xhat.nav.rot.matrix(),
        };
        set_block(&mut d, 3 * k, 3 * k, r);
    }
    d
}

pub(crate) fn propagate_mean(xhat: &GroupElement, omega: &Vec3, dt: f64) -> (GroupElement, Vec3) {
    let w0 = omega0(xhat, omega);
    let at = xhat.nav.rot.transpose();
    let step = exp_sdp(&(at * w0 * dt), &(omega.cross(&(at * xhat.nav.vec)) * dt));
    let next = GroupElement {
        nav: xhat.nav.compose(&step),
        cal: xhat
            .cal
            .iter()
            .map(|b| *b * exp_so3(&(b.transpose() * w0 * dt)))
            .collect(),
    };
    (next, w0)
}

pub fn eqf_propagate(
    fs: &FilterState,
    omega: &Vec3,
    dt: f64,
    noise: &NoiseConfig,
    md_mode: MdMode,
) -> Result<FilterState, FilterError> {
    if !(dt > 0.0) {
        return Err(FilterError::NonPositiveDt(dt));
    }
    let n = fs.n();
    let (xhat, w0) = propagate_mean(&fs.xhat, omega, dt);
    let phi = compute_phi(&w0, dt, n);
    let md = match md_mode {
        MdMode::Analytic => compute_md(&w0, dt, noise, n),
        MdMode::FirstOrder => eqf_mc(&fs.xhat, noise) * dt,
    };
    let mut sigma = &phi * &fs.sigma * phi.transpose() + md;
    symmetrize(&mut sigma);
    Ok(FilterState {
        xhat,
        sigma,
        t: fs.t + dt,
    })
}

/// Stacked update with already-resolved measurements.
pub fn eqf_update_resolved(
    fs: &FilterState,
    meas: &[ResolvedMeasurement],
    opts: &FilterOptions,
) -> Result<FilterState, FilterError> {
    if meas.is_empty() {
        return Ok(fs.clone());
    }
    let n = fs.n();
    let rows: Vec<_> = meas.iter().map(|m| (m.d, m.cal)).collect();
    let c = compute_c0_rows(&rows, n);
    let cals: Vec<_> = meas.iter().map(|m| m.cal).collect();
    let dmat = eqf_d0(&fs.xhat, &cals);
    let sigma_y = DMatrix::from_diagonal(&DVector::from_fn(3 * meas.len(), |r, _| {
        meas[r / 3].sigma_y.powi(2)
    }));
    let nmat = &dmat * sigma_y * dmat.transpose();

    let mut r_raw = DVector::zeros(3 * meas.len());
    for (k, m) in meas.iter().enumerate() {
        let mapped = match m.cal {
            Some(i) => fs.xhat.cal[i] * m.y,
            None => fs.xhat.nav.rot * m.y,
        };
        let r = match opts.residual_mode {
            ResidualMode::SubtractReference => mapped - m.d,
            ResidualMode::Literal => mapped,
        };
        r_raw.fixed_rows_mut::<3>(3 * k).copy_from(&r);
    }

    let k = kalman_gain(&fs.sigma, &c, &nmat)?;
    let delta = &k * r_raw;
    let dr: Vec3 = delta.fixed_rows::<3>(0).into();
    let db: Vec3 = delta.fixed_rows::<3>(3).into();
    let nav = exp_sdp(&dr, &(-db)).compose(&fs.xhat.nav);
    let cal = fs
        .xhat
        .cal
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let dc: Vec3 = delta.fixed_rows::<3>(6 + 3 * i).into();
            exp_so3(&(dc + dr)) * *b
        })
        .collect();
    let xhat = GroupElement { nav, cal }.renormalized();
    let sigma = covariance_update(&fs.sigma, &k, &c, &nmat, opts.covariance_update);
    Ok(FilterState {
        xhat,
        sigma,
        t: fs.t,
    })
}

pub fn eqf_update(
    fs: &FilterState,
    meas: &[DirectionMeasurement],
    sensors: &SensorSet,
    opts: &FilterOptions,
) -> Result<FilterState, FilterError> {
    let resolved = meas
        .iter()
        .map(|m| sensors.resolve(m))
        .collect::<Result<Vec<_>, _>>()?;
    eqf_update_resolved(fs, &resolved, opts)
}

/// Stateful equivariant filter.
#[derive(Debug, Clone)]
pub struct Eqf {
    pub state: FilterState,
    sensors: SensorSet,
    noise: NoiseConfig,
    opts: FilterOptions,
    steps: usize,
}

impl Eqf {
    pub fn new(
        sensors: SensorSet,
        noise: NoiseConfig,
        opts: FilterOptions,
        sigma0: &DMatrix<f64>,
    ) -> Result<Self, FilterError> {
        let state = eqf_init(sensors.n_cal(), sigma0)?;
        Ok(Eqf {
            state,
            sensors,
            noise,
            opts,
            steps: 0,
        })
    }

    /// Filter whose initial estimate is `xi0`.
    pub fn new_at(
        xi0: &SystemState,
        sensors: SensorSet,
        noise: NoiseConfig,
        opts: FilterOptions,
        sigma0: &DMatrix<f64>,
    ) -> Result<Self, FilterError> {
        if xi0.n() != sensors.n_cal() {
            return Err(FilterError::BadDimension(format!(
                "initial state has {} calibrations, sensors expect {}",
                xi0.n(),
                sensors.n_cal()
            )));
        }
        let state = eqf_init_at(xi0, sigma0)?;
        Ok(Eqf {
            state,
            sensors,
            noise,
            opts,
            steps: 0,
        })
    }

    /// Filter starting from an explicit group estimate.
    pub fn from_group(
        xhat: GroupElement,
        sensors: SensorSet,
        noise: NoiseConfig,
        opts: FilterOptions,
        sigma0: &DMatrix<f64>,
    ) -> Result<Self, FilterError> {
        let mut f = Eqf::new(sensors, noise, opts, sigma0)?;
        if xhat.n() != f.sensors.n_cal() {
            return Err(FilterError::BadDimension("group element size".into()));
        }
        f.state.xhat = xhat;
        Ok(f)
    }

    pub fn sensors(&self) -> &SensorSet {
        &self.sensors
    }
}

impl AttitudeFilter for Eqf {
    fn name(&self) -> &'static str {
        "eqf"
    }

    fn time(&self) -> f64 {
        self.state.t
    }

    fn set_time(&mut self, t: f64) {
        self.state.t = t;
    }

    fn propagate(&mut self, omega: &Vec3, dt: f64) -> Result<(), FilterError> {
        self.state = eqf_propagate(&self.state, omega, dt, &self.noise, self.opts.md_mode)?;
        self.steps += 1;
        if self.steps % RENORMALIZE_EVERY == 0 {
            self.state.xhat = self.state.xhat.renormalized();
        }
        Ok(())
    }

    fn update(&mut self, meas: &[DirectionMeasurement]) -> Result<(), FilterError> {
        self.state = eqf_update(&self.state, meas, &self.sensors, &self.opts)?;
        Ok(())
    }

    fn estimate(&self) -> SystemState {
        self.state.estimate()
    }

    fn covariance(&self) -> &DMatrix<f64> {
        &self.state.sigma
    }

    fn error_coords(&self, truth: &SystemState) -> Result<DVector<f64>, FilterError> {
        Ok(coords_theta(&state_error(&self.state.xhat, truth)?)?)
    }
}

/// `Φ₂₂ = exp(ω^ Δt)`; used by tests and the runtime study.
pub fn rotation_block(omega0: &Vec3, dt: f64) -> Matrix3<f64> {
    *Rotation::exp(&(omega0 * dt)).matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Reference, SensorModel};
    use crate::symmetry::testing::*;
    use crate::symmetry::{action_phi, action_psi, action_rho, coords_theta_inv, group_mul, output_h, OutputVec};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sensors(n: usize, total: usize, rng: &mut impl Rng) -> SensorSet {
        SensorSet::new(
            (0..total)
                .map(|i| SensorModel {
                    id: i,
                    calibrated: i < n,
                    reference: Reference::Fixed(rand_unit(rng)),
                    sigma_y: 0.1 + 0.05 * i as f64,
                })
                .collect(),
        )
        .unwrap()
    }

    fn refs(s: &SensorSet) -> Vec<Vec3> {
        s.sensors()
            .iter()
            .map(|m| match m.reference {
                Reference::Fixed(d) => d,
                Reference::TimeVarying => unreachable!(),
            })
            .collect()
    }

    fn rand_spd(rng: &mut impl Rng, d: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        (&a * a.transpose() + DMatrix::identity(d, d) * 0.1) * scale
    }

    /// True-state flow under a constant gyro reading over time `t`.
    fn flow_truth(xi: &SystemState, omega: &Vec3, t: f64) -> SystemState {
        SystemState {
            attitude: xi.attitude * exp_so3(&((omega - xi.bias) * t)),
            ..xi.clone()
        }
    }

    /// Group estimate flowed exactly under the lift.
    fn flow_group(x: &GroupElement, omega: &Vec3, t: f64) -> GroupElement {
        let lam = crate::symmetry::lifted_dynamics(
            x,
            &crate::symmetry::InputSample::new(*omega),
            &SystemState::identity(x.n()),
        )
        .unwrap();
        group_mul(x, &GroupElement::exp(&lam.scaled(t))).unwrap()
    }

    /// ε(t) for an error starting at ε₀ with the estimate at `xhat`.
    fn eps_at(xhat: &GroupElement, eps0: &DVector<f64>, omega: &Vec3, t: f64) -> DVector<f64> {
        let e0 = coords_theta_inv(eps0).unwrap();
        let xi0 = action_phi(xhat, &e0).unwrap();
        let xi = flow_truth(&xi0, omega, t);
        let x = flow_group(xhat, omega, t);
        coords_theta(&state_error(&x, &xi).unwrap()).unwrap()
    }

    fn eps_rate(xhat: &GroupElement, eps0: &DVector<f64>, omega: &Vec3) -> DVector<f64> {
        let h = 1e-3;
        let f = |t: f64| eps_at(xhat, eps0, omega, t);
        (f(-2.0 * h) - f(-h) * 8.0 + f(h) * 8.0 - f(2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn a0_structure() {
        let a = compute_a0(&Vec3::zeros(), 1);
        let mut expected = DMatrix::zeros(9, 9);
        set_block(&mut expected, 0, 3, &(-Mat3::identity()));
        assert_eq!(a, expected);

        let w = Vec3::new(0.3, -0.4, 0.2);
        let a = compute_a0(&w, 1);
        assert_eq!(a.fixed_view::<3, 3>(3, 3).clone_owned(), wedge(&w));
        assert_eq!(a.fixed_view::<3, 3>(6, 6).clone_owned(), wedge(&w));
        assert_eq!(a.fixed_view::<3, 3>(0, 0).clone_owned(), Mat3::zeros());
        assert_eq!(a.fixed_view::<3, 3>(0, 6).clone_owned(), Mat3::zeros());
    }

    #[test]
    fn a0_matches_error_dynamics_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for trial in 0..40 {
            let n = trial % 4;
            let xhat = rand_group(&mut rng, n);
            let omega = rand_vec(&mut rng, 1.0);
            let a = compute_a0(&omega0(&xhat, &omega), n);
            let d = state_dim(n);
            let delta = 1e-5;
            for j in 0..d {
                let mut ep = DVector::zeros(d);
                ep[j] = delta;
                let col = (eps_rate(&xhat, &ep, &omega) - eps_rate(&xhat, &(-&ep), &omega))
                    / (2.0 * delta);
                let diff = (col - a.column(j)).amax();
                assert!(diff < 1e-6, "n={n} column {j}: {diff:e}");
            }
        }
    }

    #[test]
    fn c0_layout_for_one_calibrated_and_one_uncalibrated() {
        let d1 = Vec3::new(1.0, 0.0, -1.0).normalize();
        let d2 = Vec3::y();
        let c = compute_c0_rows(&[(d1, Some(0)), (d2, None)], 1);
        let mut expected = DMatrix::zeros(6, 9);
        set_block(&mut expected, 0, 0, &wedge(&d1));
        set_block(&mut expected, 0, 6, &wedge(&d1));
        set_block(&mut expected, 3, 0, &wedge(&d2));
        assert_eq!(c, expected);

        let c = compute_c0_rows(&[(Vec3::z(), None)], 0);
        assert_eq!(c.nrows(), 3);
        assert_eq!(c.fixed_view::<3, 3>(0, 0).clone_owned(), wedge(&Vec3::z()));
        assert_eq!(c.columns(3, 3).amax(), 0.0);
    }

    #[test]
    fn c0_matches_output_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..50 {
            let n = trial % 4;
            let s = sensors(n, n + 1 + trial % 2, &mut rng);
            let r = refs(&s);
            let c = compute_c0(&s, &r).unwrap();
            let origin = SystemState::identity(n);
            let h0 = output_h(&origin, &r, s.layout()).unwrap();
            let stack = |o: &OutputVec| {
                DVector::from_iterator(3 * o.dirs.len(), o.dirs.iter().flat_map(|v| v.iter().copied()))
            };
            let eps = DVector::from_fn(state_dim(n), |_, _| rng.gen_range(-1.0..1.0)).normalize() * 1e-4;
            let h1 = output_h(&coords_theta_inv(&eps).unwrap(), &r, s.layout()).unwrap();
            let lin = &c * &eps;
            assert!((stack(&h1) - stack(&h0) - lin).amax() < 1e-6);
        }
    }

    #[test]
    fn phi_zero_rate() {
        let phi = compute_phi(&Vec3::zeros(), 0.01, 1);
        let mut expected = DMatrix::identity(9, 9);
        set_block(&mut expected, 0, 3, &(-Mat3::identity() * 0.01));
        assert_eq!(phi, expected);
    }

    #[test]
    fn phi_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for trial in 0..300 {
            let n = trial % 4;
            let dt = if trial % 2 == 0 { 0.005 } else { rng.gen_range(1e-4..0.5) };
            let target = match trial % 5 {
                0 => rng.gen_range(0.0..2e-4),
                _ => rng.gen_range(0.0..2.0),
            };
            let w = rand_unit(&mut rng) * (target / dt);
            let phi = compute_phi(&w, dt, n);
            let oracle = (compute_a0(&w, n) * dt).exp();
            assert!((phi - oracle).amax() < 1e-11, "x={target}");
        }
    }

    #[test]
    fn phi_block_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = rand_vec(&mut rng, 2.0);
        let phi = compute_phi(&w, 0.01, 1);
        let blk = |r, c| phi.fixed_view::<3, 3>(r, c).clone_owned();
        assert_eq!(blk(0, 0), Mat3::identity());
        for (r, c) in [(0, 6), (3, 0), (3, 6), (6, 0), (6, 3)] {
            assert_eq!(blk(r, c), Mat3::zeros());
        }
    }

    #[test]
    fn phi_branch_continuity() {
        let dir = Vec3::new(0.2, -0.7, 0.4).normalize();
        let dt = 0.01;
        let below = phi_blocks(&(dir * ((PHI_SERIES_THRESHOLD * (1.0 - 1e-9)) / dt)), dt);
        let above = phi_blocks(&(dir * ((PHI_SERIES_THRESHOLD * (1.0 + 1e-9)) / dt)), dt);
        assert!((below.0 - above.0).amax() < 1e-10);
        assert!((below.1 - above.1).amax() < 1e-10);
        assert_relative_eq!(phi_blocks(&(dir * 0.5), dt).1, rotation_block(&(dir * 0.5), dt), epsilon = 1e-15);
    }

    /// Composite 4-point Gauss–Legendre quadrature over 16 panels.
    fn quadrature_md(w: &Vec3, dt: f64, noise: &NoiseConfig, n: usize) -> DMatrix<f64> {
        const NODES: [f64; 4] = [
            -0.861_136_311_594_052_6,
            -0.339_981_043_584_856_3,
            0.339_981_043_584_856_3,
            0.861_136_311_594_052_6,
        ];
        const WEIGHTS: [f64; 4] = [
            0.347_854_845_137_453_8,
            0.652_145_154_862_546_1,
            0.652_145_154_862_546_1,
            0.347_854_845_137_453_8,
        ];
        let panels = 16;
        let h = dt / panels as f64;
        let mc = input_noise(noise, n);
        let mut acc = DMatrix::zeros(state_dim(n), state_dim(n));
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            for (x, wt) in NODES.iter().zip(WEIGHTS) {
                let s = mid + 0.5 * h * x;
                let phi = compute_phi(w, s, n);
                acc += (&phi * &mc * phi.transpose()) * (0.5 * h * wt);
            }
        }
        acc
    }

    #[test]
    fn md_zero_noise_and_zero_rate() {
        let md = compute_md(&Vec3::new(1.0, 2.0, 3.0), 0.01, &NoiseConfig::zero(), 2);
        assert_eq!(md.amax(), 0.0);
        let noise = NoiseConfig {
            sigma_w: 0.3,
            sigma_bw: 0.2,
            sigma_kappa: 0.1,
        };
        let dt = 0.02;
        let md = compute_md(&Vec3::zeros(), dt, &noise, 1);
        let expected11 = 0.09 * dt + 0.04 * dt.powi(3) / 3.0;
        assert_relative_eq!(
            md.fixed_view::<3, 3>(0, 0).clone_owned(),
            Mat3::identity() * expected11,
            epsilon = 1e-18
        );
        assert_relative_eq!(md[(6, 6)], 0.01 * dt, epsilon = 1e-18);
    }

    #[test]
    fn md_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let nominal = NoiseConfig::default();
        let unit = NoiseConfig {
            sigma_w: 1.0,
            sigma_bw: 1.0,
            sigma_kappa: 1.0,
        };
        for trial in 0..200 {
            let n = trial % 3;
            let dt = [0.005, 0.05, 0.5][trial % 3];
            let x = rng.gen_range(0.0..2.0);
            let w = rand_unit(&mut rng) * (x / dt);
            for noise in [&nominal, &unit] {
                let md = compute_md(&w, dt, noise, n);
                let q = quadrature_md(&w, dt, noise, n);
                let rel = (&md - &q).norm() / q.norm();
                assert!(rel < 1e-9, "x={x} dt={dt} rel={rel:e}");
                // Each block on its own scale as well.
                let b = |m: &DMatrix<f64>, r, c| m.fixed_view::<3, 3>(r, c).clone_owned();
                for (r, c) in [(0, 0), (0, 3), (3, 3)] {
                    let e = (b(&md, r, c) - b(&q, r, c)).norm() / b(&q, r, c).norm();
                    assert!(e < 1e-9, "block ({r},{c}) x={x} rel={e:e}");
                }
            }
        }
    }

    #[test]
    fn md_series_and_closed_form_agree_at_switch() {
        let dt = 0.1;
        let lo = md_coefficients((MD_SERIES_THRESHOLD * (1.0 - 1e-12)) / dt, dt);
        let hi = md_coefficients((MD_SERIES_THRESHOLD * (1.0 + 1e-12)) / dt, dt);
        assert!((lo.0 - hi.0).abs() <= 1e-12 * hi.0.abs());
        assert!((lo.1 - hi.1).abs() <= 1e-12 * hi.1.abs());
        assert!((lo.2 - hi.2).abs() <= 1e-12 * hi.2.abs());
    }

    #[test]
    fn b0_orthogonal_and_similarity() {
        assert_eq!(eqf_b0(&GroupElement::identity(2)), DMatrix::identity(12, 12));
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = rand_group(&mut rng, 2);
        let b = eqf_b0(&x);
        assert!((&b * b.transpose() - DMatrix::identity(12, 12)).amax() < 1e-12);
        let su = rand_spd(&mut rng, 12, 1.0);
        let mc = &b * &su * b.transpose();
        let mut e1: Vec<f64> = su.symmetric_eigenvalues().iter().copied().collect();
        let mut e2: Vec<f64> = mc.symmetric_eigenvalues().iter().copied().collect();
        e1.sort_by(f64::total_cmp);
        e2.sort_by(f64::total_cmp);
        for (a, c) in e1.iter().zip(&e2) {
            assert_relative_eq!(a, c, epsilon = 1e-10);
        }
    }

    #[test]
    fn init_examples() {
        let fs = eqf_init(1, &DMatrix::identity(9, 9)).unwrap();
        assert_eq!(fs.xhat, GroupElement::identity(1));
        assert_eq!(fs.sigma, DMatrix::identity(9, 9));
        assert_eq!(eqf_init(2, &DMatrix::identity(12, 12)).unwrap().sigma.nrows(), 12);
        let mut bad = DMatrix::identity(9, 9);
        bad[(0, 2)] = 1.0;
        assert!(matches!(eqf_init(1, &bad), Err(FilterError::BadDimension(_))));
    }

    #[test]
    fn propagate_zero_input() {
        let noise = NoiseConfig::default();
        let fs = eqf_init(1, &DMatrix::identity(9, 9)).unwrap();
        let out = eqf_propagate(&fs, &Vec3::zeros(), 0.01, &noise, MdMode::Analytic).unwrap();
        assert_eq!(out.xhat, fs.xhat);
        let phi = compute_phi(&Vec3::zeros(), 0.01, 1);
        let expected = &phi * &fs.sigma * phi.transpose() + compute_md(&Vec3::zeros(), 0.01, &noise, 1);
        assert!((out.sigma - expected).amax() < 1e-15);
        assert!(matches!(
            eqf_propagate(&fs, &Vec3::zeros(), 0.0, &noise, MdMode::Analytic),
            Err(FilterError::NonPositiveDt(_))
        ));
    }

    #[test]
    fn propagate_tracks_constant_rate_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for n in 0..3 {
            let xi0 = rand_state(&mut rng, n);
            let omega = rand_vec(&mut rng, 1.5);
            let mut fs = eqf_init_at(&xi0, &DMatrix::identity(state_dim(n), state_dim(n))).unwrap();
            for _ in 0..1000 {
                fs = eqf_propagate(&fs, &omega, 1e-3, &NoiseConfig::zero(), MdMode::Analytic).unwrap();
            }
            let est = fs.estimate();
            let truth = flow_truth(&xi0, &omega, 1.0);
            assert!(state_dist(&est, &truth) < 1e-8);
        }
    }

    #[test]
    fn propagate_trace_grows_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut sigma = DMatrix::zeros(9, 9);
        for k in 0..3 {
            let blk = rand_spd(&mut rng, 3, 0.1);
            sigma.view_mut((3 * k, 3 * k), (3, 3)).copy_from(&blk);
        }
        let fs = FilterState { xhat: rand_group(&mut rng, 1), sigma, t: 0.0 };
        for noise in [
            NoiseConfig { sigma_w: 1e-3, ..NoiseConfig::zero() },
            NoiseConfig { sigma_bw: 1e-3, ..NoiseConfig::zero() },
            NoiseConfig { sigma_kappa: 1e-3, ..NoiseConfig::zero() },
        ] {
            let out = eqf_propagate(&fs, &rand_vec(&mut rng, 1.0), 0.01, &noise, MdMode::Analytic).unwrap();
            assert!(out.sigma.trace() > fs.sigma.trace());
        }
    }

    #[test]
    fn update_fixed_point_for_perfect_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        for n in 0..3 {
            let s = sensors(n, n + 1, &mut rng);
            let r = refs(&s);
            let fs = FilterState {
                xhat: rand_group(&mut rng, n),
                sigma: rand_spd(&mut rng, state_dim(n), 0.1),
                t: 0.0,
            };
            let y = output_h(&fs.estimate(), &r, s.layout()).unwrap();
            let meas: Vec<_> = y
                .dirs
                .iter()
                .enumerate()
                .map(|(i, y)| DirectionMeasurement {
                    t: 0.0,
                    sensor_id: i,
                    y: *y,
                    reference: None,
                })
                .collect();
            let out = eqf_update(&fs, &meas, &s, &FilterOptions::default()).unwrap();
            assert!(group_dist(&out.xhat, &fs.xhat) < 1e-12);
            assert!(out.sigma.trace() <= fs.sigma.trace() + 1e-12);
        }
    }

    #[test]
    fn update_gain_sparsity_for_single_uncalibrated_sensor() {
        let d = Vec3::new(0.3, 0.5, -0.2).normalize();
        let s = SensorSet::new(vec![SensorModel {
            id: 0,
            calibrated: false,
            reference: Reference::Fixed(d),
            sigma_y: 0.1,
        }])
        .unwrap();
        let fs = FilterState {
            xhat: GroupElement::identity(0),
            sigma: DMatrix::identity(6, 6) * 0.04,
            t: 0.0,
        };
        let meas = [DirectionMeasurement {
            t: 0.0,
            sensor_id: 0,
            y: exp_so3(&Vec3::new(0.05, -0.02, 0.01)) * d,
            reference: None,
        }];
        let out = eqf_update(&fs, &meas, &s, &FilterOptions::default()).unwrap();
        // Σ diagonal in attitude/bias: the bias estimate stays put.
        assert!(out.estimate().bias.norm() < 1e-15);
        assert!(out.sigma.view((3, 3), (3, 3)).amax() - 0.04 < 1e-15);
        let c = compute_c0_rows(&[(d, None)], 0);
        assert_eq!(c.transpose().rows(3, 3).amax(), 0.0);
    }

    #[test]
    fn update_reduces_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        for trial in 0..200 {
            let n = trial % 3;
            let s = sensors(n, n + 1, &mut rng);
            let fs = FilterState {
                xhat: rand_group(&mut rng, n),
                sigma: rand_spd(&mut rng, state_dim(n), 0.1),
                t: 0.0,
            };
            let meas: Vec<_> = (0..s.layout().total)
                .map(|i| DirectionMeasurement {
                    t: 0.0,
                    sensor_id: i,
                    y: rand_unit(&mut rng),
                    reference: None,
                })
                .collect();
            for form in [crate::model::CovarianceUpdate::Standard, crate::model::CovarianceUpdate::Joseph] {
                let opts = FilterOptions { covariance_update: form, ..Default::default() };
                let out = eqf_update(&fs, &meas, &s, &opts).unwrap();
                assert!(out.sigma.trace() <= fs.sigma.trace() + 1e-12);
                let min_eig = out.sigma.clone().symmetric_eigenvalues().min();
                assert!(min_eig >= -1e-9 * out.sigma.trace());
            }
        }
    }

    #[test]
    fn literal_residual_is_annihilated_reference_for_isotropic_noise() {
        // Cᵀd = 0 and d is an eigenvector of S, so K·d = 0 and both residual
        // forms give the same correction.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for n in 0..3 {
            let s = sensors(n, n + 1, &mut rng);
            let fs = FilterState {
                xhat: rand_group(&mut rng, n),
                sigma: rand_spd(&mut rng, state_dim(n), 0.1),
                t: 0.0,
            };
            let meas: Vec<_> = (0..s.layout().total)
                .map(|i| DirectionMeasurement { t: 0.0, sensor_id: i, y: rand_unit(&mut rng), reference: None })
                .collect();
            let lit = FilterOptions { residual_mode: ResidualMode::Literal, ..Default::default() };
            let a = eqf_update(&fs, &meas, &s, &lit).unwrap();
            let b = eqf_update(&fs, &meas, &s, &FilterOptions::default()).unwrap();
            assert!(group_dist(&a.xhat, &b.xhat) < 1e-12);
        }
    }

    #[test]
    fn equivariant_consistency_of_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 1;
        let s = sensors(n, 2, &mut rng);
        let r = refs(&s);
        let noise = NoiseConfig { sigma_w: 0.01, sigma_bw: 0.001, sigma_kappa: 0.001 };
        let sigma0 = rand_spd(&mut rng, 9, 0.1);
        let x = rand_group(&mut rng, n);
        let truth0 = rand_state(&mut rng, n);
        let xhat0 = rand_group(&mut rng, n);

        let mut a = FilterState { xhat: xhat0.clone(), sigma: sigma0.clone(), t: 0.0 };
        let mut b = FilterState {
            xhat: group_mul(&xhat0, &x).unwrap(),
            sigma: sigma0,
            t: 0.0,
        };
        let mut truth = truth0;
        let opts = FilterOptions::default();
        for k in 0..500 {
            let omega = rand_vec(&mut rng, 1.0) + truth.bias;
            a = eqf_propagate(&a, &omega, 0.01, &noise, MdMode::Analytic).unwrap();
            let u = action_psi(&x, &crate::symmetry::InputSample::new(omega));
            b = eqf_propagate(&b, &u.omega, 0.01, &noise, MdMode::Analytic).unwrap();
            truth = flow_truth(&truth, &omega, 0.01);
            if k % 5 == 0 {
                let mut y = output_h(&truth, &r, s.layout()).unwrap();
                for v in y.dirs.iter_mut() {
                    *v = (*v + rand_vec(&mut rng, 0.05)).normalize();
                }
                let yx = action_rho(&x, &y, s.layout()).unwrap();
                let mk = |o: &OutputVec| -> Vec<DirectionMeasurement> {
                    o.dirs
                        .iter()
                        .enumerate()
                        .map(|(i, y)| DirectionMeasurement { t: 0.0, sensor_id: i, y: *y, reference: None })
                        .collect()
                };
                a = eqf_update(&a, &mk(&y), &s, &opts).unwrap();
                b = eqf_update(&b, &mk(&yx), &s, &opts).unwrap();
            }
        }
        let expected = group_mul(&a.xhat, &x).unwrap();
        assert!(group_dist(&b.xhat, &expected) < 1e-8);
        let est_a = action_phi(&x, &a.estimate()).unwrap();
        assert!(state_dist(&b.estimate(), &est_a) < 1e-8);
        assert!((&a.sigma - &b.sigma).amax() < 1e-8);
    }

    #[test]
    fn blockwise_mc_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise = NoiseConfig { sigma_w: 0.3, sigma_bw: 0.02, sigma_kappa: 0.1 };
        for n in 0..4 {
            let x = rand_group(&mut rng, n);
            let b = eqf_b0(&x);
            let dense = &b * input_noise(&noise, n) * b.transpose();
            assert!((eqf_mc(&x, &noise) - dense).amax() < 1e-15);
        }
    }
}
