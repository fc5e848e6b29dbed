//! The symmetry group `G = (SO(3) ⋉ so(3)) × SO(3)^n`, its actions on the
//! state, input and output spaces, and the equivariant lift.

use nalgebra::DVector;
use thiserror::Error;

use crate::lie::{exp_so3, log_so3, wedge, Rotation, SdpElement, Vec3};

/// Rotations in a chart must stay below this angle.
pub const CHART_LIMIT: f64 = std::f64::consts::PI - 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymmetryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rotation angle {0:.6} rad is outside the chart")]
    OutOfChart(f64),
}

fn check_len(expected: usize, got: usize) -> Result<(), SymmetryError> {
    if expected == got {
        Ok(())
    } else {
        Err(SymmetryError::DimensionMismatch { expected, got })
    }
}

/// Ordered direction-sensor layout. Sensors `0..calibrated` carry a
/// calibration state with the same index; the rest are uncalibrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorLayout {
    pub total: usize,
    pub calibrated: usize,
}

impl SensorLayout {
    pub fn new(total: usize, calibrated: usize) -> Result<Self, SymmetryError> {
        if calibrated > total {
            return Err(SymmetryError::DimensionMismatch {
                expected: total,
                got: calibrated,
            });
        }
        Ok(SensorLayout { total, calibrated })
    }

    /// Calibration index of sensor `i`, if it has one.
    #[inline]
    pub fn cal_index(&self, i: usize) -> Option<usize> {
        (i < self.calibrated).then_some(i)
    }
}

/// Element `X = ((A, a), B_1 … B_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    pub nav: SdpElement,
    pub cal: Vec<Rotation>,
}

impl GroupElement {
    pub fn identity(n: usize) -> Self {
        GroupElement {
            nav: SdpElement::identity(),
            cal: vec![Rotation::identity(); n],
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.cal.len()
    }

    #[inline]
    pub fn a_rot(&self) -> &Rotation {
        &self.nav.rot
    }

    #[inline]
    pub fn a_vec(&self) -> &Vec3 {
        &self.nav.vec
    }

    /// Group element whose action carries the identity state to `xi`.
    pub fn from_state(xi: &SystemState) -> Self {
        let r = xi.attitude;
        GroupElement {
            nav: SdpElement::new(r, -(r * xi.bias)),
            cal: xi.cal.iter().map(|c| r * *c).collect(),
        }
    }

    /// Exponential of an algebra element.
    pub fn exp(xi: &AlgebraElement) -> Self {
        GroupElement {
            nav: SdpElement::exp(&xi.nav_rot, &xi.nav_vec),
            cal: xi.cal.iter().map(exp_so3).collect(),
        }
    }

    pub fn renormalized(&self) -> Self {
        GroupElement {
            nav: SdpElement::new(self.nav.rot.renormalized(), self.nav.vec),
            cal: self.cal.iter().map(Rotation::renormalized).collect(),
        }
    }

    /// Adjoint action on the Lie algebra.
    pub fn adjoint(&self, xi: &AlgebraElement) -> AlgebraElement {
        let a = self.nav.rot;
        let eta = a * xi.nav_rot;
        AlgebraElement {
            nav_rot: eta,
            nav_vec: a * xi.nav_vec - eta.cross(&self.nav.vec),
            cal: self.cal.iter().zip(&xi.cal).map(|(b, e)| *b * *e).collect(),
        }
    }
}

/// State `ξ = (R, b, C_1 … C_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub attitude: Rotation,
    pub bias: Vec3,
    pub cal: Vec<Rotation>,
}

impl SystemState {
    pub fn identity(n: usize) -> Self {
        SystemState {
            attitude: Rotation::identity(),
            bias: Vec3::zeros(),
            cal: vec![Rotation::identity(); n],
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.cal.len()
    }
}

/// Gyroscope input. The structurally zero parts of the input are not stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputSample {
    pub omega: Vec3,
}

impl InputSample {
    pub fn new(omega: Vec3) -> Self {
        InputSample { omega }
    }
}

/// Stacked direction outputs, one per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputVec {
    pub dirs: Vec<Vec3>,
}

/// Lie algebra element in vee coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraElement {
    pub nav_rot: Vec3,
    pub nav_vec: Vec3,
    pub cal: Vec<Vec3>,
}

impl AlgebraElement {
    pub fn zero(n: usize) -> Self {
        AlgebraElement {
            nav_rot: Vec3::zeros(),
            nav_vec: Vec3::zeros(),
            cal: vec![Vec3::zeros(); n],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        AlgebraElement {
            nav_rot: self.nav_rot * s,
            nav_vec: self.nav_vec * s,
            cal: self.cal.iter().map(|c| c * s).collect(),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(6 + 3 * self.cal.len());
        v.fixed_rows_mut::<3>(0).copy_from(&self.nav_rot);
        v.fixed_rows_mut::<3>(3).copy_from(&self.nav_vec);
        for (i, c) in self.cal.iter().enumerate() {
            v.fixed_rows_mut::<3>(6 + 3 * i).copy_from(c);
        }
        v
    }
}

/// Exponential coordinates `(ε_R, ε_b, ε_C1 … ε_Cn)`.
pub type LocalCoords = DVector<f64>;

/// `x · y`.
pub fn group_mul(x: &GroupElement, y: &GroupElement) -> Result<GroupElement, SymmetryError> {
    check_len(x.n(), y.n())?;
    Ok(GroupElement {
        nav: x.nav.compose(&y.nav),
        cal: x.cal.iter().zip(&y.cal).map(|(a, b)| *a * *b).collect(),
    })
}

pub fn group_inv(x: &GroupElement) -> GroupElement {
    GroupElement {
        nav: x.nav.inverse(),
        cal: x.cal.iter().map(Rotation::transpose).collect(),
    }
}

/// `φ(X, ξ) = (R A, Aᵀ(b − a), Aᵀ C_i B_i)`, a right action.
pub fn action_phi(x: &GroupElement, xi: &SystemState) -> Result<SystemState, SymmetryError> {
    check_len(x.n(), xi.n())?;
    let a = x.nav.rot;
    let at = a.transpose();
    Ok(SystemState {
        attitude: xi.attitude * a,
        bias: at * (xi.bias - x.nav.vec),
        cal: xi
            .cal
            .iter()
            .zip(&x.cal)
            .map(|(c, b)| at * *c * *b)
            .collect(),
    })
}

/// `ψ(X, ω) = Aᵀ(ω − a)`.
pub fn action_psi(x: &GroupElement, u: &InputSample) -> InputSample {
    InputSample {
        omega: x.nav.rot.transpose() * (u.omega - x.nav.vec),
    }
}

/// `ρ(X, y)`: `B_iᵀ y_i` for calibrated sensors, `Aᵀ y_i` otherwise.
pub fn action_rho(
    x: &GroupElement,
    y: &OutputVec,
    layout: &SensorLayout,
) -> Result<OutputVec, SymmetryError> {
    check_len(layout.total, y.dirs.len())?;
    check_len(layout.calibrated, x.n())?;
    let at = x.nav.rot.transpose();
    let dirs = y
        .dirs
        .iter()
        .enumerate()
        .map(|(i, yi)| match layout.cal_index(i) {
            Some(k) => x.cal[k].transpose() * *yi,
            None => at * *yi,
        })
        .collect();
    Ok(OutputVec { dirs })
}

/// Output of sensor `i` for reference direction `d`.
#[inline]
pub fn output_component(xi: &SystemState, d: &Vec3, cal: Option<usize>) -> Vec3 {
    let body = xi.attitude.transpose() * *d;
    match cal {
        Some(k) => xi.cal[k].transpose() * body,
        None => body,
    }
}

/// `h(ξ)`: `C_iᵀ Rᵀ d_i` for calibrated sensors, `Rᵀ d_i` otherwise.
pub fn output_h(
    xi: &SystemState,
    refs: &[Vec3],
    layout: &SensorLayout,
) -> Result<OutputVec, SymmetryError> {
    check_len(layout.total, refs.len())?;
    check_len(layout.calibrated, xi.n())?;
    let dirs = refs
        .iter()
        .enumerate()
        .map(|(i, d)| output_component(xi, d, layout.cal_index(i)))
        .collect();
    Ok(OutputVec { dirs })
}

/// `Λ(ξ, u) = ((ω − b), −ω × b, C_iᵀ(ω − b))`.
pub fn lift_lambda(xi: &SystemState, u: &InputSample) -> AlgebraElement {
    let w = u.omega - xi.bias;
    AlgebraElement {
        nav_rot: w,
        nav_vec: -u.omega.cross(&xi.bias),
        cal: xi.cal.iter().map(|c| c.transpose() * w).collect(),
    }
}

/// `Λ(φ(X, ξ₀), u)`; the lifted flow is `Ẋ = X · Λ`.
pub fn lifted_dynamics(
    x: &GroupElement,
    u: &InputSample,
    origin: &SystemState,
) -> Result<AlgebraElement, SymmetryError> {
    Ok(lift_lambda(&action_phi(x, origin)?, u))
}

/// System vector field: `Ṙ = R(ω − b)^`, constant bias and calibration.
/// Returns `(Ṙ, ḃ, Ċ_i)`.
pub fn system_vector_field(
    xi: &SystemState,
    u: &InputSample,
) -> (nalgebra::Matrix3<f64>, Vec3, Vec<nalgebra::Matrix3<f64>>) {
    let rdot = xi.attitude.matrix() * wedge(&(u.omega - xi.bias));
    (rdot, Vec3::zeros(), vec![nalgebra::Matrix3::zeros(); xi.n()])
}

pub fn coords_theta(e: &SystemState) -> Result<LocalCoords, SymmetryError> {
    let n = e.n();
    let mut eps = DVector::zeros(6 + 3 * n);
    let put = |eps: &mut DVector<f64>, at: usize, r: &Rotation| -> Result<(), SymmetryError> {
        let v = log_so3(r);
        let angle = v.norm();
        if angle >= CHART_LIMIT {
            return Err(SymmetryError::OutOfChart(angle));
        }
        eps.fixed_rows_mut::<3>(at).copy_from(&v);
        Ok(())
    };
    put(&mut eps, 0, &e.attitude)?;
    eps.fixed_rows_mut::<3>(3).copy_from(&e.bias);
    for (i, c) in e.cal.iter().enumerate() {
        put(&mut eps, 6 + 3 * i, c)?;
    }
    Ok(eps)
}

pub fn coords_theta_inv(eps: &LocalCoords) -> Result<SystemState, SymmetryError> {
    let len = eps.len();
    if len < 6 || (len - 6) % 3 != 0 {
        return Err(SymmetryError::DimensionMismatch {
            expected: 6 + 3 * (len.saturating_sub(6) / 3),
            got: len,
        });
    }
    let n = (len - 6) / 3;
    let rot = |at: usize| -> Result<Rotation, SymmetryError> {
        let v: Vec3 = eps.fixed_rows::<3>(at).into();
        let angle = v.norm();
        if angle >= CHART_LIMIT {
            return Err(SymmetryError::OutOfChart(angle));
        }
        Ok(exp_so3(&v))
    };
    Ok(SystemState {
        attitude: rot(0)?,
        bias: eps.fixed_rows::<3>(3).into(),
        cal: (0..n).map(|i| rot(6 + 3 * i)).collect::<Result<_, _>>()?,
    })
}

/// `ξ̂ = φ(X̂, ξ₀)`.
pub fn state_from_group(
    x: &GroupElement,
    origin: &SystemState,
) -> Result<SystemState, SymmetryError> {
    action_phi(x, origin)
}

/// Error `e = φ(X̂⁻¹, ξ)`, the state mapped back to the origin's neighbourhood.
pub fn state_error(xhat: &GroupElement, xi: &SystemState) -> Result<SystemState, SymmetryError> {
    action_phi(&group_inv(xhat), xi)
}

/// Group element `Z` with `φ(Z, ξ₁) = ξ₂`.
pub fn transitivity_element(
    xi1: &SystemState,
    xi2: &SystemState,
) -> Result<GroupElement, SymmetryError> {
    check_len(xi1.n(), xi2.n())?;
    let a = xi1.attitude.transpose() * xi2.attitude;
    Ok(GroupElement {
        nav: SdpElement::new(a, xi1.bias - a * xi2.bias),
        cal: xi1
            .cal
            .iter()
            .zip(&xi2.cal)
            .map(|(c1, c2)| c1.transpose() * xi1.attitude.transpose() * xi2.attitude * *c2)
            .collect(),
    })
}

/// Group error `E = X X̂⁻¹`.
pub fn group_error(x: &GroupElement, xhat: &GroupElement) -> Result<GroupElement, SymmetryError> {
    group_mul(x, &group_inv(xhat))
}
