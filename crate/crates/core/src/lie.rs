//! SO(3), so(3) and the semi-direct product SO(3) ⋉ so(3).
//!
//! Rotations are stored as 3×3 matrices. Elements of the semi-direct product
//! keep their so(3) part in vee coordinates, so that `(A, a)` corresponds to
//! the homogeneous matrix `[[A, a], [0, 1]]`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Frobenius tolerance on `RᵀR - I` and on `det R - 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
/// Maximum allowed asymmetry `‖M + Mᵀ‖` for [`vee`].
pub const SKEW_TOL: f64 = 1e-9;

const EXP_TAYLOR_THRESHOLD: f64 = 1e-6;
const LOG_TAYLOR_THRESHOLD: f64 = 1e-8;
const LOG_NEAR_PI_THRESHOLD: f64 = 1e-4;
const JACOBIAN_TAYLOR_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not skew-symmetric (asymmetry {0:.3e})")]
    NotSkew(f64),
    #[error("matrix is not a rotation (orthonormality defect {defect:.3e}, det {det})")]
    NotRotation { defect: f64, det: f64 },
    #[error("matrix is degenerate (det {0:.3e})")]
    Degenerate(f64),
}

/// Skew-symmetric matrix such that `wedge(v) * w == v.cross(&w)`.
#[inline]
pub fn wedge(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`wedge`]. Fails when `m` is not skew-symmetric.
pub fn vee(m: &Mat3) -> Result<Vec3, LieError> {
    let asym = (m + m.transpose()).norm();
    if asym > SKEW_TOL {
        return Err(LieError::NotSkew(asym));
    }
    Ok(vee_unchecked(m))
}

/// Vee of the skew part of `m`, without checking symmetry.
#[inline]
pub fn vee_unchecked(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// An element of SO(3).
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rotation({:?})", self.log().as_slice())
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    #[inline]
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps `m` after checking orthonormality and orientation.
    pub fn from_matrix(m: Mat3) -> Result<Self, LieError> {
        let defect = (m.transpose() * m - Mat3::identity()).norm();
        let det = m.determinant();
        if !(defect <= ORTHONORMAL_TOL && (det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(LieError::NotRotation { defect, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps `m` without any check. The caller guarantees `m ∈ SO(3)`.
    #[inline]
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Rotation about the x, y, or z axis applied in yaw-pitch-roll order
    /// (`Rz(yaw) Ry(pitch) Rx(roll)`).
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Self {
        exp_so3(&Vec3::new(0.0, 0.0, yaw))
            * exp_so3(&Vec3::new(0.0, pitch, 0.0))
            * exp_so3(&Vec3::new(roll, 0.0, 0.0))
    }

    #[inline]
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    #[inline]
    pub fn exp(v: &Vec3) -> Self {
        exp_so3(v)
    }

    #[inline]
    pub fn log(&self) -> Vec3 {
        log_so3(self)
    }

    #[inline]
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Orthonormality defect `‖RᵀR - I‖_F` and `|det R - 1|`, whichever is larger.
    pub fn defect(&self) -> f64 {
        let ortho = (self.0.transpose() * self.0 - Mat3::identity()).norm();
        ortho.max((self.0.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self) -> bool {
        self.defect() <= ORTHONORMAL_TOL
    }

    /// Projects the stored matrix back onto SO(3).
    pub fn renormalized(&self) -> Self {
        project_to_so3(&self.0).unwrap_or(*self)
    }

    /// Geodesic interpolation `self · exp(s · log(selfᵀ other))`.
    pub fn slerp(&self, other: &Rotation, s: f64) -> Rotation {
        let delta = (self.transpose() * *other).log();
        *self * exp_so3(&(delta * s))
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    #[inline]
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    #[inline]
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    #[inline]
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rodrigues evaluation of `exp(wedge(v))`.
pub fn exp_so3(v: &Vec3) -> Rotation {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < EXP_TAYLOR_THRESHOLD {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let w = wedge(v);
    Rotation(Mat3::identity() + w * a + w * w * b)
}

/// Principal logarithm, `‖log_so3(r)‖ ≤ π`.
///
/// At exactly θ = π the axis sign is fixed so that its first nonzero
/// component is positive.
pub fn log_so3(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    let skew = vee_unchecked(m);
    let sin_theta = skew.norm();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < LOG_TAYLOR_THRESHOLD {
        return skew * (1.0 + theta * theta / 6.0);
    }
    if theta < PI - LOG_NEAR_PI_THRESHOLD {
        return skew * (theta / sin_theta);
    }

    // Near π: kkᵀ = (sym(R) - cos θ I) / (1 - cos θ); take the best-conditioned column.
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Mat3::identity() * cos_theta) / (1.0 - cos_theta);
    let diag = outer.diagonal();
    let i = diag.imax();
    let mut axis: Vec3 = outer.column(i).into();
    axis /= axis.norm();
    if skew.norm() > 1e-12 {
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Left Jacobian of SO(3), `J_l(ω) = Σ_k wedge(ω)^k / (k+1)!`.
pub fn left_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < JACOBIAN_TAYLOR_THRESHOLD {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let w = wedge(omega);
    Mat3::identity() + w * b + w * w * c
}

/// Element `(A, a)` of SO(3) ⋉ so(3), with `a` in vee coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SdpElement {
    pub rot: Rotation,
    pub vec: Vec3,
}

impl SdpElement {
    pub fn new(rot: Rotation, vec: Vec3) -> Self {
        SdpElement { rot, vec }
    }

    pub fn identity() -> Self {
        SdpElement {
            rot: Rotation::identity(),
            vec: Vec3::zeros(),
        }
    }

    /// `(A_x A_y, a_x + Ad_{A_x} a_y)`.
    #[inline]
    pub fn compose(&self, other: &SdpElement) -> SdpElement {
        SdpElement {
            rot: self.rot * other.rot,
            vec: self.vec + self.rot * other.vec,
        }
    }

    /// `(Aᵀ, -Aᵀa)`.
    #[inline]
    pub fn inverse(&self) -> SdpElement {
        let rt = self.rot.transpose();
        SdpElement {
            rot: rt,
            vec: -(rt * self.vec),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rot.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.vec);
        h
    }

    pub fn exp(omega: &Vec3, v: &Vec3) -> SdpElement {
        exp_sdp(omega, v)
    }
}

impl Mul for SdpElement {
    type Output = SdpElement;
    fn mul(self, rhs: SdpElement) -> SdpElement {
        self.compose(&rhs)
    }
}

/// Exponential of the 4×4 matrix `[[wedge(omega), v], [0, 0]]`.
pub fn exp_sdp(omega: &Vec3, v: &Vec3) -> SdpElement {
    SdpElement {
        rot: exp_so3(omega),
        vec: left_jacobian(omega) * v,
    }
}

/// Nearest rotation to `m` in Frobenius norm (orthogonal polar factor).
pub fn project_to_so3(m: &Mat3) -> Result<Rotation, LieError> {
    let det = m.determinant();
    if det <= 1e-12 {
        return Err(LieError::Degenerate(det));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(LieError::Degenerate(det)),
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the direction paired with the smallest singular value.
        let k = svd.singular_values.imin();
        let mut u = u;
        u.column_mut(k).neg_mut();
        r = u * v_t;
    }
    Ok(Rotation(r))
}
