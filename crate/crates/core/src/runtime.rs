//! Covariance-propagation strategies and their relative cost.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::eqf::{compute_a0, compute_md, compute_phi, eqf_mc, propagate_mean, state_dim, FilterState};
use crate::lie::{wedge, Mat3, Rotation, SdpElement, Vec3};
use crate::model::{symmetrize, NoiseConfig};
use crate::sim::{rng_for, Lissajous};
use crate::symmetry::GroupElement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhiVariant {
    /// Closed-form `Φ` with analytic `M_d`.
    ClosedForm,
    /// `Φ = exp(A⁰Δt)` by scaling and squaring, analytic `M_d`.
    MatrixExp,
    /// `Φ = I + A⁰Δt`, `M_d = M_c Δt`.
    FirstOrder,
    /// Adaptive Dormand–Prince integration of the joint mean and covariance ODE.
    Adaptive,
}

impl PhiVariant {
    pub const ALL: [PhiVariant; 4] = [
        PhiVariant::ClosedForm,
        PhiVariant::MatrixExp,
        PhiVariant::FirstOrder,
        PhiVariant::Adaptive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PhiVariant::ClosedForm => "(i) closed form",
            PhiVariant::MatrixExp => "(ii) matrix exponential",
            PhiVariant::FirstOrder => "(iii) first order",
            PhiVariant::Adaptive => "(iv) adaptive RK45",
        }
    }
}

/// Tolerances of the adaptive integrator.
pub const RK_RTOL: f64 = 1e-3;
pub const RK_ATOL: f64 = 1e-6;

/// One propagation step of the given variant.
pub fn propagate_variant(
    variant: PhiVariant,
    fs: &FilterState,
    omega: &Vec3,
    dt: f64,
    noise: &NoiseConfig,
) -> FilterState {
    let n = fs.n();
    if variant == PhiVariant::Adaptive {
        return integrate_adaptive(fs, omega, dt, noise);
    }
    let (xhat, w0) = propagate_mean(&fs.xhat, omega, dt);
    let (phi, md) = match variant {
        PhiVariant::ClosedForm => (compute_phi(&w0, dt, n), compute_md(&w0, dt, noise, n)),
        PhiVariant::MatrixExp => ((compute_a0(&w0, n) * dt).exp(), compute_md(&w0, dt, noise, n)),
        PhiVariant::FirstOrder => {
            let d = state_dim(n);
            (
                DMatrix::identity(d, d) + compute_a0(&w0, n) * dt,
                eqf_mc(&fs.xhat, noise) * dt,
            )
        }
        PhiVariant::Adaptive => unreachable!(),
    };
    let mut sigma = &phi * &fs.sigma * phi.transpose() + md;
    symmetrize(&mut sigma);
    FilterState {
        xhat,
        sigma,
        t: fs.t + dt,
    }
}

fn pack(x: &GroupElement, sigma: &DMatrix<f64>) -> DVector<f64> {
    let n = x.n();
    let mut y = DVector::zeros(12 + 9 * n + sigma.len());
    y.rows_mut(0, 9).copy_from_slice(x.nav.rot.matrix().as_slice());
    y.rows_mut(9, 3).copy_from(&x.nav.vec);
    for (i, b) in x.cal.iter().enumerate() {
        y.rows_mut(12 + 9 * i, 9).copy_from_slice(b.matrix().as_slice());
    }
    y.rows_mut(12 + 9 * n, sigma.len()).copy_from_slice(sigma.as_slice());
    y
}

fn mat3(y: &DVector<f64>, at: usize) -> Mat3 {
    Mat3::from_column_slice(&y.as_slice()[at..at + 9])
}

fn unpack(y: &DVector<f64>, n: usize) -> (GroupElement, DMatrix<f64>) {
    let d = state_dim(n);
    let rot = |m: Mat3| Rotation::from_matrix_unchecked(m).renormalized();
    let x = GroupElement {
        nav: SdpElement::new(rot(mat3(y, 0)), Vec3::new(y[9], y[10], y[11])),
        cal: (0..n).map(|i| rot(mat3(y, 12 + 9 * i))).collect(),
    };
    let sigma = DMatrix::from_column_slice(d, d, &y.as_slice()[12 + 9 * n..]);
    (x, sigma)
}

/// Right-hand side of the joint ODE under a held gyro reading.
fn joint_rhs(y: &DVector<f64>, omega: &Vec3, n: usize, noise: &NoiseConfig) -> DVector<f64> {
    let d = state_dim(n);
    let a = mat3(y, 0);
    let av = Vec3::new(y[9], y[10], y[11]);
    let w0 = a * omega + av;
    let w = wedge(&w0);
    let mut dy = DVector::zeros(y.len());
    dy.rows_mut(0, 9).copy_from_slice((w * a).as_slice());
    dy.rows_mut(9, 3).copy_from(&(a * omega).cross(&av));
    let mut cal = Vec::with_capacity(n);
    for i in 0..n {
        let b = mat3(y, 12 + 9 * i);
        dy.rows_mut(12 + 9 * i, 9).copy_from_slice((w * b).as_slice());
        cal.push(Rotation::from_matrix_unchecked(b));
    }
    let sigma = DMatrix::from_column_slice(d, d, &y.as_slice()[12 + 9 * n..]);
    let a0 = compute_a0(&w0, n);
    let xhat = GroupElement {
        nav: SdpElement::new(Rotation::from_matrix_unchecked(a), av),
        cal,
    };
    let a0s = &a0 * &sigma;
    let ds = &a0s + a0s.transpose() + eqf_mc(&xhat, noise);
    dy.rows_mut(12 + 9 * n, d * d).copy_from_slice(ds.as_slice());
    dy
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration of `f` over `[0, t_end]`.
/// Returns the final state and the number of accepted steps.
pub fn dopri45<F>(f: F, y0: &DVector<f64>, t_end: f64, rtol: f64, atol: f64) -> (DVector<f64>, usize)
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut t = 0.0;
    let mut y = y0.clone();
    let mut h = t_end;
    let mut steps = 0;
    let mut k1 = f(0.0, &y);
    while t < t_end {
        h = h.min(t_end - t);
        let mut k = vec![k1.clone()];
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                if A[s][j] != 0.0 {
                    ys.axpy(h * A[s][j], kj, 1.0);
                }
            }
            k.push(f(t + C[s] * h, &ys));
        }
        let mut y5 = y.clone();
        let mut err = DVector::zeros(y.len());
        for s in 0..7 {
            y5.axpy(h * B5[s], &k[s], 1.0);
            err.axpy(h * (B5[s] - B4[s]), &k[s], 1.0);
        }
        let norm = (err
            .iter()
            .zip(y.iter().zip(y5.iter()))
            .map(|(e, (a, b))| (e / (atol + rtol * a.abs().max(b.abs()))).powi(2))
            .sum::<f64>()
            / y.len() as f64)
            .sqrt();
        if norm <= 1.0 {
            t += h;
            y = y5;
            k1 = k.swap_remove(6);
            steps += 1;
        }
        let factor = if norm == 0.0 { 5.0 } else { (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    (y, steps)
}

fn integrate_adaptive(fs: &FilterState, omega: &Vec3, dt: f64, noise: &NoiseConfig) -> FilterState {
    let n = fs.n();
    let y0 = pack(&fs.xhat, &fs.sigma);
    let (y, _) = dopri45(|_, y| joint_rhs(y, omega, n, noise), &y0, dt, RK_RTOL, RK_ATOL);
    let (xhat, mut sigma) = unpack(&y, n);
    symmetrize(&mut sigma);
    FilterState {
        xhat,
        sigma,
        t: fs.t + dt,
    }
}

/// Identical propagation workload for every variant.
#[derive(Debug, Clone)]
pub struct PhiWorkload {
    pub start: FilterState,
    pub omega: Vec<Vec3>,
    pub dt: f64,
    pub noise: NoiseConfig,
}

impl PhiWorkload {
    /// Gyro readings along a random Lissajous trajectory.
    pub fn lissajous(n: usize, steps: usize, rate: f64, noise: NoiseConfig, seed: u64) -> Self {
        let liss = Lissajous::from_config(
            &crate::config::TrajectoryConfig::default(),
            &mut rng_for(seed, crate::sim::streams::TRAJECTORY),
        );
        let d = state_dim(n);
        let mut sigma = DMatrix::identity(d, d) * 0.01;
        sigma[(0, 3)] = 0.002;
        sigma[(3, 0)] = 0.002;
        let bias = Vec3::new(0.01, -0.02, 0.015);
        PhiWorkload {
            start: FilterState {
                xhat: GroupElement::identity(n),
                sigma,
                t: 0.0,
            },
            omega: (0..steps).map(|k| liss.omega(k as f64 / rate) + bias).collect(),
            dt: 1.0 / rate,
            noise,
        }
    }

    pub fn run(&self, variant: PhiVariant) -> FilterState {
        let mut fs = self.start.clone();
        for w in &self.omega {
            fs = propagate_variant(variant, &fs, w, self.dt, &self.noise);
        }
        fs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: PhiVariant,
    /// Best wall time over the repeats (s).
    pub seconds: f64,
    /// Relative to the closed form.
    pub percent: f64,
    /// `max |Σ − Σ_closed|` at the end of the workload.
    pub cov_diff: f64,
}

/// Times every variant on the same workload, interleaving repeats and
/// keeping the fastest run of each.
pub fn bench_phi(work: &PhiWorkload, variants: &[PhiVariant], repeats: usize) -> Vec<BenchRow> {
    let reference = work.run(PhiVariant::ClosedForm);
    let mut best = vec![f64::INFINITY; variants.len()];
    let mut finals = vec![None; variants.len()];
    for _ in 0..repeats.max(1) {
        for (i, v) in variants.iter().enumerate() {
            let start = Instant::now();
            let out = work.run(*v);
            best[i] = best[i].min(start.elapsed().as_secs_f64());
            finals[i] = Some(out);
        }
    }
    let base = variants
        .iter()
        .position(|v| *v == PhiVariant::ClosedForm)
        .map(|i| best[i]);
    variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let fs = finals[i].as_ref().expect("at least one repeat");
            BenchRow {
                variant: *v,
                seconds: best[i],
                percent: base.map_or(f64::NAN, |b| 100.0 * best[i] / b),
                cov_diff: (&fs.sigma - &reference.sigma).amax(),
            }
        })
        .collect()
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:<26}{:>14}{:>12}{:>16}\n", "variant", "seconds", "relative", "max|dSigma|");
    for r in rows {
        s += &format!(
            "{:<26}{:>14.6}{:>11.1}%{:>16.3e}\n",
            r.variant.label(),
            r.seconds,
            r.percent,
            r.cov_diff
        );
    }
    s
}
