//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use abc_eqf_core::campaign::{montecarlo, run_single, McResult};
use abc_eqf_core::eqf::{compute_a0, compute_c0_rows, compute_md, compute_phi, input_noise, omega0, state_dim, FilterState};
use abc_eqf_core::iekf::{iekf_f, iekf_phi};
use abc_eqf_core::lie::{exp_so3, SdpElement};
use abc_eqf_core::runtime::{bench_phi, propagate_variant, PhiVariant, PhiWorkload};
use abc_eqf_core::symmetry::{
    action_phi, action_psi, action_rho, coords_theta, coords_theta_inv, group_inv, group_mul, lift_lambda,
    lifted_dynamics, output_h, state_error, system_vector_field, transitivity_element, InputSample, OutputVec,
    SensorLayout,
};
use abc_eqf_core::{GroupElement, NoiseConfig, Rotation, RunConfig, SystemState, Vec3};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn rand_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale
}

fn rand_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = rand_vec(rng, 1.0);
        if v.norm() > 1e-3 {
            return v.normalize();
        }
    }
}

fn rand_rot(rng: &mut impl Rng) -> Rotation {
    exp_so3(&(rand_unit(rng) * rng.gen_range(0.0..3.0)))
}

fn rand_group(rng: &mut impl Rng, n: usize) -> GroupElement {
    GroupElement {
        nav: SdpElement::new(rand_rot(rng), rand_vec(rng, 2.0)),
        cal: (0..n).map(|_| rand_rot(rng)).collect(),
    }
}

fn rand_state(rng: &mut impl Rng, n: usize) -> SystemState {
    SystemState {
        attitude: rand_rot(rng),
        bias: rand_vec(rng, 0.5),
        cal: (0..n).map(|_| rand_rot(rng)).collect(),
    }
}

fn state_dist(a: &SystemState, b: &SystemState) -> f64 {
    let mut d = (a.attitude.matrix() - b.attitude.matrix()).amax().max((a.bias - b.bias).amax());
    for (x, y) in a.cal.iter().zip(&b.cal) {
        d = d.max((x.matrix() - y.matrix()).amax());
    }
    d
}

fn group_dist(a: &GroupElement, b: &GroupElement) -> f64 {
    let mut d = (a.nav.to_homogeneous() - b.nav.to_homogeneous()).amax();
    for (x, y) in a.cal.iter().zip(&b.cal) {
        d = d.max((x.matrix() - y.matrix()).amax());
    }
    d
}

fn output_dist(a: &OutputVec, b: &OutputVec) -> f64 {
    a.dirs.iter().zip(&b.dirs).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Worst residual per property over 1000 samples at each n.
fn symmetry_suite() -> Verdict {
    const SAMPLES: usize = 1000;
    const TOL: f64 = 1e-10;
    const FD_TOL: f64 = 1e-6;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 10];
    let names = [
        "associativity",
        "identity",
        "inverse",
        "phi action",
        "psi action",
        "rho action",
        "transitivity",
        "output equivariance",
        "lift projection (fd)",
        "lift Ad-equivariance",
    ];
    for n in 0..4 {
        let id = GroupElement::identity(n);
        let layout = SensorLayout::new(n + 1 + n % 2, n).unwrap();
        let origin = SystemState::identity(n);
        for _ in 0..SAMPLES {
            let (x, y, z) = (rand_group(&mut rng, n), rand_group(&mut rng, n), rand_group(&mut rng, n));
            let xi = rand_state(&mut rng, n);
            let xi2 = rand_state(&mut rng, n);
            let u = InputSample::new(rand_vec(&mut rng, 2.0));
            let refs: Vec<Vec3> = (0..layout.total).map(|_| rand_unit(&mut rng)).collect();
            let yv = OutputVec {
                dirs: (0..layout.total).map(|_| rand_unit(&mut rng)).collect(),
            };
            let mul = |a: &GroupElement, b: &GroupElement| group_mul(a, b).unwrap();
            let phi = |g: &GroupElement, s: &SystemState| action_phi(g, s).unwrap();
            let rho = |g: &GroupElement, o: &OutputVec| action_rho(g, o, &layout).unwrap();

            let r = [
                group_dist(&mul(&mul(&x, &y), &z), &mul(&x, &mul(&y, &z))),
                group_dist(&mul(&x, &id), &x).max(group_dist(&mul(&id, &x), &x)),
                group_dist(&mul(&x, &group_inv(&x)), &id).max(group_dist(&mul(&group_inv(&x), &x), &id)),
                state_dist(&phi(&x, &phi(&y, &xi)), &phi(&mul(&y, &x), &xi)).max(state_dist(&phi(&id, &xi), &xi)),
                (action_psi(&x, &action_psi(&y, &u)).omega - action_psi(&mul(&y, &x), &u).omega).amax(),
                output_dist(&rho(&x, &rho(&y, &yv)), &rho(&mul(&y, &x), &yv)),
                state_dist(&phi(&transitivity_element(&xi, &xi2).unwrap(), &xi), &xi2),
                output_dist(
                    &output_h(&phi(&x, &xi), &refs, &layout).unwrap(),
                    &rho(&x, &output_h(&xi, &refs, &layout).unwrap()),
                ),
                {
                    let l = lift_lambda(&xi, &u);
                    let h = 1e-5;
                    let flow = |t: f64| phi(&GroupElement::exp(&l.scaled(t)), &xi);
                    let (p, m) = (flow(h), flow(-h));
                    let (rdot, bdot, cdot) = system_vector_field(&xi, &u);
                    let mut e = ((p.attitude.matrix() - m.attitude.matrix()) / (2.0 * h) - rdot).amax();
                    e = e.max(((p.bias - m.bias) / (2.0 * h) - bdot).amax());
                    for i in 0..n {
                        e = e.max(((p.cal[i].matrix() - m.cal[i].matrix()) / (2.0 * h) - cdot[i]).amax());
                    }
                    e
                },
                {
                    let lhs = x.adjoint(&lift_lambda(&phi(&x, &xi), &action_psi(&x, &u)));
                    let rhs = lifted_dynamics(&GroupElement::from_state(&xi), &u, &origin).unwrap();
                    (lhs.to_vector() - lift_lambda(&xi, &u).to_vector())
                        .amax()
                        .max((rhs.to_vector() - lift_lambda(&xi, &u).to_vector()).amax())
                },
            ];
            for (w, v) in worst.iter_mut().zip(r) {
                *w = w.max(v);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut pass = secs < 10.0;
    let mut detail = Vec::new();
    for (i, (name, w)) in names.iter().zip(worst).enumerate() {
        let tol = if i == 8 { FD_TOL } else { TOL };
        pass &= w < tol;
        detail.push(format!("{name} {w:.1e}"));
    }
    Verdict::new(
        pass,
        format!("{} samples x n=0..3; worst: {}; {secs:.2} s (< 10 s)", SAMPLES, detail.join(", ")),
    )
}

/// Error coordinates after flowing truth and estimate for time `t` under a constant gyro reading.
fn eps_at(xhat: &GroupElement, eps0: &DVector<f64>, omega: &Vec3, t: f64) -> DVector<f64> {
    let n = xhat.n();
    let xi0 = action_phi(xhat, &coords_theta_inv(eps0).unwrap()).unwrap();
    let xi = SystemState {
        attitude: xi0.attitude * exp_so3(&((omega - xi0.bias) * t)),
        ..xi0
    };
    let lam = lifted_dynamics(xhat, &InputSample::new(*omega), &SystemState::identity(n)).unwrap();
    let x = group_mul(xhat, &GroupElement::exp(&lam.scaled(t))).unwrap();
    coords_theta(&state_error(&x, &xi).unwrap()).unwrap()
}

fn eps_rate(xhat: &GroupElement, eps0: &DVector<f64>, omega: &Vec3) -> DVector<f64> {
    let h = 1e-3;
    let f = |t: f64| eps_at(xhat, eps0, omega, t);
    (f(-2.0 * h) - f(-h) * 8.0 + f(h) * 8.0 - f(2.0 * h)) / (12.0 * h)
}

fn linearization() -> Verdict {
    const CONFIGS: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let delta = 1e-5;
    let (mut worst_a, mut worst_c) = (0.0f64, 0.0f64);
    for trial in 0..CONFIGS {
        let n = trial % 4;
        let d = state_dim(n);
        let xhat = rand_group(&mut rng, n);
        let omega = rand_vec(&mut rng, 1.5);
        let a = compute_a0(&omega0(&xhat, &omega), n);
        for j in 0..d {
            let mut ep = DVector::zeros(d);
            ep[j] = delta;
            let col = (eps_rate(&xhat, &ep, &omega) - eps_rate(&xhat, &(-&ep), &omega)) / (2.0 * delta);
            worst_a = worst_a.max((col - a.column(j)).amax());
        }

        let total = n + 1 + trial % 2;
        let layout = SensorLayout::new(total, n).unwrap();
        let refs: Vec<Vec3> = (0..total).map(|_| rand_unit(&mut rng)).collect();
        let rows: Vec<(Vec3, Option<usize>)> = refs.iter().enumerate().map(|(i, r)| (*r, layout.cal_index(i))).collect();
        let c = compute_c0_rows(&rows, n);
        let stack = |o: &OutputVec| DVector::from_iterator(3 * total, o.dirs.iter().flat_map(|v| v.iter().copied()));
        for j in 0..d {
            let mut ep = DVector::zeros(d);
            ep[j] = delta;
            let hp = output_h(&coords_theta_inv(&ep).unwrap(), &refs, &layout).unwrap();
            let hm = output_h(&coords_theta_inv(&(-&ep)).unwrap(), &refs, &layout).unwrap();
            let col = (stack(&hp) - stack(&hm)) / (2.0 * delta);
            worst_c = worst_c.max((col - c.column(j)).amax());
        }
    }
    Verdict::new(
        worst_a < 1e-6 && worst_c < 1e-6,
        format!("{CONFIGS} configurations; A0 worst {worst_a:.1e}, C0 worst {worst_c:.1e} (tol 1e-6)"),
    )
}

/// Composite 4-point Gauss–Legendre over 16 panels (64 nodes).
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
            let phi = compute_phi(w, mid + 0.5 * h * x, n);
            acc += (&phi * &mc * phi.transpose()) * (0.5 * h * wt);
        }
    }
    acc
}

fn discretization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_phi = 0.0f64;
    let mut worst_md = 0.0f64;
    let mut worst_iekf = 0.0f64;
    let unit = NoiseConfig {
        sigma_w: 1.0,
        sigma_bw: 1.0,
        sigma_kappa: 1.0,
    };
    let nominal = NoiseConfig::default();
    for k in 0..=400 {
        let n = k % 4;
        let x = match k % 4 {
            0 => 2.0 * k as f64 / 400.0,
            1 => rng.gen_range(0.0..1e-3),
            _ => rng.gen_range(0.0..2.0),
        };
        let dt = [0.005, 0.01, 0.05, 0.5][k % 4];
        let w = rand_unit(&mut rng) * (x / dt);
        let oracle = (compute_a0(&w, n) * dt).exp();
        worst_phi = worst_phi.max((compute_phi(&w, dt, n) - oracle).amax());
        if k % 2 == 0 {
            for noise in [&unit, &nominal] {
                let md = compute_md(&w, dt, noise, n);
                let q = quadrature_md(&w, dt, noise, n);
                worst_md = worst_md.max((&md - &q).norm() / q.norm());
            }
        }
        let r = rand_rot(&mut rng);
        let f = iekf_f(r.matrix(), n);
        let oracle = (&f * dt).exp();
        worst_iekf = worst_iekf
            .max((&f * &f).amax())
            .max((iekf_phi(r.matrix(), dt, n) - oracle).amax());
    }
    Verdict::new(
        worst_phi < 1e-11 && worst_md < 1e-9 && worst_iekf < 1e-14,
        format!(
            "|w0|dt in [0, 2]: Phi vs expm {worst_phi:.1e} (< 1e-11); Md vs 64-node quadrature rel {worst_md:.1e} (< 1e-9); IEKF F^2 and Phi vs expm {worst_iekf:.1e} (< 1e-14)"
        ),
    )
}

/// Two non-parallel noiseless direction sensors, 20° errors in every rotation
/// state. The filters keep their nominal noise model.
fn noiseless_config() -> RunConfig {
    let mut cfg = RunConfig {
        duration: 30.01,
        ..Default::default()
    };
    let e = 20f64.to_radians() / 3f64.sqrt();
    cfg.filter_noise.sigma_w = Some(cfg.gyro.sigma_w);
    cfg.filter_noise.sigma_bw = Some(cfg.gyro.sigma_bw);
    cfg.gyro.sigma_w = 0.0;
    cfg.gyro.sigma_bw = 0.0;
    for s in cfg.sensors.iter_mut() {
        s.filter_sigma_y = Some(s.sigma_y);
        s.sigma_y = 0.0;
        s.pos_std = 0.0;
    }
    cfg.sensors[0].calibration = [e, -e, e];
    cfg.init.attitude_error = Some([e, e, -e]);
    cfg.init.sigma_calibration_deg = 20.0;
    cfg
}

fn noiseless_convergence() -> Verdict {
    let start = Instant::now();
    let cfg = noiseless_config();
    let mut worst = [[0.0f64; 3]; 2];
    let mut names = ["", ""];
    let mut ok = true;
    for seed in 0..10 {
        let r = match run_single(&cfg, seed) {
            Ok(r) => r,
            Err(e) => return Verdict::new(false, format!("seed {seed}: {e}")),
        };
        for (i, f) in r.filters.iter().enumerate() {
            names[i] = f.name;
            let s = &f.series;
            let k = s.t.partition_point(|&t| t < 30.0) - 1;
            let errs = [s.att_err[k].to_radians(), s.bias_err[k], s.cal_err[0][k].to_radians()];
            for (w, e) in worst[i].iter_mut().zip(errs) {
                *w = w.max(e);
                ok &= e < 1e-3;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let fmt = |i: usize| {
        format!(
            "{} att {:.1e} rad, bias {:.1e} rad/s, cal {:.1e} rad",
            names[i], worst[i][0], worst[i][1], worst[i][2]
        )
    };
    Verdict::new(
        ok && secs < 30.0,
        format!("10 seeds, worst at t = 30 s: {}; {}; (< 1e-3); {secs:.1} s (< 30 s)", fmt(0), fmt(1)),
    )
}

fn report<'a>(mc: &'a McResult, name: &str) -> &'a abc_eqf_core::eval::RmseReport {
    &mc.reports.iter().find(|(n, _)| n == name).expect("filter present").1
}

fn ordering(mc: &McResult) -> (bool, String) {
    let (e, i) = (report(mc, "eqf"), report(mc, "iekf"));
    let att = e.transient.attitude_deg <= i.transient.attitude_deg;
    let cal = e.transient.cal_deg[0] <= i.transient.cal_deg[0];
    let (a, b) = (e.asymptotic.attitude_deg, i.asymptotic.attitude_deg);
    let ratio = a.max(b) / a.min(b);
    (
        att && cal && ratio <= 1.5,
        format!(
            "transient att EqF {:.3}° vs IEKF {:.3}°, transient cal EqF {:.3}° vs IEKF {:.3}°, asymptotic att {:.3}° vs {:.3}° (ratio {ratio:.3} <= 1.5)",
            e.transient.attitude_deg, i.transient.attitude_deg, e.transient.cal_deg[0], i.transient.cal_deg[0], a, b
        ),
    )
}

fn monte_carlo_ordering(mc: &McResult, secs: f64) -> Verdict {
    let (ok, detail) = ordering(mc);
    let (e, i) = (report(mc, "eqf"), report(mc, "iekf"));
    let reference_values = [
        ("EqF transient att", e.transient.attitude_deg, 3.5331),
        ("IEKF transient att", i.transient.attitude_deg, 4.9497),
        ("EqF transient cal", e.transient.cal_deg[0], 5.7892),
        ("IEKF transient cal", i.transient.cal_deg[0], 8.0480),
        ("EqF asymptotic att", e.asymptotic.attitude_deg, 1.3870),
        ("IEKF asymptotic att", i.asymptotic.attitude_deg, 1.3995),
    ];
    let within: Vec<String> = reference_values
        .iter()
        .map(|(name, got, refv)| {
            let f = (got / refv).max(refv / got);
            format!("{name} x{f:.2}{}", if f <= 3.0 { "" } else { " (outside 3x)" })
        })
        .collect();
    Verdict::new(
        ok && secs < 600.0,
        format!(
            "25 runs x 70 s: {detail}; {secs:.1} s (< 600 s); magnitude vs reference values, not gated: {}",
            within.join(", ")
        ),
    )
}

fn runtime_study() -> Verdict {
    let work = PhiWorkload::lissajous(1, 14_000, 200.0, NoiseConfig::default(), 7);
    let rows = bench_phi(&work, &PhiVariant::ALL, 20);
    let pct = |v: PhiVariant| rows.iter().find(|r| r.variant == v).unwrap().percent;
    let diff = |v: PhiVariant| rows.iter().find(|r| r.variant == v).unwrap().cov_diff;
    let (p2, p3, p4) = (pct(PhiVariant::MatrixExp), pct(PhiVariant::FirstOrder), pct(PhiVariant::Adaptive));

    // One step at |w0| dt = 0.1 from a correlated covariance.
    let d = state_dim(1);
    let mut sigma = DMatrix::identity(d, d) * 0.1;
    sigma[(0, 3)] = 0.02;
    sigma[(3, 0)] = 0.02;
    let fs = FilterState {
        xhat: GroupElement::identity(1),
        sigma,
        t: 0.0,
    };
    let dt = 0.005;
    let w = Vec3::new(1.0, -2.0, 0.5).normalize() * (0.1 / dt);
    let noise = NoiseConfig::default();
    let step = |v| propagate_variant(v, &fs, &w, dt, &noise).sigma;
    let first_order_gap = (step(PhiVariant::FirstOrder) - step(PhiVariant::ClosedForm)).amax();

    let pass = p2 > 100.0 && p4 > 500.0 && (90.0..=130.0).contains(&p3) && first_order_gap > 1e-6 && diff(PhiVariant::MatrixExp) < 1e-10;
    Verdict::new(
        pass,
        format!(
            "14000 steps, n = 1: (ii) {p2:.0}% (> 100%), (iii) {p3:.0}% (90-130%), (iv) {p4:.0}% (> 500%); Sigma (ii) vs (i) {:.1e} (< 1e-10); first-order single-step gap {first_order_gap:.1e} (> 1e-6)",
            diff(PhiVariant::MatrixExp)
        ),
    )
}

fn consistency(mc: &McResult) -> Verdict {
    let nees = mc.nees.iter().find(|(n, _)| n == "eqf").map(|(_, v)| *v);
    match nees {
        Some(v) => Verdict::new(
            (0.9..=9.0).contains(&v),
            format!("EqF mean attitude NEES after transient {v:.3} in [0.9, 9] (dimension 3)"),
        ),
        None => Verdict::new(false, "no NEES recorded"),
    }
}

fn robustness() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.sensors[0].dropout = 0.1;
    for s in cfg.sensors.iter_mut() {
        s.jitter = 0.002;
    }
    match montecarlo(&cfg, 25, None) {
        Ok(mc) => {
            let (ok, detail) = ordering(&mc);
            Verdict::new(ok, format!("10% magnetometer dropout, ±2 ms jitter, 25 runs: {detail}"))
        }
        Err(e) => Verdict::new(false, e.to_string()),
    }
}

fn main() -> ExitCode {
    let mut all = true;
    let mut show = |id: u32, name: &str, v: Verdict| {
        all &= v.pass;
        println!("criterion {id} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };

    show(1, "symmetry property suite", symmetry_suite());
    show(2, "linearization oracles", linearization());
    show(3, "discretization oracles", discretization());
    show(4, "noiseless convergence", noiseless_convergence());

    let start = Instant::now();
    let mc = montecarlo(&RunConfig::default(), 25, None);
    let secs = start.elapsed().as_secs_f64();
    match &mc {
        Ok(mc) => show(5, "Monte-Carlo ordering", monte_carlo_ordering(mc, secs)),
        Err(e) => show(5, "Monte-Carlo ordering", Verdict::new(false, e.to_string())),
    }
    show(6, "runtime study", runtime_study());
    match &mc {
        Ok(mc) => show(7, "filter consistency", consistency(mc)),
        Err(e) => show(7, "filter consistency", Verdict::new(false, e.to_string())),
    }
    show(8, "robustness replay", robustness());

    if all {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
