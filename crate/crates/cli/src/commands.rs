use std::path::{Path, PathBuf};

use abc_eqf_core::campaign::{self, CampaignError};
use abc_eqf_core::eval::{self, compare_report};
use abc_eqf_core::runtime::{self, PhiVariant, PhiWorkload};
use abc_eqf_core::sim::{self, SimError};
use abc_eqf_core::{GroundTruthSample, RunConfig, SystemState};

use crate::error::CliError;
use crate::io;

fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError::Config {
        path: "<config>".into(),
        message: e.to_string(),
    }
}

fn campaign_error(e: CampaignError) -> CliError {
    match e {
        CampaignError::Config(c) | CampaignError::Sim(SimError::Config(c)) => config_error(c),
        CampaignError::NoRuns => CliError::Usage(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = sim::simulate(cfg, cfg.seed).map_err(|e| match e {
        SimError::Config(c) => config_error(c),
        other => CliError::Data(other.to_string()),
    })?;
    io::ensure_dir(out)?;
    io::write_gyro(&out.join("gyro.csv"), &data.gyro)?;
    io::write_directions(out, &data.sensors, &data.meas)?;
    io::write_truth(&out.join("truth.csv"), &data.truth)?;
    io::echo_config(cfg, out)?;
    println!(
        "wrote {} gyro samples and {} direction measurements to {}",
        data.gyro.len(),
        data.meas.len(),
        out.display()
    );
    Ok(())
}

pub fn run(cfg: &RunConfig, logs: &Path, out: &Path) -> Result<(), CliError> {
    let sensors = sim::sensor_set(cfg).map_err(config_error)?;
    let gyro = io::read_gyro(&logs.join("gyro.csv"))?;
    let meas = io::read_all_directions(logs, &sensors)?;
    let truth_path = logs.join("truth.csv");
    let truth = if truth_path.exists() {
        Some(io::read_truth(&truth_path, cfg.n)?)
    } else {
        log::info!("no truth.csv in {}; errors are not computed", logs.display());
        None
    };

    let (xi0, sigma0) = match &truth {
        Some(tr) => {
            let t0 = tr.first().ok_or_else(|| CliError::Data("truth.csv is empty".into()))?;
            campaign::initial_estimate(cfg, &t0.state(), cfg.seed)
        }
        None => {
            let mut c = cfg.clone();
            c.init.attitude_error.get_or_insert([0.0; 3]);
            campaign::initial_estimate(&c, &SystemState::identity(cfg.n), cfg.seed)
        }
    };
    let truth_fn = truth.as_ref().map(|tr| {
        move |t: f64| match eval::truth_at(tr, t) {
            Ok(s) => s.state(),
            Err(_) => nearest(tr, t).state(),
        }
    });
    let runs = campaign::replay_logs(
        cfg,
        &sensors,
        (&xi0, &sigma0),
        &gyro,
        &meas,
        truth_fn.as_ref().map(|f| f as &dyn Fn(f64) -> SystemState),
    )
    .map_err(campaign_error)?;

    io::ensure_dir(out)?;
    for r in &runs {
        io::write_estimates(&out.join(format!("estimates_{}.csv", r.name)), &r.output.snapshots)?;
        let mut line = format!(
            "{}: {} steps, {} updates ({} skipped), {:.3} s",
            r.name,
            r.output.snapshots.len(),
            r.output.updates,
            r.output.skipped_updates,
            r.seconds
        );
        if let Some(tr) = &truth {
            let series = eval::error_series(tr, &r.output.snapshots).map_err(|e| CliError::Data(e.to_string()))?;
            io::write_errors(&out.join(format!("errors_{}.csv", r.name)), &series)?;
            if let Some(k) = series.len().checked_sub(1) {
                line += &format!(
                    ", final attitude error {:.6} deg, bias error {:.3e}",
                    series.att_err[k], series.bias_err[k]
                );
            }
        }
        println!("{line}");
    }
    Ok(())
}

fn nearest(truth: &[GroundTruthSample], t: f64) -> &GroundTruthSample {
    truth
        .iter()
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
        .expect("non-empty truth")
}

pub fn montecarlo(cfg: &RunConfig, runs: usize, out: &Path) -> Result<(), CliError> {
    let threads = campaign::worker_count(None);
    log::info!("{runs} runs on {threads} workers");
    let mc = campaign::montecarlo(cfg, runs, Some(threads)).map_err(campaign_error)?;
    io::ensure_dir(out)?;
    io::echo_config(cfg, out)?;

    for (name, report) in &mc.reports {
        let nees = mc.nees.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
        let secs = mc.seconds.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
        io::write_report(&out.join(format!("report_{name}.csv")), name, report, nees, secs)?;
    }

    let n_cal = cfg.n;
    let mut header = vec!["seed".to_string(), "filter".into()];
    for phase in ["transient", "asymptotic"] {
        header.push(format!("{phase}_attitude_deg"));
        header.push(format!("{phase}_bias"));
        header.extend((1..=n_cal).map(|i| format!("{phase}_cal{i}_deg")));
    }
    header.extend(["nees_attitude".to_string(), "seconds".into()]);
    let mut rows = Vec::new();
    for r in &mc.runs {
        for (name, m, nees, secs) in &r.filters {
            let mut row = vec![r.seed.to_string(), name.to_string()];
            for s in [&m.transient, &m.asymptotic] {
                row.push(io::fmt(s.attitude_deg));
                row.push(io::fmt(s.bias));
                row.extend(s.cal_deg.iter().map(|c| io::fmt(*c)));
            }
            row.push(nees.map_or_else(String::new, io::fmt));
            row.push(io::fmt(*secs));
            rows.push(row);
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_table(&out.join("runs.csv"), &header_refs, rows)?;

    println!("{runs} runs, seeds {}..={}", cfg.seed, cfg.seed.wrapping_add(runs as u64 - 1));
    if mc.reports.len() >= 2 {
        let secs: Vec<f64> = mc.seconds.iter().map(|(_, s)| *s).collect();
        let cmp = compare_report(&mc.reports, Some(&secs)).map_err(|e| CliError::Data(e.to_string()))?;
        io::write_file(&out.join("comparison.csv"), &cmp.to_csv())?;
        print!("{}", cmp.to_text());
    } else {
        for (name, r) in &mc.reports {
            println!(
                "{name}: transient attitude {:.4} deg, asymptotic attitude {:.4} deg",
                r.transient.attitude_deg, r.asymptotic.attitude_deg
            );
        }
    }
    for (name, v) in &mc.nees {
        println!("{name}: mean attitude NEES {v:.3}");
    }
    Ok(())
}

pub fn compare(paths: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    if paths.len() < 2 {
        return Err(CliError::Usage("compare needs at least two report files".into()));
    }
    let loaded = paths.iter().map(|p| io::read_report(p)).collect::<Result<Vec<_>, _>>()?;
    let secs: Option<Vec<f64>> = loaded.iter().map(|l| l.seconds).collect();
    let reports: Vec<(String, _)> = loaded.into_iter().map(|l| (l.name, l.report)).collect();
    let cmp = compare_report(&reports, secs.as_deref()).map_err(|e| CliError::Data(e.to_string()))?;
    print!("{}", cmp.to_text());
    if let Some(dir) = out {
        io::ensure_dir(dir)?;
        io::write_file(&dir.join("comparison.csv"), &cmp.to_csv())?;
    }
    Ok(())
}

pub fn bench_phi(cfg: &RunConfig, steps: usize, repeats: usize, out: Option<&Path>) -> Result<(), CliError> {
    if steps == 0 {
        return Err(CliError::Usage("--steps must be positive".into()));
    }
    let work = PhiWorkload::lissajous(cfg.n, steps, cfg.gyro.rate, cfg.filter_noise(), cfg.seed);
    // Timing runs on the calling thread only.
    let rows = runtime::bench_phi(&work, &PhiVariant::ALL, repeats);
    println!(
        "n = {}, {steps} steps at {} Hz, best of {}",
        cfg.n,
        cfg.gyro.rate,
        repeats.max(1)
    );
    print!("{}", runtime::format_table(&rows));
    if let Some(dir) = out {
        io::ensure_dir(dir)?;
        let table = rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.label().to_string(),
                    io::fmt(r.seconds),
                    io::fmt(r.percent),
                    io::fmt(r.cov_diff),
                ]
            })
            .collect();
        io::write_table(&dir.join("bench_phi.csv"), &["variant", "seconds", "percent", "cov_diff"], table)?;
    }
    Ok(())
}
