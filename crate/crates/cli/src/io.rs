//! Config loading and the CSV log formats.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use abc_eqf_core::eval::{ErrorSeries, RmseReport, StateRmse};
use abc_eqf_core::{
    DirectionMeasurement, GroundTruthSample, GyroSample, Mat3, Reference, Rotation, RunConfig, SensorSet, Snapshot, Vec3,
};

use crate::error::CliError;

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn validate(cfg: &RunConfig, origin: &str) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::Config {
        path: origin.to_string(),
        message: e.to_string(),
    })
}

/// Writes the fully resolved config next to the outputs.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&dir.join("config.resolved.toml"), &text)
}

pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let to_err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        w.write_record(&self.header).map_err(to_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(to_err)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }
}

fn matrix_header(prefix: &str) -> Vec<String> {
    (1..=3)
        .flat_map(|r| (1..=3).map(move |c| format!("{prefix}{r}{c}")))
        .collect()
}

fn push_matrix(row: &mut Vec<String>, m: &Mat3) {
    for r in 0..3 {
        for c in 0..3 {
            row.push(fmt(m[(r, c)]));
        }
    }
}

fn push_vec(row: &mut Vec<String>, v: &Vec3) {
    row.extend(v.iter().map(|x| fmt(*x)));
}

pub fn write_gyro(path: &Path, gyro: &[GyroSample]) -> Result<(), CliError> {
    let mut t = Table::new(["t", "wx", "wy", "wz"]);
    for g in gyro {
        let mut row = vec![fmt(g.t)];
        push_vec(&mut row, &g.omega);
        t.push(row);
    }
    t.write(path)
}

pub fn dir_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("dir_{id}.csv"))
}

/// One file per sensor; reference columns only for time-varying references.
pub fn write_directions(dir: &Path, sensors: &SensorSet, meas: &[DirectionMeasurement]) -> Result<(), CliError> {
    for s in sensors.sensors() {
        let varying = matches!(s.reference, Reference::TimeVarying);
        let mut header = vec!["t", "yx", "yy", "yz"];
        if varying {
            header.extend(["dx", "dy", "dz"]);
        }
        let mut t = Table::new(header);
        for m in meas.iter().filter(|m| m.sensor_id == s.id) {
            let mut row = vec![fmt(m.t)];
            push_vec(&mut row, &m.y);
            if varying {
                let d = m.reference.ok_or_else(|| {
                    CliError::Data(format!("sensor {} measurement at t = {} lacks a reference", s.id, m.t))
                })?;
                push_vec(&mut row, &d);
            }
            t.push(row);
        }
        t.write(&dir_file(dir, s.id))?;
    }
    Ok(())
}

pub fn write_truth(path: &Path, truth: &[GroundTruthSample]) -> Result<(), CliError> {
    let n = truth.first().map_or(0, |s| s.cal.len());
    let mut header = vec!["t".to_string()];
    header.extend(matrix_header("r"));
    header.extend(["bx", "by", "bz"].map(String::from));
    for i in 1..=n {
        header.extend(matrix_header(&format!("c{i}")));
    }
    let mut t = Table::new(header);
    for s in truth {
        let mut row = vec![fmt(s.t)];
        push_matrix(&mut row, s.attitude.matrix());
        push_vec(&mut row, &s.bias);
        for c in &s.cal {
            push_matrix(&mut row, c.matrix());
        }
        t.push(row);
    }
    t.write(path)
}

pub fn write_estimates(path: &Path, snaps: &[Snapshot]) -> Result<(), CliError> {
    let n = snaps.first().map_or(0, |s| s.state.cal.len());
    let dim = snaps.first().map_or(0, |s| s.sigma_diag.len());
    let mut header = vec!["t".to_string()];
    header.extend(matrix_header("r"));
    header.extend(["bx", "by", "bz"].map(String::from));
    for i in 1..=n {
        header.extend(matrix_header(&format!("c{i}")));
    }
    header.extend((0..dim).map(|k| format!("p{k}")));
    let mut t = Table::new(header);
    for s in snaps {
        let mut row = vec![fmt(s.t)];
        push_matrix(&mut row, s.state.attitude.matrix());
        push_vec(&mut row, &s.state.bias);
        for c in &s.state.cal {
            push_matrix(&mut row, c.matrix());
        }
        row.extend(s.sigma_diag.iter().map(|v| fmt(*v)));
        t.push(row);
    }
    t.write(path)
}

pub fn write_errors(path: &Path, series: &ErrorSeries) -> Result<(), CliError> {
    let mut header = vec!["t".to_string(), "att_deg".into(), "bias".into()];
    header.extend((1..=series.cal_err.len()).map(|i| format!("cal{i}_deg")));
    let mut t = Table::new(header);
    for k in 0..series.len() {
        let mut row = vec![fmt(series.t[k]), fmt(series.att_err[k]), fmt(series.bias_err[k])];
        row.extend(series.cal_err.iter().map(|c| fmt(c[k])));
        t.push(row);
    }
    t.write(path)
}

/// Parsed CSV with column lookup by name.
struct Parsed {
    file: String,
    columns: HashMap<String, usize>,
    records: Vec<(usize, csv::StringRecord)>,
}

impl Parsed {
    fn read(path: &Path) -> Result<Self, CliError> {
        let file = path.display().to_string();
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => CliError::io(path, io),
                other => CliError::Data(format!("{file}: {other:?}")),
            })?;
        let header = r.headers().map_err(|e| CliError::Parse {
            file: file.clone(),
            row: 1,
            message: e.to_string(),
        })?;
        let columns = header.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        let mut records = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::Parse {
                file: file.clone(),
                row: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            records.push((line, rec));
        }
        Ok(Parsed { file, columns, records })
    }

    fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    fn col(&self, name: &str) -> Result<usize, CliError> {
        self.columns.get(name).copied().ok_or_else(|| CliError::Parse {
            file: self.file.clone(),
            row: 1,
            message: format!("missing column '{name}'"),
        })
    }

    fn cols(&self, names: &[String]) -> Result<Vec<usize>, CliError> {
        names.iter().map(|n| self.col(n)).collect()
    }

    fn value(&self, k: usize, col: usize) -> Result<f64, CliError> {
        let (line, rec) = &self.records[k];
        let raw = rec.get(col).unwrap_or("");
        let name = self
            .columns
            .iter()
            .find(|(_, &i)| i == col)
            .map_or("?", |(n, _)| n.as_str());
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| CliError::Parse {
                file: self.file.clone(),
                row: *line,
                message: format!("column '{name}': invalid number '{raw}'"),
            })
    }

    fn vec3(&self, k: usize, cols: &[usize]) -> Result<Vec3, CliError> {
        Ok(Vec3::new(self.value(k, cols[0])?, self.value(k, cols[1])?, self.value(k, cols[2])?))
    }

    fn mat3(&self, k: usize, cols: &[usize]) -> Result<Mat3, CliError> {
        let mut m = Mat3::zeros();
        for (i, c) in cols.iter().enumerate() {
            m[(i / 3, i % 3)] = self.value(k, *c)?;
        }
        Ok(m)
    }

    fn rotation(&self, k: usize, cols: &[usize]) -> Result<Rotation, CliError> {
        Rotation::from_matrix(self.mat3(k, cols)?).map_err(|e| CliError::Parse {
            file: self.file.clone(),
            row: self.records[k].0,
            message: e.to_string(),
        })
    }

    fn check_sorted(&self, times: &[f64], strict: bool) -> Result<(), CliError> {
        for k in 1..times.len() {
            let bad = if strict { times[k] <= times[k - 1] } else { times[k] < times[k - 1] };
            if bad {
                return Err(CliError::Parse {
                    file: self.file.clone(),
                    row: self.records[k].0,
                    message: format!("timestamp {} not after {}", times[k], times[k - 1]),
                });
            }
        }
        Ok(())
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn read_gyro(path: &Path) -> Result<Vec<GyroSample>, CliError> {
    let p = Parsed::read(path)?;
    let t = p.col("t")?;
    let w = p.cols(&names(&["wx", "wy", "wz"]))?;
    let out = (0..p.records.len())
        .map(|k| {
            Ok(GyroSample {
                t: p.value(k, t)?,
                omega: p.vec3(k, &w)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    p.check_sorted(&out.iter().map(|g| g.t).collect::<Vec<_>>(), true)?;
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: no gyro samples", path.display())));
    }
    Ok(out)
}

pub fn read_directions(path: &Path, id: usize, varying: bool) -> Result<Vec<DirectionMeasurement>, CliError> {
    let p = Parsed::read(path)?;
    let t = p.col("t")?;
    let y = p.cols(&names(&["yx", "yy", "yz"]))?;
    let d = if varying {
        Some(p.cols(&names(&["dx", "dy", "dz"]))?)
    } else {
        if p.has("dx") {
            log::warn!("{}: reference columns ignored for a fixed-reference sensor", path.display());
        }
        None
    };
    let out = (0..p.records.len())
        .map(|k| {
            Ok(DirectionMeasurement {
                t: p.value(k, t)?,
                sensor_id: id,
                y: p.vec3(k, &y)?,
                reference: match &d {
                    Some(c) => Some(p.vec3(k, c)?),
                    None => None,
                },
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    p.check_sorted(&out.iter().map(|m| m.t).collect::<Vec<_>>(), false)?;
    Ok(out)
}

/// Reads every configured sensor's file and merges them by time, ties by id.
pub fn read_all_directions(dir: &Path, sensors: &SensorSet) -> Result<Vec<DirectionMeasurement>, CliError> {
    let mut all = Vec::new();
    for s in sensors.sensors() {
        let path = dir_file(dir, s.id);
        if !path.exists() {
            return Err(CliError::Data(format!("missing {} for sensor {}", path.display(), s.id)));
        }
        all.extend(read_directions(&path, s.id, matches!(s.reference, Reference::TimeVarying))?);
    }
    all.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.sensor_id.cmp(&b.sensor_id)));
    Ok(all)
}

pub fn read_truth(path: &Path, n: usize) -> Result<Vec<GroundTruthSample>, CliError> {
    let p = Parsed::read(path)?;
    let t = p.col("t")?;
    let r = p.cols(&matrix_header("r"))?;
    let b = p.cols(&names(&["bx", "by", "bz"]))?;
    let c = (1..=n)
        .map(|i| p.cols(&matrix_header(&format!("c{i}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let out = (0..p.records.len())
        .map(|k| {
            Ok(GroundTruthSample {
                t: p.value(k, t)?,
                attitude: p.rotation(k, &r)?,
                bias: p.vec3(k, &b)?,
                omega_true: Vec3::zeros(),
                cal: c.iter().map(|cols| p.rotation(k, cols)).collect::<Result<_, _>>()?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    p.check_sorted(&out.iter().map(|s| s.t).collect::<Vec<_>>(), true)?;
    Ok(out)
}

const REPORT_KEYS: [&str; 2] = ["transient", "asymptotic"];

/// Key/value report of one filter's Monte-Carlo aggregate.
pub fn write_report(
    path: &Path,
    name: &str,
    report: &RmseReport,
    nees: Option<f64>,
    seconds: Option<f64>,
) -> Result<(), CliError> {
    let mut t = Table::new(["key", "value"]);
    t.push(vec!["filter".into(), name.into()]);
    t.push(vec!["runs".into(), report.runs.to_string()]);
    for (phase, s) in REPORT_KEYS.iter().zip([&report.transient, &report.asymptotic]) {
        t.push(vec![format!("{phase}_attitude_deg"), fmt(s.attitude_deg)]);
        t.push(vec![format!("{phase}_bias"), fmt(s.bias)]);
        for (i, c) in s.cal_deg.iter().enumerate() {
            t.push(vec![format!("{phase}_cal{}_deg", i + 1), fmt(*c)]);
        }
    }
    if let Some(v) = nees {
        t.push(vec!["nees_attitude".into(), fmt(v)]);
    }
    if let Some(v) = seconds {
        t.push(vec!["seconds".into(), fmt(v)]);
    }
    t.write(path)
}

pub struct LoadedReport {
    pub name: String,
    pub report: RmseReport,
    pub seconds: Option<f64>,
}

pub fn read_report(path: &Path) -> Result<LoadedReport, CliError> {
    let p = Parsed::read(path)?;
    let (kc, vc) = (p.col("key")?, p.col("value")?);
    let mut map = HashMap::new();
    let mut rows = HashMap::new();
    for (line, rec) in &p.records {
        let key = rec.get(kc).unwrap_or("").to_string();
        rows.insert(key.clone(), *line);
        map.insert(key, rec.get(vc).unwrap_or("").to_string());
    }
    let missing = |k: &str| CliError::Parse {
        file: p.file.clone(),
        row: 1,
        message: format!("missing key '{k}'"),
    };
    let num = |k: &str| -> Result<f64, CliError> {
        let raw = map.get(k).ok_or_else(|| missing(k))?;
        raw.parse().map_err(|_| CliError::Parse {
            file: p.file.clone(),
            row: rows[k],
            message: format!("key '{k}': invalid number '{raw}'"),
        })
    };
    let n_cal = (1..).take_while(|i| map.contains_key(&format!("transient_cal{i}_deg"))).count();
    let state = |phase: &str| -> Result<StateRmse, CliError> {
        Ok(StateRmse {
            attitude_deg: num(&format!("{phase}_attitude_deg"))?,
            bias: num(&format!("{phase}_bias"))?,
            cal_deg: (1..=n_cal)
                .map(|i| num(&format!("{phase}_cal{i}_deg")))
                .collect::<Result<_, _>>()?,
        })
    };
    Ok(LoadedReport {
        name: map.get("filter").cloned().ok_or_else(|| missing("filter"))?,
        report: RmseReport {
            runs: num("runs")? as usize,
            transient: state("transient")?,
            asymptotic: state("asymptotic")?,
        },
        seconds: map.contains_key("seconds").then(|| num("seconds")).transpose()?,
    })
}

pub fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), CliError> {
    let mut t = Table::new(header.iter().copied());
    for r in rows {
        t.push(r);
    }
    t.write(path)
}
