//! Sweeps over OB, wavelength, time or splitter port, and their CSV form.

use super::presets::Scenario;
use super::{run_point, worker_pool, PointSeeds, RunError, DEFAULT_SYMBOLS};
use crate::odn_model::{drift_step, LAMBDA_REF_NM};
use crate::postproc::TrialReport;
use crate::rng::{derive_seed, seeded};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Version tag of the CSV layout; bump when columns change.
pub const CSV_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 22] = [
    "point",
    "value",
    "lambda_nm",
    "ob_db",
    "port",
    "time_s",
    "link_loss_db",
    "raw_key_rate",
    "raw_rate_ad",
    "raw_rate_rl",
    "sifted_rate",
    "qber",
    "qber_ad",
    "qber_rl",
    "qber_ci_low",
    "qber_ci_high",
    "secure_rate",
    "sifted_bits",
    "errors",
    "duration_s",
    "qber_valid",
    "error",
];

const DRIFT_STREAM: u64 = 0xD21F7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    /// Attenuation at Bob's input, dB.
    Ob,
    /// Detuning from the reference wavelength, pm.
    Wavelength,
    /// Elapsed time, s; the network drifts between points.
    Time,
    /// Splitter output port, 0-based.
    Port,
}

impl std::str::FromStr for SweepKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ob" => Ok(Self::Ob),
            "wavelength" => Ok(Self::Wavelength),
            "time" => Ok(Self::Time),
            "port" => Ok(Self::Port),
            other => Err(format!("unknown sweep kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub from: f64,
    pub to: f64,
    pub step: f64,
    #[serde(default = "one")]
    pub trials: u32,
    #[serde(default = "default_symbols")]
    pub symbols: u64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> u32 {
    1
}
fn default_symbols() -> u64 {
    DEFAULT_SYMBOLS
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), RunError> {
        if !(self.step > 0.0) {
            return Err(RunError::Config("step must be > 0".into()));
        }
        if self.trials < 1 {
            return Err(RunError::Config("trials must be >= 1".into()));
        }
        if !(self.to >= self.from) {
            return Err(RunError::Config("sweep range is empty".into()));
        }
        Ok(())
    }

    /// Sweep values from `from` to `to` inclusive.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.to - self.from) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.from + k as f64 * self.step).collect()
    }
}

/// Fixed operating point that the sweep variable departs from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasePoint {
    pub lambda_nm: f64,
    pub ob_db: f64,
}

impl Default for BasePoint {
    fn default() -> Self {
        Self {
            lambda_nm: LAMBDA_REF_NM,
            ob_db: 0.0,
        }
    }
}

/// Complete description of a run; replaying it reproduces the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub scenario: Scenario,
    pub coexist: bool,
    #[serde(default)]
    pub base: BasePoint,
    pub sweep: SweepSpec,
}

impl RunManifest {
    pub fn new(scenario: Scenario, coexist: bool, sweep: SweepSpec) -> Self {
        Self {
            software_version: env!("CARGO_PKG_VERSION").into(),
            scenario,
            coexist,
            base: BasePoint::default(),
            sweep,
        }
    }

    pub fn from_toml(s: &str) -> Result<Self, RunError> {
        toml::from_str(s).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: usize,
    pub value: f64,
    pub lambda_nm: f64,
    pub ob_db: f64,
    pub port: usize,
    pub time_s: f64,
    pub link_loss_db: f64,
    pub report: TrialReport,
}

/// Runs every point of a manifest. Points run concurrently except for TIME
/// sweeps, whose drift state is carried from one point to the next; rows
/// come back in sweep order and a failing point is recorded in its row.
pub fn run_sweep(m: &RunManifest) -> Result<Vec<SweepRow>, RunError> {
    m.sweep.validate()?;
    let values = m.sweep.values();
    let scenarios: Vec<(Scenario, f64)> = match m.sweep.kind {
        SweepKind::Time => {
            let mut rng = seeded(derive_seed(m.sweep.seed, DRIFT_STREAM));
            let mut s = m.scenario.clone();
            let mut out = Vec::with_capacity(values.len());
            let mut t_prev = values[0];
            for (i, &t) in values.iter().enumerate() {
                if i > 0 {
                    s.topology = drift_step(&s.topology, &s.drift, t - t_prev, &mut rng)?;
                }
                t_prev = t;
                out.push((s.clone(), t));
            }
            out
        }
        _ => values.iter().map(|&v| (m.scenario.clone(), v)).collect(),
    };

    let run = |(i, (scenario, value)): (usize, &(Scenario, f64))| -> SweepRow {
        let mut s = scenario.clone();
        let mut lambda = m.base.lambda_nm;
        let mut ob = m.base.ob_db;
        let mut time_s = 0.0;
        match m.sweep.kind {
            SweepKind::Ob => ob = *value,
            SweepKind::Wavelength => lambda = m.base.lambda_nm + value / 1000.0,
            SweepKind::Time => time_s = *value,
            SweepKind::Port => s.topology.selected_port = value.round().max(0.0) as usize,
        }
        let port = s.topology.selected_port;
        let mut reports = Vec::with_capacity(m.sweep.trials as usize);
        let mut failure = None;
        for trial in 0..m.sweep.trials {
            let seeds = PointSeeds::derive(m.sweep.seed, i as u64, trial as u64);
            match run_point(&s, lambda, ob, m.coexist, seeds, m.sweep.symbols) {
                Ok(r) => reports.push(r),
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let link_loss_db = s
            .link(lambda, ob.max(0.0), m.coexist)
            .map(|l| l.link_loss_db)
            .unwrap_or(f64::NAN);
        let report = match (failure, TrialReport::merge(&reports, s.postproc.f_ec)) {
            (None, Some(r)) => r,
            (f, _) => {
                let msg = f.unwrap_or_else(|| "no trials".into());
                let mut r = TrialReport::failed(
                    0.0,
                    [0; 4],
                    &crate::postproc::PostprocError::InvalidArgument(msg.clone()),
                );
                r.error = Some(msg);
                r
            }
        };
        SweepRow {
            point: i,
            value: *value,
            lambda_nm: lambda,
            ob_db: ob,
            port,
            time_s,
            link_loss_db,
            report: TrialReport { ob_db: ob, ..report },
        }
    };

    let indexed: Vec<(usize, &(Scenario, f64))> = scenarios.iter().enumerate().collect();
    Ok(worker_pool().install(|| indexed.into_par_iter().map(run).collect()))
}

/// Writes rows with a versioned header comment naming the columns.
pub fn write_csv<W: Write>(rows: &[SweepRow], m: &RunManifest, mut w: W) -> Result<(), RunError> {
    writeln!(
        w,
        "# swqkd-sweep v{CSV_VERSION} scenario={} sweep={:?} coexist={} seed={} columns={}",
        m.scenario.label,
        m.sweep.kind,
        m.coexist,
        m.sweep.seed,
        CSV_COLUMNS.join(";")
    )?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in rows {
        let p = &r.report;
        out.write_record([
            r.point.to_string(),
            r.value.to_string(),
            r.lambda_nm.to_string(),
            r.ob_db.to_string(),
            r.port.to_string(),
            r.time_s.to_string(),
            r.link_loss_db.to_string(),
            p.raw_key_rate.to_string(),
            p.raw_rate_per_basis[0].to_string(),
            p.raw_rate_per_basis[1].to_string(),
            p.sifted_rate.to_string(),
            p.qber.to_string(),
            p.qber_per_basis[0].to_string(),
            p.qber_per_basis[1].to_string(),
            p.qber_ci95.0.to_string(),
            p.qber_ci95.1.to_string(),
            p.secure_rate.to_string(),
            p.sifted_bits.to_string(),
            p.errors.to_string(),
            p.duration_s.to_string(),
            p.qber_valid.to_string(),
            p.error.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Convenience: the CSV text of a manifest.
pub fn sweep_csv(m: &RunManifest) -> Result<String, RunError> {
    let rows = run_sweep(m)?;
    let mut buf = Vec::new();
    write_csv(&rows, m, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::presets::{preset, ModelParams};

    fn spec(kind: SweepKind, from: f64, to: f64, step: f64) -> SweepSpec {
        SweepSpec {
            kind,
            from,
            to,
            step,
            trials: 1,
            symbols: 2_000_000,
            seed: 9,
        }
    }

    #[test]
    fn values_are_inclusive() {
        let s = spec(SweepKind::Ob, 0.0, 30.0, 5.0);
        assert_eq!(s.values(), vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]);
        assert!(spec(SweepKind::Ob, 0.0, 1.0, 0.0).validate().is_err());
        assert!(SweepSpec { trials: 0, ..spec(SweepKind::Ob, 0.0, 1.0, 1.0) }.validate().is_err());
    }

    #[test]
    fn kind_parses() {
        assert_eq!("OB".parse::<SweepKind>().unwrap(), SweepKind::Ob);
        assert!("phase".parse::<SweepKind>().is_err());
    }

    #[test]
    fn manifest_roundtrips() {
        let m = RunManifest::new(
            preset(3, &ModelParams::default()).unwrap(),
            true,
            spec(SweepKind::Port, 0.0, 3.0, 1.0),
        );
        assert_eq!(RunManifest::from_toml(&m.to_toml()).unwrap(), m);
    }

    #[test]
    fn port_sweep_changes_only_the_port() {
        let m = RunManifest::new(
            preset(3, &ModelParams::default()).unwrap(),
            false,
            spec(SweepKind::Port, 0.0, 3.0, 1.0),
        );
        let rows = run_sweep(&m).unwrap();
        assert_eq!(rows.len(), 4);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.port, i);
            assert_eq!(r.lambda_nm, LAMBDA_REF_NM);
            assert_eq!(r.ob_db, 0.0);
            assert_eq!(r.link_loss_db, rows[0].link_loss_db);
        }
    }

    #[test]
    fn bad_point_is_recorded_and_sweep_continues() {
        let bright = ModelParams {
            splitter_excess_db: 1.0,
            ..ModelParams::default()
        };
        let mut m = RunManifest::new(
            preset(3, &bright).unwrap(),
            false,
            spec(SweepKind::Port, 2.0, 5.0, 1.0),
        );
        m.sweep.symbols = 1_000_000;
        let rows = run_sweep(&m).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[0].report.error.is_none());
        assert!(rows[3].report.error.as_deref().unwrap().contains("port"));
    }
}
