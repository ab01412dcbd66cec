//! CSV artifacts and the experiment manifest.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::CertifiedRow;
use crate::smoothing::CertifyOutcome;
use crate::theory::DecayReport;
use crate::training::EpochLog;

pub const CERTIFY_HEADER: [&str; 8] = ["idx", "label", "predicted", "radius", "p_lower", "correct", "abstain", "seconds"];
pub const TRAIN_LOG_HEADER: [&str; 5] = ["epoch", "loss_nat", "loss_mix", "lr", "seconds"];
pub const MIXRATIO_HEADER: [&str; 3] = ["idx", "lambda_star", "found"];
pub const ATTACK_HEADER: [&str; 4] = ["step", "distance_from_x", "J", "true_class_prob"];
pub const THEORY_HEADER: [&str; 6] = ["d", "k", "estimate", "std_error", "bound_C_over_d", "pass"];
pub const CONFIDENCE_HEADER: [&str; 3] = ["epsilon", "true_class", "max_off_class"];

fn writer<W: Write>(out: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Seconds column; zeroed in reference mode so reruns are byte-identical.
fn secs(s: f64, reference: bool) -> String {
    if reference {
        "0".into()
    } else {
        format!("{s:.6}")
    }
}

/// Abstentions are written with `predicted = -1` and an empty `p_lower`.
pub fn write_certification<W: Write>(out: W, rows: &[CertifiedRow], reference: bool) -> Result<()> {
    let mut w = writer(out, &CERTIFY_HEADER)?;
    for r in rows {
        let (pred, p_lower) = match r.outcome {
            CertifyOutcome::Certified {
                predicted_class, p_lower, ..
            } => (predicted_class.to_string(), format!("{p_lower:.12}")),
            CertifyOutcome::Abstain => ("-1".into(), String::new()),
        };
        w.write_record([
            r.idx.to_string(),
            r.label.to_string(),
            pred,
            format!("{:.6}", r.outcome.radius()),
            p_lower,
            bit(r.correct()).into(),
            bit(r.outcome.is_abstain()).into(),
            secs(r.seconds, reference),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(Error::Schema(format!(
            "expected columns {}, found {}",
            expected.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Schema(format!("bad {name} in row {:?}", rec.iter().collect::<Vec<_>>())))
}

pub fn read_certification<R: Read>(input: R) -> Result<Vec<CertifiedRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(rdr.headers()?, &CERTIFY_HEADER)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let abstain: u8 = field(&rec, 6, "abstain")?;
        let outcome = if abstain == 1 {
            CertifyOutcome::Abstain
        } else {
            CertifyOutcome::Certified {
                predicted_class: field(&rec, 2, "predicted")?,
                radius: field(&rec, 3, "radius")?,
                p_lower: field(&rec, 4, "p_lower")?,
            }
        };
        rows.push(CertifiedRow {
            idx: field(&rec, 0, "idx")?,
            label: field(&rec, 1, "label")?,
            outcome,
            seconds: field(&rec, 7, "seconds")?,
        });
    }
    Ok(rows)
}

pub fn write_training_log<W: Write>(out: W, log: &[EpochLog], reference: bool) -> Result<()> {
    let mut w = writer(out, &TRAIN_LOG_HEADER)?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.9}", e.loss_nat),
            format!("{:.9}", e.loss_mix),
            format!("{}", e.lr),
            secs(e.seconds, reference),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per model: `model`, `acr`, then one column per radius threshold.
pub struct MetricsRow {
    pub model: String,
    pub acr: f64,
    pub curve: Vec<f64>,
}

pub fn write_metrics<W: Write>(out: W, radii: &[f64], rows: &[MetricsRow]) -> Result<()> {
    let mut header = vec!["model".to_string(), "acr".to_string()];
    header.extend(radii.iter().map(|r| format!("r={r:.2}")));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.model.clone(), format!("{:.6}", row.acr)];
        rec.extend(row.curve.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mixratio<W: Write>(out: W, rows: &[(usize, Option<f64>)]) -> Result<()> {
    let mut w = writer(out, &MIXRATIO_HEADER)?;
    for (idx, lambda) in rows {
        w.write_record([
            idx.to_string(),
            lambda.map_or(String::new(), |l| format!("{l:.2}")),
            bit(lambda.is_some()).into(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct AttackRow {
    pub step: usize,
    pub distance_from_x: f64,
    pub objective: f64,
    pub true_class_prob: f64,
}

pub fn write_attack<W: Write>(out: W, rows: &[AttackRow]) -> Result<()> {
    let mut w = writer(out, &ATTACK_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{:.9}", r.distance_from_x),
            format!("{:.9}", r.objective),
            format!("{:.9}", r.true_class_prob),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_theory<W: Write>(out: W, report: &DecayReport) -> Result<()> {
    let mut w = writer(out, &THEORY_HEADER)?;
    for r in &report.rows {
        w.write_record([
            r.d.to_string(),
            format!("{:.9}", r.k),
            format!("{:.9}", r.estimate),
            format!("{:.9}", r.std_error),
            format!("{:.9}", r.bound_c_over_d),
            bit(r.pass).into(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_confidence<W: Write>(out: W, rows: &[crate::evaluation::ConfidenceRow]) -> Result<()> {
    let mut w = writer(out, &CONFIDENCE_HEADER)?;
    for r in rows {
        w.write_record([
            format!("{}", r.epsilon),
            format!("{:.6}", r.stats.true_class),
            format!("{:.6}", r.stats.max_off_class),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes with `f` into a freshly created file.
pub fn to_file(path: &Path, f: impl FnOnce(File) -> Result<()>) -> Result<()> {
    f(File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub command: String,
    pub version: String,
    /// The run configuration as TOML.
    pub config: String,
    pub artifacts: Vec<PathBuf>,
    pub timings: Vec<(String, f64)>,
    /// Free-form notes, e.g. the radius ceiling implied by `n`.
    pub notes: Vec<String>,
}

impl ExperimentManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        for a in &self.artifacts {
            if !a.exists() {
                return Err(Error::Schema(format!("manifest references missing artifact {}", a.display())));
            }
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
