//! Writes a [`RunOutcome`] to disk as JSON, CSV tables and plot-ready data.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::RunOutcome;
use crate::attention::{modality_shares, RowShare};
use crate::canonical::to_canonical_string;
use crate::sms::Condition;

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("unknown output format {0:?} (expected json, csv or plotdata)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    PlotData,
}

impl FromStr for Format {
    type Err = EmitError;
    fn from_str(s: &str) -> Result<Self, EmitError> {
        match s.trim() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "plotdata" => Ok(Format::PlotData),
            other => Err(EmitError::UnknownFormat(other.to_string())),
        }
    }
}

impl Format {
    /// Parses a comma-separated list such as `json,csv`.
    pub fn parse_list(s: &str) -> Result<Vec<Format>, EmitError> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Table {
    path: PathBuf,
    w: csv::Writer<fs::File>,
}

impl Table {
    fn create(path: PathBuf, header: &[&str]) -> Result<Table, EmitError> {
        let mut w = csv::Writer::from_path(&path).map_err(|source| EmitError::Csv {
            path: path.clone(),
            source,
        })?;
        w.write_record(header).map_err(|source| EmitError::Csv {
            path: path.clone(),
            source,
        })?;
        Ok(Table { path, w })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<(), EmitError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(fields).map_err(|source| EmitError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    fn finish(mut self) -> Result<PathBuf, EmitError> {
        self.w.flush().map_err(|source| EmitError::Io {
            path: self.path.clone(),
            source,
        })?;
        Ok(self.path)
    }
}

fn write_file(path: PathBuf, body: &str) -> Result<PathBuf, EmitError> {
    fs::write(&path, body).map_err(|source| EmitError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn mkdir(path: &Path) -> Result<(), EmitError> {
    fs::create_dir_all(path).map_err(|source| EmitError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the requested formats under `out_dir` and returns the files created.
pub fn emit(outcome: &RunOutcome, out_dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>, EmitError> {
    mkdir(out_dir)?;
    let mut written = Vec::new();
    if formats.contains(&Format::Json) {
        written.push(write_file(out_dir.join("report.json"), &outcome.report.to_json())?);
    }
    if formats.contains(&Format::Csv) {
        written.extend(emit_csv(outcome, out_dir)?);
    }
    if formats.contains(&Format::PlotData) {
        let dir = out_dir.join("plotdata");
        mkdir(&dir)?;
        written.extend(emit_plotdata(outcome, &dir)?);
    }
    Ok(written)
}

fn emit_csv(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>, EmitError> {
    let r = &outcome.report;
    let mut out = Vec::new();

    let mut t = Table::create(
        dir.join("metrics.csv"),
        &[
            "condition", "n", "accuracy", "precision", "recall", "f1", "unparseable", "nfr_paper", "nfr_conditional",
        ],
    )?;
    for (c, cr) in &r.conditions {
        let m = &cr.metrics;
        let nfr = r.nfr.get(c);
        t.row([
            c.to_string(),
            m.n.to_string(),
            m.accuracy.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.unparseable.to_string(),
            opt(nfr.map(|x| x.nfr_paper)),
            opt(nfr.and_then(|x| x.nfr_conditional)),
        ])?;
    }
    out.push(t.finish()?);

    let mut t = Table::create(
        dir.join("nfr.csv"),
        &["condition", "n", "base_correct", "flipped", "nfr_paper", "nfr_conditional"],
    )?;
    for (c, x) in &r.nfr {
        t.row([
            c.to_string(),
            x.n.to_string(),
            x.base_correct.to_string(),
            x.flipped.to_string(),
            x.nfr_paper.to_string(),
            opt(x.nfr_conditional),
        ])?;
    }
    out.push(t.finish()?);

    let mut t = Table::create(
        dir.join("ece.csv"),
        &["condition", "n", "ece", "agreement", "first_token_ties"],
    )?;
    for (c, cr) in &r.conditions {
        t.row([
            c.to_string(),
            cr.calibration.n.to_string(),
            cr.calibration.ece.to_string(),
            opt(cr.agreement.rate),
            cr.first_token_ties.to_string(),
        ])?;
    }
    out.push(t.finish()?);

    let mut t = Table::create(
        dir.join("predictions.csv"),
        &[
            "condition", "sample_id", "label", "donor_id", "verdict", "p_yes", "confidence", "digest",
        ],
    )?;
    for p in &outcome.predictions {
        t.row([
            p.condition.to_string(),
            p.sample_id.clone(),
            p.label.as_u8().to_string(),
            p.donor_id.clone().unwrap_or_default(),
            format!("{:?}", p.answer.verdict).to_lowercase(),
            p.first_token.p_yes.to_string(),
            p.first_token.confidence.to_string(),
            p.digest.clone(),
        ])?;
    }
    out.push(t.finish()?);
    Ok(out)
}

fn emit_plotdata(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>, EmitError> {
    let r = &outcome.report;
    let mut out = Vec::new();

    let mut t = Table::create(dir.join("grouped_bars.csv"), &["metric", "condition", "value"])?;
    for (c, cr) in &r.conditions {
        let m = &cr.metrics;
        for (name, v) in [
            ("accuracy", m.accuracy),
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
        ] {
            t.row([name.to_string(), c.to_string(), v.to_string()])?;
        }
    }
    out.push(t.finish()?);

    for (c, cr) in &r.conditions {
        let mut t = Table::create(
            dir.join(format!("reliability_{c}.csv")),
            &["bin_lower", "bin_upper", "count", "conf", "acc"],
        )?;
        for b in &cr.calibration.bins {
            t.row([
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                opt(b.conf),
                opt(b.acc),
            ])?;
        }
        out.push(t.finish()?);
    }

    let with_attention: Vec<_> = outcome.predictions.iter().filter(|p| p.attention.is_some()).collect();
    if with_attention.is_empty() {
        return Ok(out);
    }
    let conditions: Vec<Condition> = r.conditions.keys().copied().collect();
    for c in conditions {
        let preds: Vec<_> = with_attention.iter().filter(|p| p.condition == c).collect();
        if preds.is_empty() {
            continue;
        }
        let mut t = Table::create(
            dir.join(format!("attention_{c}.csv")),
            &["sample_id", "t", "token", "text_share", "image_share", "degenerate"],
        )?;
        for p in preds {
            let bundle = p.attention.as_ref().expect("filtered");
            if bundle.validate().is_err() {
                continue;
            }
            for row in modality_shares(bundle) {
                let token = bundle.tokens.get(row.t()).cloned().unwrap_or_default();
                let (text, image, degenerate) = match &row {
                    RowShare::Defined(s) => (s.text_share.to_string(), s.image_share.to_string(), "false"),
                    RowShare::Degenerate { .. } => (String::new(), String::new(), "true"),
                };
                t.row([
                    p.sample_id.clone(),
                    row.t().to_string(),
                    token,
                    text,
                    image,
                    degenerate.to_string(),
                ])?;
            }
        }
        out.push(t.finish()?);
    }

    let mut lines = String::new();
    for p in &with_attention {
        let value = serde_json::json!({
            "condition": p.condition,
            "sample_id": p.sample_id,
            "attention": p.attention,
        });
        lines.push_str(&to_canonical_string(&value).expect("attention serializes"));
        lines.push('\n');
    }
    out.push(write_file(dir.join("attention_weights.jsonl"), &lines)?);
    Ok(out)
}
