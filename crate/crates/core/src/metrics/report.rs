use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate, psnr_from_mse, FrameMetrics};
use crate::error::{Error, Result};
use crate::model::{count_params, estimate_flops, ModelConfig};
use crate::tensor::{Element, Tensor};

pub const CSV_COLUMNS: [&str; 11] = [
    "run_id", "variant", "layers", "params", "flops", "fps", "mse", "mae", "rmse", "ssim", "psnr",
];

/// One line of a report file. `fps` is empty for runs that were not timed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub variant: String,
    pub layers: usize,
    pub params: usize,
    pub flops: u64,
    pub fps: Option<f64>,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

impl ReportFormat {
    /// Picks JSON lines for `.jsonl`/`.json` paths, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => ReportFormat::JsonLines,
            _ => ReportFormat::Csv,
        }
    }
}

/// Short stable hash of a model config.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Evaluation results of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub variant: String,
    pub layers: usize,
    pub params: usize,
    pub flops: u64,
    pub fps: Option<f64>,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub per_frame: Vec<FrameMetrics>,
    pub fingerprint: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl MetricsReport {
    pub fn new<F: Element>(
        run_id: &str,
        cfg: &ModelConfig,
        pred: &Tensor<F>,
        target: &Tensor<F>,
        fps: Option<f64>,
    ) -> Result<Self> {
        let (m, ssim, per_frame) = evaluate(pred, target)?;
        Ok(Self {
            run_id: run_id.to_string(),
            variant: cfg.variant.kind.to_string(),
            layers: cfg.variant.layers,
            params: count_params(cfg),
            flops: estimate_flops(cfg),
            fps,
            mse: m.mse,
            mae: m.mae,
            rmse: m.rmse,
            ssim,
            psnr: psnr_from_mse(m.mse),
            per_frame,
            fingerprint: config_fingerprint(cfg),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    pub fn row(&self) -> ReportRow {
        ReportRow {
            run_id: self.run_id.clone(),
            variant: self.variant.clone(),
            layers: self.layers,
            params: self.params,
            flops: self.flops,
            fps: self.fps,
            mse: Some(self.mse),
            mae: Some(self.mae),
            rmse: Some(self.rmse),
            ssim: Some(self.ssim),
            psnr: Some(self.psnr),
        }
    }
}

/// Writes `rows` with a header (CSV) or one object per line (JSON lines).
pub fn emit_report(rows: &[ReportRow], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let file = File::create(path)?;
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(file);
            w.write_record(CSV_COLUMNS)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        ReportFormat::JsonLines => {
            let mut w = BufWriter::new(file);
            for r in rows {
                serde_json::to_writer(&mut w, r).map_err(|e| Error::Corrupt(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn parse_report(path: impl AsRef<Path>, format: ReportFormat) -> Result<Vec<ReportRow>> {
    let file = File::open(path)?;
    match format {
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(file);
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            if header != CSV_COLUMNS {
                return Err(Error::Corrupt(format!(
                    "unexpected report columns {header:?}"
                )));
            }
            r.deserialize()
                .map(|row| row.map_err(Error::from))
                .collect()
        }
        ReportFormat::JsonLines => BufReader::new(file)
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|line| serde_json::from_str(&line?).map_err(|e| Error::Corrupt(e.to_string())))
            .collect(),
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Corrupt(format!("{other:?}")),
            }
        } else {
            Error::Corrupt(e.to_string())
        }
    }
}
