//! Machine-first result files: metric reports and a best-of summary as
//! JSON, training losses as CSV, per-token curve fits and generations as
//! JSON Lines, and optional x/y series for external plotting.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use apd_core::energy::TrainStep;
use apd_core::eval::GridPoint;
use serde::Serialize;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub inv_t: f64,
    pub perplexity: f64,
    pub accuracy: f64,
    pub mrr: f64,
}

/// Per-source report: the full strength sweep plus the best point by
/// perplexity. `metrics` names the families the caller asked for; rows
/// always carry every number (selection is a reporting concern, the
/// arithmetic is cheap).
#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub source: String,
    pub metrics: Vec<String>,
    pub mrr_granularity: String,
    pub n_items: usize,
    pub n_ppl_items: usize,
    pub n_acc_items: usize,
    pub grid: Vec<GridRow>,
    pub best: GridRow,
}

impl MethodReport {
    pub fn new(
        source: &str,
        metrics: &[String],
        mrr_granularity: &str,
        counts: (usize, usize, usize),
        points: &[GridPoint],
    ) -> Result<MethodReport> {
        let token_mrr = mrr_granularity == "token";
        let rows: Vec<GridRow> = points
            .iter()
            .map(|p| GridRow {
                inv_t: p.inv_t,
                perplexity: p.perplexity,
                accuracy: p.accuracy,
                mrr: if token_mrr { p.mrr_token } else { p.mrr_option },
            })
            .collect();
        let best = rows
            .iter()
            .filter(|r| r.perplexity.is_finite())
            .min_by(|a, b| a.perplexity.partial_cmp(&b.perplexity).unwrap())
            .cloned()
            .ok_or(LabError::Core(apd_core::Error::NonFinite(
                "every grid point's perplexity",
            )))?;
        Ok(MethodReport {
            source: source.to_string(),
            metrics: metrics.to_vec(),
            mrr_granularity: mrr_granularity.to_string(),
            n_items: counts.0,
            n_ppl_items: counts.1,
            n_acc_items: counts.2,
            grid: rows,
            best,
        })
    }
}

/// The cross-source summary: best grid point per source, sorted as given,
/// plus diversity numbers when a generations file is on hand.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub best: Vec<SummaryRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub generations: Vec<GenStats>,
}

/// Diversity of one source's sampled continuations: distinct n-gram shares
/// and the share of sequences with a 4-gram repeated three or more times.
#[derive(Debug, Clone, Serialize)]
pub struct GenStats {
    pub source: String,
    pub n_seqs: usize,
    pub dist1: f64,
    pub dist2: f64,
    pub rep: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub source: String,
    pub inv_t: f64,
    pub perplexity: f64,
    pub accuracy: f64,
    pub mrr: f64,
}

pub fn write_json(path: &Path, doc: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)
        .map_err(|e| LabError::Config(format!("report serialization: {e}")))?;
    fs::write(path, text).map_err(LabError::io(path))
}

/// One CSV row per optimizer step.
pub fn write_loss_csv(path: &Path, steps: &[TrainStep]) -> Result<()> {
    let file = fs::File::create(path).map_err(LabError::io(path))?;
    let mut out = BufWriter::new(file);
    let werr = |e: std::io::Error| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    writeln!(out, "step,epoch,l1,l2,l3,total,lr").map_err(werr)?;
    for s in steps {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.step, s.epoch, s.l1, s.l2, s.l3, s.total, s.lr
        )
        .map_err(werr)?;
    }
    out.flush().map_err(werr)
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub ctx_id: u64,
    pub token: u32,
    pub family: &'static str,
    pub ap: f64,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub flipped: bool,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct GenerationRow {
    pub prompt: String,
    pub source: String,
    pub method: String,
    pub temperature: f64,
    pub texts: Vec<String>,
    pub tokens: Vec<Vec<u32>>,
}

/// Append-style JSONL writer shared by the curve dump and generations.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(LabError::io(path))?;
    let mut out = BufWriter::new(file);
    let werr = |e: std::io::Error| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    for row in rows {
        serde_json::to_writer(&mut out, row)
            .map_err(|e| LabError::Config(format!("row serialization: {e}")))?;
        out.write_all(b"\n").map_err(werr)?;
    }
    out.flush().map_err(werr)
}

/// x/y series as two-column CSV for external plotting.
pub fn write_series_csv(path: &Path, x_name: &str, y_name: &str, rows: &[(f64, f64)]) -> Result<()> {
    let file = fs::File::create(path).map_err(LabError::io(path))?;
    let mut out = BufWriter::new(file);
    let werr = |e: std::io::Error| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    writeln!(out, "{x_name},{y_name}").map_err(werr)?;
    for (x, y) in rows {
        writeln!(out, "{x},{y}").map_err(werr)?;
    }
    out.flush().map_err(werr)
}
