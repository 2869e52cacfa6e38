//! Trace files: JSON Lines with one header line then one record per line.
//! Floats are 32-bit and serialized as shortest round-trip decimals, so a
//! write/read cycle is bit-exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use apd_core::trace::{CandidateLayout, Provenance, TraceData, TraceHeader, TraceRecord};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Serialize, Deserialize)]
struct LayoutJson {
    n_top: usize,
    n_mid: usize,
    n_tail: usize,
    mid_band_end: usize,
}

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    version: u32,
    family_hash: u64,
    n_models: usize,
    log_sizes: Vec<f64>,
    layout: LayoutJson,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    ctx_id: u64,
    ctx: Vec<u32>,
    cands: Vec<u32>,
    prov: Vec<String>,
    probs: Vec<Vec<f32>>,
    l_alm: Vec<f32>,
    l_elm: Vec<f32>,
}

fn prov_str(p: Provenance) -> &'static str {
    match p {
        Provenance::Top => "top",
        Provenance::Mid => "mid",
        Provenance::Tail => "tail",
    }
}

fn prov_parse(s: &str) -> Option<Provenance> {
    match s {
        "top" => Some(Provenance::Top),
        "mid" => Some(Provenance::Mid),
        "tail" => Some(Provenance::Tail),
        _ => None,
    }
}

pub fn write_traces(path: &Path, data: &TraceData) -> Result<()> {
    let file = fs::File::create(path).map_err(LabError::io(path))?;
    let mut out = BufWriter::new(file);
    let h = &data.header;
    let header = HeaderJson {
        version: h.version,
        family_hash: h.family_hash,
        n_models: h.n_models,
        log_sizes: h.log_sizes.clone(),
        layout: LayoutJson {
            n_top: h.layout.n_top,
            n_mid: h.layout.n_mid,
            n_tail: h.layout.n_tail,
            mid_band_end: h.layout.mid_band_end,
        },
        seed: h.seed,
    };
    let io_err = |e: std::io::Error| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let json_err = |e: serde_json::Error| LabError::Config(format!("trace serialization: {e}"));
    serde_json::to_writer(&mut out, &header).map_err(json_err)?;
    out.write_all(b"\n").map_err(io_err)?;
    for r in &data.records {
        let row = RecordJson {
            ctx_id: r.ctx_id,
            ctx: r.ctx.clone(),
            cands: r.cands.clone(),
            prov: r.prov.iter().map(|&p| prov_str(p).to_string()).collect(),
            probs: r.probs.clone(),
            l_alm: r.l_alm.clone(),
            l_elm: r.l_elm.clone(),
        };
        serde_json::to_writer(&mut out, &row).map_err(json_err)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read a trace file and re-validate its structural invariants. Parse
/// failures (including truncation mid-record) report the 1-based line and
/// the byte offset where that line starts.
pub fn read_traces(path: &Path) -> Result<TraceData> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    let malformed = |line: usize, offset: u64, msg: String| LabError::Malformed {
        path: path.to_path_buf(),
        line,
        offset,
        msg,
    };

    let mut records = Vec::new();
    let mut header: Option<TraceHeader> = None;
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len() as u64;
        let trimmed = line.trim_end_matches('\n').trim_end_matches('\r');
        if trimmed.is_empty() {
            continue;
        }
        if header.is_none() {
            let h: HeaderJson = serde_json::from_str(trimmed)
                .map_err(|e| malformed(i + 1, start, format!("bad header: {e}")))?;
            header = Some(TraceHeader {
                version: h.version,
                family_hash: h.family_hash,
                n_models: h.n_models,
                log_sizes: h.log_sizes,
                layout: CandidateLayout {
                    n_top: h.layout.n_top,
                    n_mid: h.layout.n_mid,
                    n_tail: h.layout.n_tail,
                    mid_band_end: h.layout.mid_band_end,
                },
                seed: h.seed,
            });
            continue;
        }
        let row: RecordJson = serde_json::from_str(trimmed)
            .map_err(|e| malformed(i + 1, start, format!("bad record: {e}")))?;
        let mut prov = Vec::with_capacity(row.prov.len());
        for p in &row.prov {
            prov.push(prov_parse(p).ok_or_else(|| {
                malformed(i + 1, start, format!("unknown provenance tag {p:?}"))
            })?);
        }
        records.push(TraceRecord {
            ctx_id: row.ctx_id,
            ctx: row.ctx,
            cands: row.cands,
            prov,
            probs: row.probs,
            l_alm: row.l_alm,
            l_elm: row.l_elm,
        });
    }
    let header = header.ok_or_else(|| malformed(1, 0, "empty trace file (no header)".into()))?;
    let data = TraceData { header, records };
    data.validate()?;
    Ok(data)
}
