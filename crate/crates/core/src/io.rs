//! File formats: interleaved little-endian `f32` IQ with a JSON sidecar, JSONL
//! records and CSV tables. All writers go through a temp file and a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel_sim::{GroundTruth, SweepRow, TruthFrame};
use crate::coarse_sync::Hypothesis;
use crate::css_core::{IqCapture, C64};
use crate::error::{Error, Result};
use crate::fine_sync::SyncResult;
use crate::params::LoRaParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqMeta {
    pub sample_rate_hz: f64,
    pub bandwidth_hz: f64,
    pub sf: u32,
    pub oversampling: usize,
}

impl IqMeta {
    pub fn from_params(p: &LoRaParams) -> Self {
        Self { sample_rate_hz: p.sample_rate_hz(), bandwidth_hz: p.bandwidth_hz, sf: p.sf, oversampling: p.oversampling }
    }
}

pub fn sidecar_path(iq: &Path) -> PathBuf {
    let mut s = iq.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `bytes` to `path` via a sibling temp file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn encode_iq(samples: &[C64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        out.extend_from_slice(&(s.re as f32).to_le_bytes());
        out.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_iq(bytes: &[u8]) -> Result<Vec<C64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("IQ byte length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            C64::new(re as f64, im as f64)
        })
        .collect())
}

pub fn write_iq(path: &Path, capture: &IqCapture, meta: &IqMeta) -> Result<()> {
    atomic_write(path, &encode_iq(&capture.samples))?;
    write_json(&sidecar_path(path), meta)
}

/// Read an IQ file and its sidecar.
pub fn read_iq(path: &Path) -> Result<(IqCapture, IqMeta)> {
    let meta: IqMeta = read_json(&sidecar_path(path))?;
    if meta.oversampling == 0 {
        return Err(Error::Format("oversampling must be positive".into()));
    }
    let samples = decode_iq(&fs::read(path)?)?;
    Ok((IqCapture::new(samples, meta.oversampling), meta))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    atomic_write(path, to_jsonl(records)?.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub start: f64,
    pub cfo_bins: f64,
    pub score: f64,
}

impl From<&Hypothesis> for HypothesisRecord {
    fn from(h: &Hypothesis) -> Self {
        Self { start: h.start_estimate, cfo_bins: h.cfo_estimate, score: h.score }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub start_samples: f64,
    pub cfo_bins: f64,
    pub validated: bool,
    pub score: f64,
}

impl From<&SyncResult> for ResultRecord {
    fn from(r: &SyncResult) -> Self {
        Self { start_samples: r.start, cfo_bins: r.cfo_bins, validated: r.validated, score: r.score }
    }
}

pub fn write_hypotheses(path: &Path, hyps: &[Hypothesis]) -> Result<()> {
    write_jsonl(path, &hyps.iter().map(HypothesisRecord::from).collect::<Vec<_>>())
}

pub fn write_results(path: &Path, results: &[SyncResult]) -> Result<()> {
    write_jsonl(path, &results.iter().map(ResultRecord::from).collect::<Vec<_>>())
}

pub fn write_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    write_jsonl(path, &truth.frames)
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    Ok(GroundTruth { frames: read_jsonl::<TruthFrame>(path)? })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    read_jsonl(path)
}

/// CSV with a header row; fields must not contain commas.
pub fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    atomic_write(path, to_csv(header, rows).as_bytes())
}

pub fn sweep_csv(axis_name: &str, rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.axis),
                format!("{:.6}", r.value),
                format!("{:.6}", r.ci_low),
                format!("{:.6}", r.ci_high),
                r.successes.to_string(),
                r.trials.to_string(),
            ]
        })
        .collect();
    to_csv(&[axis_name, "value", "ci_low", "ci_high", "successes", "trials"], &body)
}
