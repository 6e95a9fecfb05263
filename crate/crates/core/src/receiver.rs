//! Streaming receiver: coarse detection every `M` samples, fine synchronization
//! of each new hypothesis, then removal of duplicate validated frames.

use serde::{Deserialize, Serialize};

use crate::coarse_sync::{CoarseStream, GridConfig, Hypothesis};
use crate::css_core::{FftCounter, IqCapture, SpectralEngine};
use crate::error::Result;
use crate::fine_sync::{FineSync, SyncResult};
use crate::params::LoRaParams;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DetectReport {
    pub hypotheses: Vec<Hypothesis>,
    /// Every fine-synchronization outcome, validated or not.
    pub refined: Vec<SyncResult>,
    /// Validated frames after duplicate removal, sorted by start.
    pub frames: Vec<SyncResult>,
    pub strides: usize,
    /// Distinct `M`-sample windows analysed by the coarse stage.
    pub windows: usize,
    pub coarse_counter: FftCounter,
    pub fine_counter: FftCounter,
}

impl DetectReport {
    pub fn full_ffts_per_window(&self) -> f64 {
        if self.windows == 0 {
            return 0.0;
        }
        self.coarse_counter.full_ffts as f64 / self.windows as f64
    }

    pub fn fft_equivalents_per_hypothesis(&self, m: usize) -> f64 {
        if self.refined.is_empty() {
            return 0.0;
        }
        self.fine_counter.fft_equivalents(m) / self.refined.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct Receiver {
    pub params: LoRaParams,
    pub cfg: GridConfig,
    pub fine: FineSync,
}

impl Receiver {
    pub fn new(params: &LoRaParams, cfg: &GridConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate(params)?;
        Ok(Self { params: params.clone(), cfg: cfg.clone(), fine: FineSync::new(params, cfg) })
    }

    /// Run the full pipeline over a capture.
    pub fn detect(&self, capture: &IqCapture) -> Result<DetectReport> {
        let m = self.params.m() as i64;
        let l = self.params.n_preamble as i64 - 1;
        let mut coarse = CoarseStream::new(&self.params, &self.cfg);
        let mut coarse_engine = SpectralEngine::for_params(&self.params);
        let mut fine_engine = SpectralEngine::for_params(&self.params);
        let mut report = DetectReport::default();
        let begin = capture.nyquist_begin().ceil() as i64;
        let end = capture.nyquist_end();
        let mut j = begin + l * m;
        // the last window ends at j + delta with delta < 1
        while (j + 1) as f64 <= end {
            let hyps = coarse.push(&mut coarse_engine, capture, j)?;
            report.strides += 1;
            for h in hyps {
                let dup = report.hypotheses.iter().any(|p| {
                    (p.start_estimate - h.start_estimate).abs() <= 1.0 && (p.cfo_estimate - h.cfo_estimate).abs() <= 1.0
                });
                if dup {
                    continue;
                }
                report.hypotheses.push(h);
                report.refined.push(self.fine.fine_synchronize(&mut fine_engine, capture, &h));
            }
            j += m;
        }
        if report.strides > 0 {
            report.windows = report.strides + l as usize - 1;
        }
        report.coarse_counter = coarse_engine.counter;
        report.fine_counter = fine_engine.counter;
        report.frames = dedup_results(&report.refined, m as f64 / 2.0, m as f64);
        Ok(report)
    }
}

/// Largest symbol lag at which a lower-scoring result is treated as a ghost.
const GHOST_LAGS: i64 = 4;

/// Validated results merged into the highest-scoring one they shadow: the same
/// start (within 2 samples), a start within `tol` that lies on the start/CFO
/// ambiguity line (equal and opposite shifts), or a ghost a whole number of
/// symbols (`m` samples each) away with nearly the same CFO.
pub fn dedup_results(results: &[SyncResult], tol: f64, m: f64) -> Vec<SyncResult> {
    let mut validated: Vec<&SyncResult> = results.iter().filter(|r| r.validated).collect();
    validated.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)));
    let mut kept: Vec<SyncResult> = Vec::new();
    for r in validated {
        let shadowed = kept.iter().any(|k| {
            let d = r.start - k.start;
            let dc = r.cfo_bins - k.cfo_bins;
            if d.abs() <= 2.0 || (d.abs() <= tol && (d + dc).abs() <= 2.0) {
                return true;
            }
            let lag = (d / m).round();
            lag != 0.0
                && lag.abs() <= GHOST_LAGS as f64
                && (d - lag * m).abs() <= 2.0
                && dc.abs() <= 1.5
        });
        if !shadowed {
            kept.push(r.clone());
        }
    }
    kept.sort_by(|a, b| a.start.total_cmp(&b.start));
    kept
}
