//! Four-step STO/CFO refinement of a coarse hypothesis, then sync-word validation.
//!
//! Sign conventions: a window that starts `tau` samples after a symbol boundary
//! puts a dechirped upchirp at bin `tau + F` and a dechirped downchirp at bin
//! `F - tau`, where `F` is the CFO in bins. Hence
//! `tau = (s_up - s_down) / 2` and `F = (s_up + s_down) / 2`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::coarse_sync::{GridConfig, Hypothesis, TemplateBank};
use crate::css_core::{argmax, magnitudes, Direction, IqCapture, SpectralEngine, WindowMatrix, C64};
use crate::error::Result;
use crate::params::LoRaParams;
use crate::stats::{circular_mean, modified_zscore_outliers, wrap_angle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRegions {
    pub k_downchirp: Vec<i64>,
    pub k0: Vec<i64>,
    pub highres_half_span: f64,
    pub highres_resolution: usize,
    pub k_corr: Vec<i64>,
}

impl SearchRegions {
    pub fn new(params: &LoRaParams, cfg: &GridConfig) -> Self {
        let m = params.m() as f64;
        let fmax = params.f_max_bins();
        let lo = (-m / 8.0 - 2.0 * fmax).ceil() as i64;
        let hi = (-m / 8.0 + 2.0 * fmax).floor() as i64;
        let hw = cfg.template_half_width as i64;
        Self {
            k_downchirp: (lo..=hi).collect(),
            k0: (-2..=2).collect(),
            highres_half_span: 2.0,
            highres_resolution: 8,
            k_corr: (-hw..=hw).collect(),
        }
    }
}

/// Intermediate estimates kept for diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDebug {
    pub s_down_step1: f64,
    pub s_up_step2: f64,
    pub f_frac: f64,
    pub frac_cfo_skipped: bool,
    pub delta_frac: f64,
    pub s_up: f64,
    pub s_down: f64,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    pub start: f64,
    pub cfo_bins: f64,
    pub validated: bool,
    pub score: f64,
    pub debug: StepDebug,
}

/// Working estimate of frame start (Nyquist samples) and CFO (bins).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub start: f64,
    pub cfo: f64,
}

impl From<&Hypothesis> for Estimate {
    fn from(h: &Hypothesis) -> Self {
        Self { start: h.start_estimate, cfo: h.cfo_estimate }
    }
}

/// Realized window start on the capture's sample grid.
fn realized(start: f64, os: usize) -> f64 {
    if os <= 1 {
        start
    } else {
        (start * os as f64).round() / os as f64
    }
}

fn row_bins(engine: &mut SpectralEngine, w: &WindowMatrix, bins: &[i64]) -> Vec<Vec<C64>> {
    w.rows().map(|r| engine.dft_bins(r, bins)).collect()
}

fn min_magnitudes(rows: &[Vec<C64>]) -> Vec<f64> {
    let mut out = magnitudes(&rows[0]);
    for r in &rows[1..] {
        for (o, v) in out.iter_mut().zip(r) {
            *o = o.min(v.norm());
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct FineSync {
    pub params: LoRaParams,
    pub cfg: GridConfig,
    pub regions: SearchRegions,
    pub bank: TemplateBank,
}

impl FineSync {
    pub fn new(params: &LoRaParams, cfg: &GridConfig) -> Self {
        Self {
            params: params.clone(),
            cfg: cfg.clone(),
            regions: SearchRegions::new(params, cfg),
            bank: TemplateBank::new(params.m(), cfg),
        }
    }

    /// Step I: locate the downchirp peak an eighth of a symbol into the downchirp
    /// segment and resolve the integer STO/CFO ambiguity left by the coarse stage.
    pub fn step1_coarse_refine(
        &self,
        engine: &mut SpectralEngine,
        capture: &IqCapture,
        est: Estimate,
    ) -> Result<(Estimate, f64)> {
        let m = self.params.m() as f64;
        let np = self.params.n_preamble as f64;
        let w = engine.dechirp_block(capture, est.start + (np + 2.0) * m + m / 8.0, est.cfo, 2, Direction::Down)?;
        let rows = row_bins(engine, &w, &self.regions.k_downchirp);
        let z = min_magnitudes(&rows);
        let s_down = self.regions.k_downchirp[argmax(&z)] as f64;
        let s_up = m / 8.0;
        Ok((
            Estimate {
                start: est.start + m / 8.0 - (s_up - s_down) / 2.0,
                cfo: est.cfo + (s_up + s_down) / 2.0,
            },
            s_down,
        ))
    }

    /// Step II: fractional CFO from the phase advance of the preamble peak
    /// between consecutive upchirps. Returns the de-rotated preamble windows.
    pub fn step2_frac_cfo(
        &self,
        engine: &mut SpectralEngine,
        capture: &IqCapture,
        est: Estimate,
        debug: &mut StepDebug,
    ) -> Result<(Estimate, WindowMatrix, Vec<C64>)> {
        let np = self.params.n_preamble;
        let m = self.params.m();
        let mut w = engine.dechirp_block(capture, est.start, est.cfo, np, Direction::Up)?;
        let rows = row_bins(engine, &w, &self.regions.k0);
        let k = argmax(&min_magnitudes(&rows));
        debug.s_up_step2 = self.regions.k0[k] as f64;
        let x: Vec<C64> = rows.iter().map(|r| r[k]).collect();
        let diffs: Vec<f64> = x.windows(2).map(|p| (p[1] * p[0].conj()).arg()).collect();
        let center = circular_mean(&diffs);
        let dev: Vec<f64> = diffs.iter().map(|d| wrap_angle(d - center)).collect();
        let mask = modified_zscore_outliers(&dev, self.cfg.mad_sigma);
        let inliers: Vec<f64> = diffs.iter().zip(&mask).filter(|(_, &o)| !o).map(|(&d, _)| d).collect();
        let f_frac = if inliers.len() >= 2 {
            circular_mean(&inliers) / TAU
        } else {
            debug.frac_cfo_skipped = true;
            0.0
        };
        debug.f_frac = f_frac;
        for i in 0..np {
            let row = &mut w.data[i * m..(i + 1) * m];
            for (n, v) in row.iter_mut().enumerate() {
                *v *= C64::from_polar(1.0, -TAU * f_frac * (i * m + n) as f64 / m as f64);
            }
        }
        w.freq += f_frac;
        let x = x
            .iter()
            .enumerate()
            .map(|(i, v)| v * C64::from_polar(1.0, -TAU * f_frac * i as f64))
            .collect();
        Ok((Estimate { start: est.start, cfo: est.cfo + f_frac }, w, x))
    }

    /// Step III: fractional STO from the zoomed spectrum of the coherently summed
    /// preamble. One bin of shift corresponds to one Nyquist sample.
    pub fn step3_frac_sto(
        &self,
        engine: &mut SpectralEngine,
        est: Estimate,
        derotated: &WindowMatrix,
        os: usize,
        debug: &mut StepDebug,
    ) -> Estimate {
        let sum = derotated.coherent_sum();
        let z = engine.zoom_dft(&sum, 0.0, self.regions.highres_half_span, self.regions.highres_resolution);
        let delta = z.freqs[z.argmax()];
        debug.delta_frac = delta;
        Estimate { start: realized(est.start, os) - delta, cfo: est.cfo }
    }

    /// Step IV: integer residuals from coherent sums over the preamble and the
    /// downchirps. Returns the corrected estimate and the preamble windows used.
    pub fn step4_residual(
        &self,
        engine: &mut SpectralEngine,
        capture: &IqCapture,
        est: Estimate,
        debug: &mut StepDebug,
    ) -> Result<(Estimate, WindowMatrix)> {
        let m = self.params.m() as f64;
        let np = self.params.n_preamble;
        let up = engine.dechirp_block(capture, est.start, est.cfo, np, Direction::Up)?;
        let down = engine.dechirp_block(capture, est.start + (np as f64 + 2.0) * m, est.cfo, 2, Direction::Down)?;
        let k0 = &self.regions.k0;
        let su = engine.dft_bins(&up.coherent_sum(), k0);
        let sd = engine.dft_bins(&down.coherent_sum(), k0);
        let s_up = k0[argmax(&magnitudes(&su))] as f64;
        let s_down = k0[argmax(&magnitudes(&sd))] as f64;
        debug.s_up = s_up;
        debug.s_down = s_down;
        let sto = (s_up - s_down) / 2.0;
        let cfo = (s_up + s_down) / 2.0;
        Ok((Estimate { start: est.start - sto, cfo: est.cfo + cfo }, up))
    }

    /// Sync-word check: the two sync windows, rotated by their symbol values, are
    /// intersected with the preamble windows and the segment around bin 0 is
    /// correlated against the template bank.
    pub fn validate_sync_word(
        &self,
        engine: &mut SpectralEngine,
        capture: &IqCapture,
        est: Estimate,
        preamble: Option<&WindowMatrix>,
    ) -> Result<f64> {
        let m = self.params.m() as f64;
        let np = self.params.n_preamble;
        let owned;
        let pre = match preamble {
            Some(w) => w,
            _ => {
                owned = engine.dechirp_block(capture, est.start, est.cfo, np, Direction::Up)?;
                &owned
            }
        };
        let sync = engine.dechirp_block(capture, est.start + np as f64 * m, est.cfo, 2, Direction::Up)?;
        let kc = &self.regions.k_corr;
        let mut rows = row_bins(engine, pre, kc);
        let sw = [self.params.sync_word.0 as i64, self.params.sync_word.1 as i64];
        for (i, r) in sync.rows().enumerate() {
            let bins: Vec<i64> = kc.iter().map(|k| k + sw[i]).collect();
            rows.push(engine.dft_bins(r, &bins));
        }
        Ok(self.bank.score(&min_magnitudes(&rows)))
    }

    fn run(&self, engine: &mut SpectralEngine, capture: &IqCapture, h: &Hypothesis, debug: &mut StepDebug) -> Result<(Estimate, f64)> {
        let (est, s_down) = self.step1_coarse_refine(engine, capture, h.into())?;
        debug.s_down_step1 = s_down;
        let (est, derotated, _) = self.step2_frac_cfo(engine, capture, est, debug)?;
        let est = self.step3_frac_sto(engine, est, &derotated, capture.oversampling, debug);
        let (est, _) = self.step4_residual(engine, capture, est, debug)?;
        let score = self.validate_sync_word(engine, capture, est, None)?;
        Ok((est, score))
    }

    /// Steps I-IV followed by sync-word validation. Errors (windows leaving the
    /// capture) yield an unvalidated result carrying the diagnostic.
    pub fn fine_synchronize(&self, engine: &mut SpectralEngine, capture: &IqCapture, h: &Hypothesis) -> SyncResult {
        let mut debug = StepDebug::default();
        match self.run(engine, capture, h, &mut debug) {
            Ok((est, score)) => {
                let cfo_ok = est.cfo.abs() <= 2.0 * self.params.f_max_bins();
                if !cfo_ok {
                    debug.diagnostic = Some("CFO estimate outside the admissible range".into());
                }
                SyncResult {
                    start: est.start,
                    cfo_bins: est.cfo,
                    validated: cfo_ok && score >= self.cfg.corr_threshold,
                    score,
                    debug,
                }
            }
            Err(e) => {
                debug.diagnostic = Some(e.to_string());
                SyncResult {
                    start: h.start_estimate,
                    cfo_bins: h.cfo_estimate,
                    validated: false,
                    score: 0.0,
                    debug,
                }
            }
        }
    }
}
