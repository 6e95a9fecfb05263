//! Frame hypotheses from spectral intersection over a fractional (delay, frequency) grid.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::css_core::{Direction, IqCapture, SpectralEngine};
use crate::error::{Error, Result};
use crate::params::LoRaParams;
use crate::stats::{median, modified_zscore_outliers};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n_delta: usize,
    pub n_freq: usize,
    /// Max-to-median gate applied to each intersected spectrum.
    pub rho: f64,
    /// Modified Z-score threshold for peak prominences.
    pub mad_sigma: f64,
    pub corr_threshold: f64,
    pub template_half_width: usize,
    pub nms_width: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_delta: 2,
            n_freq: 2,
            rho: 5.0,
            mad_sigma: 3.5,
            corr_threshold: 0.7,
            template_half_width: 7,
            nms_width: 3,
        }
    }
}

impl GridConfig {
    pub fn with_grid(n_delta: usize, n_freq: usize) -> Self {
        Self { n_delta, n_freq, ..Self::default() }
    }

    /// Fractional delays `k / (2 N_delta)`.
    pub fn deltas(&self) -> Vec<f64> {
        (0..self.n_delta).map(|k| k as f64 / (2 * self.n_delta) as f64).collect()
    }

    /// Fractional frequency compensations `k / (2 N_f)` in bins.
    pub fn freqs(&self) -> Vec<f64> {
        (0..self.n_freq).map(|k| k as f64 / (2 * self.n_freq) as f64).collect()
    }

    pub fn grid_points(&self) -> Vec<(f64, f64)> {
        let fs = self.freqs();
        self.deltas().into_iter().flat_map(|d| fs.iter().map(move |&f| (d, f))).collect()
    }

    pub fn validate(&self, params: &LoRaParams) -> Result<()> {
        if self.n_delta == 0 || self.n_freq == 0 {
            return Err(Error::Domain("grid sizes must be at least 1".into()));
        }
        if !(self.rho > 1.0) {
            return Err(Error::Domain("rho must exceed 1".into()));
        }
        if !(self.corr_threshold > 0.0 && self.corr_threshold < 1.0) {
            return Err(Error::Domain("correlation threshold must lie in (0, 1)".into()));
        }
        if self.nms_width % 2 == 0 {
            return Err(Error::Domain("NMS width must be odd".into()));
        }
        let os = params.oversampling;
        if os > 1 && os % (2 * self.n_delta) != 0 {
            return Err(Error::Domain(format!(
                "oversampling {os} cannot realize delay grid with N_delta = {}",
                self.n_delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub bin: usize,
    pub magnitude: f64,
    pub delta: f64,
    pub freq: f64,
}

/// Coarse frame hypothesis: start in Nyquist samples, CFO in bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub start_estimate: f64,
    pub cfo_estimate: f64,
    pub score: f64,
}

/// Dirichlet kernel of width `m` at an offset of `u` bins, normalized to 1 at 0.
pub fn dirichlet(u: f64, m: usize) -> f64 {
    let den = (PI * u / m as f64).sin();
    if den.abs() < 1e-15 {
        return 1.0;
    }
    (PI * u).sin() / (m as f64 * den)
}

/// Unit-norm Dirichlet magnitude templates at sub-bin offsets `s / (4 max(N_delta, N_f))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub templates: Vec<Vec<f64>>,
    pub half_width: usize,
}

impl TemplateBank {
    pub fn new(m: usize, cfg: &GridConfig) -> Self {
        let hw = cfg.template_half_width as i64;
        let step = 1.0 / (4 * cfg.n_delta.max(cfg.n_freq)) as f64;
        let templates = (-2..=2)
            .map(|s| {
                let t: Vec<f64> = (-hw..=hw).map(|n| dirichlet(n as f64 - s as f64 * step, m).abs()).collect();
                let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                t.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        Self { templates, half_width: cfg.template_half_width }
    }

    pub fn len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Largest cosine similarity between `segment` and any template.
    pub fn score(&self, segment: &[f64]) -> f64 {
        let norm = segment.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return 0.0;
        }
        self.templates
            .iter()
            .map(|t| t.iter().zip(segment).map(|(a, b)| a * b).sum::<f64>() / norm)
            .fold(0.0, f64::max)
    }
}

/// Element-wise minimum across rows.
pub fn spectral_intersection<R: AsRef<[f64]>>(rows: &[R]) -> Vec<f64> {
    let mut out = rows[0].as_ref().to_vec();
    for r in &rows[1..] {
        for (o, &v) in out.iter_mut().zip(r.as_ref()) {
            if v < *o {
                *o = v;
            }
        }
    }
    out
}

pub fn is_prominent(z: &[f64], rho: f64) -> bool {
    let max = z.iter().copied().fold(0.0, f64::max);
    let med = median(z);
    if !(max > 0.0) || !(med > 0.0) {
        return false;
    }
    max / med > rho
}

/// Circular local maxima whose prominence is an upper modified Z-score outlier.
/// Returns `(bin, magnitude)` pairs; empty when the spectrum is not prominent.
pub fn detect_peaks(z: &[f64], cfg: &GridConfig) -> Vec<(usize, f64)> {
    if !is_prominent(z, cfg.rho) {
        return Vec::new();
    }
    let m = z.len();
    let at = |k: i64| z[k.rem_euclid(m as i64) as usize];
    let mut maxima = Vec::new();
    let mut prominences = Vec::new();
    for k in 0..m as i64 {
        let v = at(k);
        if !(v > at(k - 1) && v >= at(k + 1)) {
            continue;
        }
        let mut l = k;
        let mut steps = 0;
        while at(l - 1) <= at(l) && steps < m {
            l -= 1;
            steps += 1;
        }
        let mut r = k;
        steps = 0;
        while at(r + 1) <= at(r) && steps < m {
            r += 1;
            steps += 1;
        }
        maxima.push((k as usize, v));
        prominences.push(v - at(l).max(at(r)));
    }
    if prominences.len() < 3 {
        return Vec::new();
    }
    let med = median(&prominences);
    let mask = modified_zscore_outliers(&prominences, cfg.mad_sigma);
    maxima
        .into_iter()
        .zip(prominences.iter().zip(mask))
        .filter(|(_, (&p, flag))| *flag && p > med)
        .map(|(mx, _)| mx)
        .collect()
}

/// One peak per bin, keeping the grid point of largest magnitude; ties go to
/// the smallest delta, then the smallest frequency.
pub fn consolidate(candidates: &[Peak]) -> Vec<Peak> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| {
        a.bin
            .cmp(&b.bin)
            .then(b.magnitude.total_cmp(&a.magnitude))
            .then(a.delta.total_cmp(&b.delta))
            .then(a.freq.total_cmp(&b.freq))
    });
    sorted.dedup_by_key(|p| p.bin);
    sorted
}

/// Circular non-maximum suppression. A peak survives unless a neighbour within
/// `width / 2` bins is strictly larger, or equal and at a lower bin.
pub fn nms(peaks: &[Peak], width: usize, m: usize) -> Vec<Peak> {
    let half = (width / 2) as i64;
    peaks
        .iter()
        .filter(|p| {
            !peaks.iter().any(|q| {
                if q.bin == p.bin {
                    return false;
                }
                let d = (q.bin as i64 - p.bin as i64).rem_euclid(m as i64);
                let d = d.min(m as i64 - d);
                d <= half && (q.magnitude > p.magnitude || (q.magnitude == p.magnitude && q.bin < p.bin))
            })
        })
        .copied()
        .collect()
}

/// Circular segment of `2 hw + 1` samples centred on `bin`.
pub fn segment(z: &[f64], bin: usize, hw: usize) -> Vec<f64> {
    let m = z.len() as i64;
    (-(hw as i64)..=hw as i64).map(|n| z[(bin as i64 + n).rem_euclid(m) as usize]).collect()
}

pub fn correlate_segment(z: &[f64], bin: usize, bank: &TemplateBank) -> f64 {
    bank.score(&segment(z, bin, bank.half_width))
}

/// Magnitude spectrum of one window starting at `start` with CFO compensation `freq`.
pub fn window_magnitudes(
    engine: &mut SpectralEngine,
    capture: &IqCapture,
    start: f64,
    freq: f64,
) -> Result<Vec<f64>> {
    let w = engine.dechirp_block(capture, start, freq, 1, Direction::Up)?;
    Ok(engine.dft_magnitudes(w.row(0)))
}

/// Hypotheses from the intersected spectra of each grid point.
///
/// `spectra[g]` holds the `N_p - 1` window magnitudes of grid point `g`, the
/// first window starting at Nyquist index `w0 + delta_g`.
pub fn hypotheses_from_spectra(
    spectra: &[Vec<Vec<f64>>],
    grid: &[(f64, f64)],
    w0: i64,
    params: &LoRaParams,
    cfg: &GridConfig,
    bank: &TemplateBank,
) -> Vec<Hypothesis> {
    let m = params.m();
    let intersected: Vec<Vec<f64>> = spectra.iter().map(|rows| spectral_intersection(rows)).collect();
    let mut candidates = Vec::new();
    for (g, z) in intersected.iter().enumerate() {
        for (bin, magnitude) in detect_peaks(z, cfg) {
            candidates.push(Peak { bin, magnitude, delta: grid[g].0, freq: grid[g].1 });
        }
    }
    let peaks = nms(&consolidate(&candidates), cfg.nms_width, m);
    let wrap_guard = params.f_max_bins() + 1.0;
    let mut out = Vec::new();
    for p in peaks {
        let g = grid.iter().position(|&(d, f)| d == p.delta && f == p.freq).expect("grid point");
        let score = correlate_segment(&intersected[g], p.bin, bank);
        if score < cfg.corr_threshold {
            continue;
        }
        let start = w0 as f64 + p.delta - p.bin as f64;
        out.push(Hypothesis { start_estimate: start, cfo_estimate: p.freq, score });
        if (p.bin as f64) >= m as f64 - wrap_guard {
            out.push(Hypothesis { start_estimate: start + m as f64, cfo_estimate: p.freq, score });
        }
        if (p.bin as f64) <= wrap_guard {
            out.push(Hypothesis { start_estimate: start - m as f64, cfo_estimate: p.freq, score });
        }
    }
    out
}

/// Coarse synchronization at stride index `j`, recomputing every window.
pub fn coarse_synchronize(
    engine: &mut SpectralEngine,
    capture: &IqCapture,
    j: i64,
    params: &LoRaParams,
    cfg: &GridConfig,
    bank: &TemplateBank,
) -> Result<Vec<Hypothesis>> {
    let m = params.m() as i64;
    let l = params.n_preamble - 1;
    let w0 = j - l as i64 * m;
    let grid = cfg.grid_points();
    let mut spectra = Vec::with_capacity(grid.len());
    for &(d, f) in &grid {
        let rows = (0..l)
            .map(|i| window_magnitudes(engine, capture, (w0 + i as i64 * m) as f64 + d, f))
            .collect::<Result<Vec<_>>>()?;
        spectra.push(rows);
    }
    Ok(hypotheses_from_spectra(&spectra, &grid, w0, params, cfg, bank))
}

/// Streaming coarse synchronizer that keeps the last `N_p - 1` window spectra of
/// every grid point, so each stride of `M` samples costs `N_delta * N_f` FFTs.
#[derive(Debug, Clone)]
pub struct CoarseStream {
    params: LoRaParams,
    cfg: GridConfig,
    bank: TemplateBank,
    grid: Vec<(f64, f64)>,
    cache: Vec<VecDeque<Vec<f64>>>,
    last_window: Option<i64>,
}

impl CoarseStream {
    pub fn new(params: &LoRaParams, cfg: &GridConfig) -> Self {
        let grid = cfg.grid_points();
        Self {
            params: params.clone(),
            cfg: cfg.clone(),
            bank: TemplateBank::new(params.m(), cfg),
            cache: vec![VecDeque::new(); grid.len()],
            grid,
            last_window: None,
        }
    }

    pub fn bank(&self) -> &TemplateBank {
        &self.bank
    }

    pub fn reset(&mut self) {
        self.cache.iter_mut().for_each(|c| c.clear());
        self.last_window = None;
    }

    /// Process the stride ending at Nyquist index `j` (windows end at `j + delta`).
    pub fn push(&mut self, engine: &mut SpectralEngine, capture: &IqCapture, j: i64) -> Result<Vec<Hypothesis>> {
        let m = self.params.m() as i64;
        let l = self.params.n_preamble - 1;
        let w0 = j - l as i64 * m;
        let newest = j - m;
        let first_needed = match self.last_window {
            Some(prev) if newest - prev == m => newest,
            _ => {
                self.reset();
                w0
            }
        };
        let mut ws = first_needed;
        while ws <= newest {
            for (g, &(d, f)) in self.grid.iter().enumerate() {
                let mags = window_magnitudes(engine, capture, ws as f64 + d, f)?;
                let c = &mut self.cache[g];
                c.push_back(mags);
                if c.len() > l {
                    c.pop_front();
                }
            }
            ws += m;
        }
        self.last_window = Some(newest);
        let spectra: Vec<Vec<Vec<f64>>> = self.cache.iter().map(|c| c.iter().cloned().collect()).collect();
        Ok(hypotheses_from_spectra(&spectra, &self.grid, w0, &self.params, &self.cfg, &self.bank))
    }
}
