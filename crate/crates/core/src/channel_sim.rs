//! Multi-user capture synthesis and scoring of receiver output against ground truth.
//!
//! SNR is the per-Nyquist-sample signal power over the unit noise power, so a
//! frame of amplitude `a` has `SNR_dB = 20 log10(a)`; after dechirping and an
//! `M`-point DFT the peak-to-noise power ratio is `M` times larger.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse_sync::GridConfig;
use crate::css_core::{chirp_sample, IqCapture, SpectralEngine, C64};
use crate::error::{Error, Result};
use crate::fine_sync::SyncResult;
use crate::params::LoRaParams;
use crate::phy_codec::{decode, demodulate, encode, frame_length, frame_segments, CodingRate, FramePayload};
use crate::receiver::Receiver;
use crate::stats::wilson_interval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    /// Start in scene Nyquist samples (fractional allowed).
    pub start: f64,
    pub cfo_hz: f64,
    pub amplitude: f64,
    pub payload: FramePayload,
    pub sf: u32,
    /// Carrier phase at the frame start, radians.
    pub phase: f64,
}

impl FrameSpec {
    pub fn snr_db(&self) -> f64 {
        20.0 * self.amplitude.log10()
    }
}

pub fn amplitude_for_snr(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 20.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficScene {
    pub frames: Vec<FrameSpec>,
    /// Scene length in Nyquist samples.
    pub duration_samples: f64,
    pub noise_power: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub start: f64,
    pub cfo_hz: f64,
    pub snr_db: f64,
    pub payload_hex: String,
    pub coding_rate: CodingRate,
    pub has_crc: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<TruthFrame>,
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn from_hex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Format("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

impl TruthFrame {
    pub fn payload(&self) -> Result<FramePayload> {
        let mut p = FramePayload::new(from_hex(&self.payload_hex)?, self.coding_rate);
        p.has_crc = self.has_crc;
        Ok(p)
    }
}

fn segment_at(starts: &[f64], t: f64) -> Option<(usize, f64)> {
    let idx = starts.partition_point(|&s| s <= t);
    if idx == 0 {
        return None;
    }
    Some((idx - 1, t - starts[idx - 1]))
}

/// Add one frame to `buf`, whose first sample sits at scene raw index `origin`.
pub fn render_frame_into(buf: &mut [C64], origin: i64, os: usize, frame: &FrameSpec, params: &LoRaParams) -> Result<()> {
    let p = LoRaParams { sf: frame.sf, ..params.clone() };
    let m = p.m();
    let symbols = encode(&frame.payload, &p)?;
    let segs = frame_segments(&p, &symbols);
    let mut starts = Vec::with_capacity(segs.len() + 1);
    let mut acc = 0.0;
    for s in &segs {
        starts.push(acc);
        acc += s.fraction * m as f64;
    }
    let len = acc;
    let cfo_bins = p.hz_to_bins(frame.cfo_hz);
    let osf = os as f64;
    let r_lo = ((frame.start * osf).ceil() as i64).max(origin);
    let r_hi = (((frame.start + len) * osf).ceil() as i64).min(origin + buf.len() as i64);
    for r in r_lo..r_hi {
        let t = r as f64 / osf - frame.start;
        if t < 0.0 || t >= len {
            continue;
        }
        let Some((k, tl)) = segment_at(&starts, t) else { continue };
        let seg = segs[k];
        let carrier = C64::from_polar(frame.amplitude, TAU * cfo_bins * t / m as f64 + frame.phase);
        buf[(r - origin) as usize] += carrier * chirp_sample(m, seg.symbol, tl, seg.dir);
    }
    Ok(())
}

/// Render a scene at the configured oversampling, with unit-variance complex
/// Gaussian noise when `noise_power > 0`.
pub fn render_scene(scene: &TrafficScene, params: &LoRaParams) -> Result<(IqCapture, GroundTruth)> {
    let os = params.oversampling.max(1);
    let n = (scene.duration_samples * os as f64).ceil() as usize;
    let mut samples = vec![C64::new(0.0, 0.0); n];
    let mut truth = GroundTruth::default();
    for f in &scene.frames {
        let p = LoRaParams { sf: f.sf, ..params.clone() };
        let len = frame_length(&p, encode(&f.payload, &p)?.len());
        if f.start < 0.0 || f.start + len > scene.duration_samples {
            return Err(Error::Domain(format!("frame at {} does not fit in the scene", f.start)));
        }
        render_frame_into(&mut samples, 0, os, f, params)?;
        truth.frames.push(TruthFrame {
            start: f.start,
            cfo_hz: f.cfo_hz,
            snr_db: f.snr_db(),
            payload_hex: to_hex(&f.payload.bytes),
            coding_rate: f.payload.coding_rate,
            has_crc: f.payload.has_crc,
        });
    }
    if scene.noise_power > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        let sigma = (scene.noise_power / 2.0).sqrt();
        for s in &mut samples {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *s += C64::new(re * sigma, im * sigma);
        }
    }
    Ok((IqCapture::new(samples, os), truth))
}

/// Distribution of per-frame SNR in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SnrDist {
    Fixed(f64),
    Uniform(f64, f64),
}

impl SnrDist {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            SnrDist::Fixed(v) => v,
            SnrDist::Uniform(a, b) if b > a => rng.random_range(a..b),
            SnrDist::Uniform(a, _) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadConfig {
    pub len: usize,
    pub coding_rate: CodingRate,
}

impl Default for PayloadConfig {
    fn default() -> Self {
        Self { len: 12, coding_rate: CodingRate::Cr48 }
    }
}

impl PayloadConfig {
    pub fn sample(&self, rng: &mut impl Rng) -> FramePayload {
        FramePayload::new((0..self.len).map(|_| rng.random()).collect(), self.coding_rate)
    }
}

/// CFO bound of the traffic generator, in Hz.
pub const TRAFFIC_CFO_HZ: f64 = 4880.0;

/// Homogeneous Poisson arrivals over `duration_s`, uniform CFO in
/// `[-4880, 4880]` Hz and a random fractional start.
pub fn poisson_traffic(
    rate_pkt_s: f64,
    duration_s: f64,
    params: &LoRaParams,
    payload: &PayloadConfig,
    snr: SnrDist,
    seed: u64,
) -> TrafficScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = params.m() as f64;
    let duration_samples = duration_s * params.bandwidth_hz;
    let mut frames = Vec::new();
    if rate_pkt_s > 0.0 {
        let gap = Exp::new(rate_pkt_s).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= duration_s {
                break;
            }
            let pl = payload.sample(&mut rng);
            let n_sym = encode(&pl, params).map(|s| s.len()).unwrap_or(0);
            let start = (t * params.bandwidth_hz).floor() + rng.random_range(0.0..1.0);
            let len = frame_length(params, n_sym);
            let snr_db = snr.sample(&mut rng);
            let frame = FrameSpec {
                start,
                cfo_hz: rng.random_range(-TRAFFIC_CFO_HZ..=TRAFFIC_CFO_HZ),
                amplitude: amplitude_for_snr(snr_db),
                payload: pl,
                sf: params.sf,
                phase: rng.random_range(0.0..TAU),
            };
            if start + len + m <= duration_samples {
                frames.push(frame);
            }
        }
    }
    TrafficScene { frames, duration_samples, noise_power: 1.0, seed: rng.random() }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_truth: usize,
    pub n_detected: usize,
    pub n_decoded: usize,
    pub mfr: f64,
    pub fdr: f64,
    pub per: f64,
    pub prr: f64,
    pub timing_errors: Vec<f64>,
    pub cfo_errors: Vec<f64>,
    pub false_positives: usize,
    /// Per truth frame: index of the matched detection.
    pub matches: Vec<Option<usize>>,
    /// Per truth frame: decoded with a valid CRC.
    pub decoded: Vec<bool>,
}

/// Greedy one-to-one matching by ascending timing error within `tol_samples`.
pub fn match_detections(truth: &GroundTruth, results: &[SyncResult], tol_samples: f64, params: &LoRaParams) -> Metrics {
    let mut pairs = Vec::new();
    for (i, t) in truth.frames.iter().enumerate() {
        for (j, r) in results.iter().enumerate() {
            let e = (r.start - t.start).abs();
            if e <= tol_samples {
                pairs.push((e, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matches = vec![None; truth.frames.len()];
    let mut used = vec![false; results.len()];
    for (_, i, j) in pairs {
        if matches[i].is_none() && !used[j] {
            matches[i] = Some(j);
            used[j] = true;
        }
    }
    let n_truth = truth.frames.len();
    let n_detected = matches.iter().filter(|m| m.is_some()).count();
    let mut timing_errors = Vec::new();
    let mut cfo_errors = Vec::new();
    for (i, mj) in matches.iter().enumerate() {
        if let Some(j) = *mj {
            timing_errors.push(results[j].start - truth.frames[i].start);
            cfo_errors.push(results[j].cfo_bins - params.hz_to_bins(truth.frames[i].cfo_hz));
        }
    }
    let fdr = if n_truth == 0 { 1.0 } else { n_detected as f64 / n_truth as f64 };
    Metrics {
        n_truth,
        n_detected,
        n_decoded: 0,
        mfr: 1.0 - fdr,
        fdr,
        per: 1.0,
        prr: 0.0,
        timing_errors,
        cfo_errors,
        false_positives: used.iter().filter(|u| !**u).count(),
        decoded: vec![false; n_truth],
        matches,
    }
    .with_reception(0)
}

impl Metrics {
    fn with_reception(mut self, decoded: usize) -> Self {
        self.n_decoded = decoded;
        self.prr = if self.n_truth == 0 { 1.0 } else { decoded as f64 / self.n_truth as f64 };
        self.per = 1.0 - self.prr;
        self
    }
}

/// Match within `tol_samples`, then demodulate and decode every matched frame.
pub fn score_capture(
    engine: &mut SpectralEngine,
    capture: &IqCapture,
    truth: &GroundTruth,
    results: &[SyncResult],
    params: &LoRaParams,
    tol_samples: f64,
) -> Metrics {
    let mut metrics = match_detections(truth, results, tol_samples, params);
    for (i, mj) in metrics.matches.clone().iter().enumerate() {
        let Some(j) = *mj else { continue };
        let Ok(payload) = truth.frames[i].payload() else { continue };
        let meta = payload.meta();
        let n = crate::phy_codec::symbol_count(&meta, params.sf);
        let ok = demodulate(engine, capture, &results[j], n, params)
            .and_then(|s| decode(&s, &meta, params))
            .map(|(bytes, crc_ok)| crc_ok && bytes == payload.bytes)
            .unwrap_or(false);
        metrics.decoded[i] = ok;
    }
    let n = metrics.decoded.iter().filter(|d| **d).count();
    metrics.with_reception(n)
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: f64,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub successes: usize,
    pub trials: usize,
}

impl SweepRow {
    pub fn new(axis: f64, successes: usize, trials: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, trials);
        let value = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
        Self { axis, value, ci_low, ci_high, successes, trials }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub params: LoRaParams,
    pub grid: GridConfig,
    pub payload: PayloadConfig,
    pub trials: usize,
    pub seed: u64,
    pub cfo_max_hz: f64,
}

impl SimConfig {
    pub fn new(params: LoRaParams, grid: GridConfig, trials: usize, seed: u64) -> Self {
        Self { params, grid, payload: PayloadConfig::default(), trials, seed, cfo_max_hz: TRAFFIC_CFO_HZ }
    }
}

/// Outcome of one simulated trial for the tracked frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub detected: bool,
    pub decoded: bool,
    pub timing_error: f64,
    pub cfo_error: f64,
    pub false_positives: usize,
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_frame(cfg: &SimConfig, rng: &mut ChaCha8Rng, start: f64, snr_db: f64) -> FrameSpec {
    FrameSpec {
        start,
        cfo_hz: rng.random_range(-cfg.cfo_max_hz..=cfg.cfo_max_hz),
        amplitude: amplitude_for_snr(snr_db),
        payload: cfg.payload.sample(rng),
        sf: cfg.params.sf,
        phase: rng.random_range(0.0..TAU),
    }
}

/// Render `frames` with margins, run the receiver and score frame 0.
pub fn run_frames(cfg: &SimConfig, receiver: &Receiver, frames: Vec<FrameSpec>, noise_seed: u64) -> Result<TrialOutcome> {
    let p = &cfg.params;
    let m = p.m() as f64;
    let n_sym = encode(&frames[0].payload, p)?.len();
    let len = frame_length(p, n_sym);
    let end = frames.iter().map(|f| f.start + len).fold(0.0, f64::max);
    let scene = TrafficScene { frames, duration_samples: end + 2.0 * m, noise_power: 1.0, seed: noise_seed };
    let (capture, truth) = render_scene(&scene, p)?;
    let report = receiver.detect(&capture)?;
    let mut engine = SpectralEngine::for_params(p);
    let metrics = score_capture(&mut engine, &capture, &truth, &report.frames, p, m / 2.0);
    let (timing_error, cfo_error) = match metrics.matches[0] {
        Some(j) => (
            report.frames[j].start - truth.frames[0].start,
            report.frames[j].cfo_bins - p.hz_to_bins(truth.frames[0].cfo_hz),
        ),
        None => (f64::NAN, f64::NAN),
    };
    Ok(TrialOutcome {
        detected: metrics.matches[0].is_some(),
        decoded: metrics.decoded[0],
        timing_error,
        cfo_error,
        false_positives: metrics.false_positives,
    })
}

/// Single-frame trial at `snr_db`: random integer and fractional placement
/// relative to the stride grid, random CFO and payload.
pub fn single_frame_trial(cfg: &SimConfig, receiver: &Receiver, snr_db: f64, trial: u64) -> Result<TrialOutcome> {
    let mut rng = trial_rng(cfg.seed, trial);
    let m = cfg.params.m() as f64;
    let start = m + rng.random_range(0..cfg.params.m()) as f64 + rng.random_range(0.0..1.0);
    let frame = random_frame(cfg, &mut rng, start, snr_db);
    run_frames(cfg, receiver, vec![frame], rng.random())
}

/// Detection and decoding ratios of single frames over an SNR axis.
pub fn snr_sweep(cfg: &SimConfig, snrs: &[f64]) -> Result<(Vec<SweepRow>, Vec<SweepRow>)> {
    let receiver = Receiver::new(&cfg.params, &cfg.grid)?;
    let mut det = Vec::new();
    let mut dec = Vec::new();
    for (k, &snr) in snrs.iter().enumerate() {
        let outcomes = (0..cfg.trials as u64)
            .into_par_iter()
            .map(|t| single_frame_trial(cfg, &receiver, snr, ((k as u64) << 32) | t))
            .collect::<Result<Vec<_>>>()?;
        det.push(SweepRow::new(snr, outcomes.iter().filter(|o| o.detected).count(), outcomes.len()));
        dec.push(SweepRow::new(snr, outcomes.iter().filter(|o| o.decoded).count(), outcomes.len()));
    }
    Ok((det, dec))
}

/// Two-user trial: the tracked frame and an interferer starting
/// `offset_symbols` symbols later, SNRs drawn from `snr`.
pub fn offset_trial(cfg: &SimConfig, receiver: &Receiver, offset_symbols: f64, snr: SnrDist, trial: u64) -> Result<TrialOutcome> {
    let mut rng = trial_rng(cfg.seed, trial);
    let m = cfg.params.m() as f64;
    let n_sym = encode(&cfg.payload.sample(&mut rng.clone()), &cfg.params)?.len();
    let len_symbols = frame_length(&cfg.params, n_sym) / m;
    let lead = (-offset_symbols).max(0.0);
    let base = (1.0 + lead) * m + rng.random_range(0..cfg.params.m()) as f64 + rng.random_range(0.0..1.0);
    let s0 = snr.sample(&mut rng);
    let s1 = snr.sample(&mut rng);
    let target = random_frame(cfg, &mut rng, base, s0);
    let interferer = random_frame(cfg, &mut rng, base + offset_symbols * m, s1);
    debug_assert!(len_symbols > 0.0);
    run_frames(cfg, receiver, vec![target, interferer], rng.random())
}

/// Detection ratio of the tracked frame over collision offsets (in symbols).
pub fn offset_sweep(cfg: &SimConfig, offsets: &[f64], snr: SnrDist) -> Result<Vec<SweepRow>> {
    let receiver = Receiver::new(&cfg.params, &cfg.grid)?;
    offsets
        .iter()
        .enumerate()
        .map(|(k, &off)| {
            let hits = (0..cfg.trials as u64)
                .into_par_iter()
                .map(|t| offset_trial(cfg, &receiver, off, snr, ((k as u64) << 32) | t).map(|o| o.detected as usize))
                .sum::<Result<usize>>()?;
            Ok(SweepRow::new(off, hits, cfg.trials))
        })
        .collect()
}

/// Frame detection and packet reception ratios for Poisson traffic.
pub fn rate_sweep(cfg: &SimConfig, rates: &[f64], duration_s: f64, snr: SnrDist) -> Result<(Vec<SweepRow>, Vec<SweepRow>)> {
    let receiver = Receiver::new(&cfg.params, &cfg.grid)?;
    let mut det = Vec::new();
    let mut rec = Vec::new();
    for (k, &rate) in rates.iter().enumerate() {
        let per_trial = (0..cfg.trials as u64)
            .into_par_iter()
            .map(|t| {
                let scene = poisson_traffic(rate, duration_s, &cfg.params, &cfg.payload, snr, cfg.seed ^ (((k as u64) << 32) | t));
                let (capture, truth) = render_scene(&scene, &cfg.params)?;
                let report = receiver.detect(&capture)?;
                let mut engine = SpectralEngine::for_params(&cfg.params);
                let m = score_capture(&mut engine, &capture, &truth, &report.frames, &cfg.params, cfg.params.m() as f64 / 2.0);
                Ok((m.n_truth, m.n_detected, m.n_decoded))
            })
            .collect::<Result<Vec<_>>>()?;
        let n: usize = per_trial.iter().map(|x| x.0).sum();
        det.push(SweepRow::new(rate, per_trial.iter().map(|x| x.1).sum(), n));
        rec.push(SweepRow::new(rate, per_trial.iter().map(|x| x.2).sum(), n));
    }
    Ok((det, rec))
}

/// Lowest axis value from which every point reaches `target` (rows sorted by axis).
pub fn sensitivity(rows: &[SweepRow], target: f64) -> Option<f64> {
    let mut best = None;
    for r in rows.iter().rev() {
        if r.value >= target {
            best = Some(r.axis);
        } else {
            break;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_roundtrip() {
        let b = vec![0u8, 1, 0xab, 0xff];
        assert_eq!(from_hex(&to_hex(&b)).unwrap(), b);
        assert!(from_hex("abc").is_err());
    }

    #[test]
    fn sensitivity_requires_all_points_above() {
        let rows: Vec<SweepRow> = [(-3.0, 90), (-2.0, 100), (-1.0, 99), (0.0, 100)]
            .iter()
            .map(|&(a, k)| SweepRow::new(a, k, 100))
            .collect();
        assert_eq!(sensitivity(&rows, 0.99), Some(-2.0));
        assert_eq!(sensitivity(&rows[..1], 0.99), None);
    }

    #[test]
    fn poisson_zero_rate_is_empty() {
        let p = LoRaParams::new(8);
        let s = poisson_traffic(0.0, 1.0, &p, &PayloadConfig::default(), SnrDist::Fixed(0.0), 1);
        assert!(s.frames.is_empty());
    }
}
