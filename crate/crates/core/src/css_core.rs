//! Chirps, dechirping and the spectral primitives every stage is built on.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::LoRaParams;

pub type C64 = Complex<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

#[inline]
fn cis_turns(turns: f64) -> C64 {
    let frac = turns - turns.floor();
    C64::from_polar(1.0, TAU * frac)
}

/// Phase in turns of an upchirp carrying `symbol`, at continuous time `t`
/// (Nyquist samples, `0 <= t < m`). The waveform starts and ends each symbol at
/// phase zero, so consecutive symbols join continuously.
pub fn chirp_phase_turns(m: f64, symbol: f64, t: f64) -> f64 {
    let base = t * t / (2.0 * m);
    if t < m - symbol {
        base + (symbol / m - 0.5) * t
    } else {
        base + (symbol / m - 1.5) * t
    }
}

pub fn chirp_sample(m: usize, symbol: usize, t: f64, dir: Direction) -> C64 {
    let z = cis_turns(chirp_phase_turns(m as f64, symbol as f64, t));
    match dir {
        Direction::Up => z,
        Direction::Down => z.conj(),
    }
}

/// One CSS symbol sampled at the input rate (`M * oversampling` samples).
pub fn make_chirp(params: &LoRaParams, symbol: usize, dir: Direction) -> Result<Vec<C64>> {
    let m = params.m();
    if symbol >= m {
        return Err(Error::Domain(format!("symbol {symbol} outside [0, {m})")));
    }
    let os = params.oversampling.max(1);
    Ok((0..m * os)
        .map(|k| chirp_sample(m, symbol, k as f64 / os as f64, dir))
        .collect())
}

/// Reference upchirp (symbol 0) at Nyquist rate.
pub fn reference_upchirp(m: usize) -> Vec<C64> {
    (0..m).map(|n| chirp_sample(m, 0, n as f64, Direction::Up)).collect()
}

/// Complex baseband samples at `oversampling` times the chirp bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct IqCapture {
    pub samples: Vec<C64>,
    pub oversampling: usize,
    /// Scene-time raw sample index of `samples[0]`.
    pub origin_offset: i64,
}

impl IqCapture {
    pub fn new(samples: Vec<C64>, oversampling: usize) -> Self {
        Self { samples, oversampling, origin_offset: 0 }
    }

    pub fn zeros(len: usize, oversampling: usize) -> Self {
        Self::new(vec![C64::new(0.0, 0.0); len], oversampling)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First scene-time Nyquist index covered by the capture.
    pub fn nyquist_begin(&self) -> f64 {
        self.origin_offset as f64 / self.oversampling as f64
    }

    /// One past the last scene-time Nyquist index covered by the capture.
    pub fn nyquist_end(&self) -> f64 {
        (self.origin_offset + self.samples.len() as i64) as f64 / self.oversampling as f64
    }

    pub fn scale(&mut self, k: f64) {
        for s in &mut self.samples {
            *s *= k;
        }
    }
}

/// `l` dechirped windows of `m` samples each, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMatrix {
    pub data: Vec<C64>,
    pub l: usize,
    pub m: usize,
    pub delta: f64,
    pub freq: f64,
}

impl WindowMatrix {
    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[C64]> {
        self.data.chunks_exact(self.m)
    }

    /// Element-wise sum of all rows.
    pub fn coherent_sum(&self) -> Vec<C64> {
        let mut acc = vec![C64::new(0.0, 0.0); self.m];
        for row in self.rows() {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
        acc
    }
}

/// Transform counts for one run; merge across workers by summing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FftCounter {
    pub full_ffts: u64,
    pub sparse_bin_evals: u64,
    pub zoom_ffts: u64,
}

impl FftCounter {
    pub fn merge(&mut self, other: &FftCounter) {
        self.full_ffts += other.full_ffts;
        self.sparse_bin_evals += other.sparse_bin_evals;
        self.zoom_ffts += other.zoom_ffts;
    }

    /// Full transforms plus zoom transforms plus sparse bins counted as `|bins| / M`.
    pub fn fft_equivalents(&self, m: usize) -> f64 {
        self.full_ffts as f64 + self.zoom_ffts as f64 + self.sparse_bin_evals as f64 / m as f64
    }

    pub fn since(&self, earlier: &FftCounter) -> FftCounter {
        FftCounter {
            full_ffts: self.full_ffts - earlier.full_ffts,
            sparse_bin_evals: self.sparse_bin_evals - earlier.sparse_bin_evals,
            zoom_ffts: self.zoom_ffts - earlier.zoom_ffts,
        }
    }
}

/// DFT values on the fractional grid `freqs` (in bins).
#[derive(Debug, Clone, PartialEq)]
pub struct ZoomSpectrum {
    pub freqs: Vec<f64>,
    pub values: Vec<C64>,
}

impl ZoomSpectrum {
    pub fn argmax(&self) -> usize {
        argmax(&magnitudes(&self.values))
    }
}

pub fn magnitudes(x: &[C64]) -> Vec<f64> {
    x.iter().map(|z| z.norm()).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Multiply element `n` by `exp(-j 2 pi f n / m)`.
pub fn freq_shift(x: &[C64], f_bins: f64, m: usize) -> Vec<C64> {
    x.iter()
        .enumerate()
        .map(|(n, &v)| v * cis_turns(-f_bins * n as f64 / m as f64))
        .collect()
}

/// Signed bin index in `[-m/2, m/2)`.
pub fn signed_bin(k: usize, m: usize) -> i64 {
    let k = (k % m) as i64;
    if k >= (m / 2) as i64 {
        k - m as i64
    } else {
        k
    }
}

pub fn wrap_bin(k: i64, m: usize) -> usize {
    k.rem_euclid(m as i64) as usize
}

/// Forward and inverse plans of one length.
type FftPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

/// FFT plans, reference chirp and twiddle table for one symbol size, plus the
/// counter of transforms performed through it. Clone one per worker thread and
/// merge the counters afterwards.
#[derive(Clone)]
pub struct SpectralEngine {
    m: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    twiddle: Arc<Vec<C64>>,
    up_ref: Arc<Vec<C64>>,
    aux: HashMap<usize, FftPair>,
    scratch: Vec<C64>,
    pub counter: FftCounter,
}

impl std::fmt::Debug for SpectralEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralEngine")
            .field("m", &self.m)
            .field("counter", &self.counter)
            .finish()
    }
}

impl SpectralEngine {
    pub fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        let ifft = planner.plan_fft_inverse(m);
        let twiddle = (0..m).map(|k| cis_turns(-(k as f64) / m as f64)).collect();
        let scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len().max(ifft.get_inplace_scratch_len())];
        Self {
            m,
            fft,
            ifft,
            twiddle: Arc::new(twiddle),
            up_ref: Arc::new(reference_upchirp(m)),
            aux: HashMap::new(),
            scratch,
            counter: FftCounter::default(),
        }
    }

    pub fn for_params(params: &LoRaParams) -> Self {
        Self::new(params.m())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn reference_upchirp(&self) -> &[C64] {
        &self.up_ref
    }

    /// Complex M-point DFT.
    pub fn dft_full(&mut self, window: &[C64]) -> Vec<C64> {
        assert_eq!(window.len(), self.m, "dft_full expects an M-sample window");
        let mut buf = window.to_vec();
        self.fft.process_with_scratch(&mut buf, &mut self.scratch);
        self.counter.full_ffts += 1;
        buf
    }

    pub fn dft_magnitudes(&mut self, window: &[C64]) -> Vec<f64> {
        magnitudes(&self.dft_full(window))
    }

    /// DFT evaluated only at the given (signed or unsigned) bins.
    pub fn dft_bins(&mut self, window: &[C64], bins: &[i64]) -> Vec<C64> {
        assert_eq!(window.len(), self.m);
        let m = self.m;
        let out = bins
            .iter()
            .map(|&k| {
                let k = wrap_bin(k, m);
                let mut acc = C64::new(0.0, 0.0);
                let mut idx = 0usize;
                for &x in window {
                    acc += x * self.twiddle[idx];
                    idx += k;
                    if idx >= m {
                        idx -= m;
                    }
                }
                acc
            })
            .collect();
        self.counter.sparse_bin_evals += bins.len() as u64;
        out
    }

    fn aux_plans(&mut self, n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        self.aux
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
            })
            .clone()
    }

    /// DFT at `center + n / resolution` for `|n| <= round(half_span * resolution)`,
    /// computed with a chirp-z transform.
    pub fn zoom_dft(
        &mut self,
        window: &[C64],
        center_bin: f64,
        half_span_bins: f64,
        resolution: usize,
    ) -> ZoomSpectrum {
        assert!(resolution >= 1);
        let m = self.m as f64;
        let n_half = (half_span_bins * resolution as f64).round() as i64;
        let p = (2 * n_half + 1) as usize;
        let df = 1.0 / resolution as f64;
        let f0 = center_bin - n_half as f64 * df;
        let freqs: Vec<f64> = (0..p).map(|i| f0 + i as f64 * df).collect();
        let n = window.len();
        let size = (n + p - 1).next_power_of_two();
        let (fwd, inv) = self.aux_plans(size);
        // w(u) = exp(-j pi df u^2 / M)
        let w = |u: i64| cis_turns(-0.5 * df * (u * u) as f64 / m);
        let mut a = vec![C64::new(0.0, 0.0); size];
        for (k, &x) in window.iter().enumerate() {
            a[k] = x * cis_turns(-(k as f64) * f0 / m) * w(k as i64);
        }
        let mut b = vec![C64::new(0.0, 0.0); size];
        for u in 0..p as i64 {
            b[u as usize] = w(u).conj();
        }
        for u in 1..n as i64 {
            b[size - u as usize] = w(u).conj();
        }
        fwd.process(&mut a);
        fwd.process(&mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x *= y;
        }
        inv.process(&mut a);
        let scale = 1.0 / size as f64;
        let values = (0..p).map(|i| a[i] * scale * w(i as i64)).collect();
        self.counter.zoom_ffts += 1;
        ZoomSpectrum { freqs, values }
    }

    /// Dechirp `l` consecutive windows starting at scene Nyquist index `start`.
    ///
    /// Row `i`, sample `n` is the input at `start + i*M + n` (decimation phase
    /// `round(start * os)`), times `exp(-j 2 pi cfo (i*M + n) / M)`, times the
    /// conjugate reference chirp of `dir`.
    pub fn dechirp_block(
        &mut self,
        capture: &IqCapture,
        start: f64,
        cfo_bins: f64,
        l: usize,
        dir: Direction,
    ) -> Result<WindowMatrix> {
        let m = self.m;
        let os = capture.oversampling.max(1);
        let mut data = vec![C64::new(0.0, 0.0); l * m];
        let local: Vec<C64> = (0..m).map(|n| cis_turns(-cfo_bins * n as f64 / m as f64)).collect();
        let realized = (start * os as f64).round();
        let ramp_frac = if os == 1 { start - start.floor() } else { 0.0 };
        let raw0 = if os == 1 { start.floor() as i64 } else { realized as i64 } - capture.origin_offset;
        let last = raw0 + ((l * m) as i64 - 1) * os as i64;
        if l == 0 || raw0 < 0 || last >= capture.samples.len() as i64 {
            return Err(Error::Range(format!(
                "windows [{start}, {start} + {l}*{m}) exceed the capture"
            )));
        }
        for i in 0..l {
            let row = &mut data[i * m..(i + 1) * m];
            let base = raw0 as usize + i * m * os;
            for (n, r) in row.iter_mut().enumerate() {
                *r = capture.samples[base + n * os];
            }
            if ramp_frac != 0.0 {
                self.fractional_delay(row, ramp_frac);
            }
            let rot = cis_turns(-cfo_bins * i as f64);
            for (n, r) in row.iter_mut().enumerate() {
                let refc = match dir {
                    Direction::Up => self.up_ref[n].conj(),
                    Direction::Down => self.up_ref[n],
                };
                *r *= local[n] * rot * refc;
            }
        }
        let delta = if os == 1 { ramp_frac } else { realized / os as f64 - (realized / os as f64).floor() };
        Ok(WindowMatrix { data, l, m, delta, freq: cfo_bins })
    }

    /// Circular fractional advance of `x` by `frac` samples via a spectral phase ramp.
    fn fractional_delay(&mut self, x: &mut [C64], frac: f64) {
        let m = self.m;
        self.fft.process_with_scratch(x, &mut self.scratch);
        for (k, v) in x.iter_mut().enumerate() {
            *v *= cis_turns(signed_bin(k, m) as f64 * frac / m as f64);
        }
        self.ifft.process_with_scratch(x, &mut self.scratch);
        let s = 1.0 / m as f64;
        for v in x.iter_mut() {
            *v *= s;
        }
        self.counter.full_ffts += 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[C64], f: f64) -> C64 {
        let m = x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(n, &v)| v * C64::from_polar(1.0, -TAU * f * n as f64 / m))
            .sum()
    }

    fn random_window(rng: &mut ChaCha8Rng, m: usize) -> Vec<C64> {
        (0..m).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    fn tone(m: usize, f: f64) -> Vec<C64> {
        (0..m).map(|n| C64::from_polar(1.0, TAU * f * n as f64 / m as f64)).collect()
    }

    fn rel_err(a: C64, b: C64, scale: f64) -> f64 {
        (a - b).norm() / scale
    }

    #[test]
    fn full_dft_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut eng = SpectralEngine::new(128);
        let x = random_window(&mut rng, 128);
        let y = eng.dft_full(&x);
        let scale = y.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (k, v) in y.iter().enumerate() {
            assert!(rel_err(*v, naive_dft(&x, k as f64), scale) < 1e-9);
        }
        assert_eq!(eng.counter.full_ffts, 1);
    }

    #[test]
    fn tone_and_zero_vector() {
        let mut eng = SpectralEngine::new(256);
        let y = eng.dft_magnitudes(&tone(256, 37.0));
        assert!((y[37] - 256.0).abs() < 1e-9);
        assert!(y.iter().enumerate().all(|(k, &v)| k == 37 || v < 1e-8));
        let z = eng.dft_magnitudes(&vec![C64::new(0.0, 0.0); 256]);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut eng = SpectralEngine::new(512);
        for _ in 0..10 {
            let x = random_window(&mut rng, 512);
            let e_t: f64 = x.iter().map(|v| v.norm_sqr()).sum();
            let e_f: f64 = eng.dft_full(&x).iter().map(|v| v.norm_sqr()).sum::<f64>() / 512.0;
            assert!((e_t - e_f).abs() / e_t < 1e-9);
        }
    }

    #[test]
    fn sparse_bins_match_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut eng = SpectralEngine::new(256);
        let bins: Vec<i64> = (-128..128).step_by(7).collect();
        for _ in 0..100 {
            let x = random_window(&mut rng, 256);
            let full = eng.dft_full(&x);
            let sparse = eng.dft_bins(&x, &bins);
            let scale = full.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for (&k, v) in bins.iter().zip(&sparse) {
                assert!(rel_err(*v, full[wrap_bin(k, 256)], scale) < 1e-6);
            }
        }
        assert_eq!(eng.counter.sparse_bin_evals, 100 * bins.len() as u64);
        assert!(eng.dft_bins(&random_window(&mut rng, 256), &[]).is_empty());
    }

    #[test]
    fn sparse_bins_find_tone() {
        let mut eng = SpectralEngine::new(128);
        let bins: Vec<i64> = (-2..=2).collect();
        let y = magnitudes(&eng.dft_bins(&tone(128, 1.0), &bins));
        assert_eq!(bins[argmax(&y)], 1);
    }

    #[test]
    fn zoom_matches_direct_and_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut eng = SpectralEngine::new(256);
        let x = random_window(&mut rng, 256);
        let full = eng.dft_full(&x);
        let scale = full.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let z = eng.zoom_dft(&x, 10.0, 2.0, 8);
        assert_eq!(z.freqs.len(), 33);
        for (f, v) in z.freqs.iter().zip(&z.values) {
            assert!(rel_err(*v, naive_dft(&x, *f), scale) < 1e-9);
            if (f - f.round()).abs() < 1e-12 {
                assert!(rel_err(*v, full[wrap_bin(f.round() as i64, 256)], scale) < 1e-6);
            }
        }
        let z1 = eng.zoom_dft(&x, -3.0, 4.0, 1);
        let bins: Vec<i64> = (-7..=1).collect();
        let sparse = eng.dft_bins(&x, &bins);
        for (a, b) in z1.values.iter().zip(&sparse) {
            assert!(rel_err(*a, *b, scale) < 1e-6);
        }
        assert_eq!(eng.counter.zoom_ffts, 2);
    }

    #[test]
    fn zoom_locates_fractional_tone() {
        let mut eng = SpectralEngine::new(256);
        let z = eng.zoom_dft(&tone(256, 3.375), 3.0, 2.0, 8);
        assert!((z.freqs[z.argmax()] - 3.375).abs() < 1e-12);
    }

    #[test]
    fn freq_shift_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_window(&mut rng, 64);
        assert_eq!(freq_shift(&x, 0.0, 64), x);
        let back = freq_shift(&freq_shift(&x, 0.37, 64), -0.37, 64);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).norm() < 1e-12);
        }
        let mut eng = SpectralEngine::new(64);
        let y = eng.dft_magnitudes(&freq_shift(&tone(64, 9.0), 1.0, 64));
        assert_eq!(argmax(&y), 8);
    }

    #[test]
    fn every_symbol_demodulates_to_itself() {
        for sf in [7u32, 8] {
            let p = LoRaParams::new(sf).with_oversampling(1);
            let m = p.m();
            let mut eng = SpectralEngine::new(m);
            for sym in 0..m {
                let cap = IqCapture::new(make_chirp(&p, sym, Direction::Up).unwrap(), 1);
                let w = eng.dechirp_block(&cap, 0.0, 0.0, 1, Direction::Up).unwrap();
                assert_eq!(argmax(&eng.dft_magnitudes(w.row(0))), sym);
            }
        }
    }

    #[test]
    fn chirp_is_unit_modulus_and_rejects_bad_symbol() {
        let p = LoRaParams::new(7);
        let c = make_chirp(&p, 5, Direction::Down).unwrap();
        assert_eq!(c.len(), 128 * 4);
        assert!(c.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        assert!(make_chirp(&p, 128, Direction::Up).is_err());
    }

    #[test]
    fn downchirp_dechirps_with_upchirp() {
        let p = LoRaParams::new(8).with_oversampling(1);
        let mut eng = SpectralEngine::new(256);
        let cap = IqCapture::new(make_chirp(&p, 0, Direction::Down).unwrap(), 1);
        let w = eng.dechirp_block(&cap, 0.0, 0.0, 1, Direction::Down).unwrap();
        assert_eq!(argmax(&eng.dft_magnitudes(w.row(0))), 0);
    }

    #[test]
    fn fractional_start_is_decimation_phase() {
        let p = LoRaParams::new(7);
        let mut samples = make_chirp(&p, 3, Direction::Up).unwrap();
        samples.extend(make_chirp(&p, 3, Direction::Up).unwrap());
        let cap = IqCapture::new(samples.clone(), 4);
        let mut delayed = IqCapture::new(samples[1..].to_vec(), 4);
        delayed.origin_offset = 0;
        let mut eng = SpectralEngine::new(128);
        let a = eng.dechirp_block(&cap, 10.25, 0.3, 1, Direction::Up).unwrap();
        let b = eng.dechirp_block(&delayed, 10.0, 0.3, 1, Direction::Up).unwrap();
        assert_eq!(a.data, b.data);
        assert!((a.delta - 0.25).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_window_is_an_error() {
        let cap = IqCapture::zeros(4 * 128, 4);
        let mut eng = SpectralEngine::new(128);
        assert!(eng.dechirp_block(&cap, 0.0, 0.0, 1, Direction::Up).is_ok());
        assert!(eng.dechirp_block(&cap, 0.25, 0.0, 1, Direction::Up).is_ok());
        assert!(eng.dechirp_block(&cap, 1.0, 0.0, 1, Direction::Up).is_err());
        assert!(eng.dechirp_block(&cap, -1.0, 0.0, 1, Direction::Up).is_err());
    }

    #[test]
    fn integer_cfo_moves_peak() {
        let p = LoRaParams::new(8).with_oversampling(1);
        let m = 256;
        let chirp = make_chirp(&p, 0, Direction::Up).unwrap();
        let cap = IqCapture::new(
            chirp.iter().enumerate().map(|(n, &v)| v * C64::from_polar(1.0, TAU * 5.0 * n as f64 / m as f64)).collect(),
            1,
        );
        let mut eng = SpectralEngine::new(m);
        let w = eng.dechirp_block(&cap, 0.0, 0.0, 1, Direction::Up).unwrap();
        assert_eq!(argmax(&eng.dft_magnitudes(w.row(0))), 5);
        let w = eng.dechirp_block(&cap, 0.0, 5.0, 1, Direction::Up).unwrap();
        assert_eq!(argmax(&eng.dft_magnitudes(w.row(0))), 0);
    }
}
