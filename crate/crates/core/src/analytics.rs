//! Detection-probability models for min-intersected dechirped spectra.
//!
//! Magnitudes are normalized so that a noise bin has `E|Y|^2 = 1`: a noise bin
//! is Rayleigh with CDF `1 - exp(-z^2)` and a preamble bin is Rician with
//! non-centrality `nu = sqrt(M * Es)`, `Es = 10^(snr/10)`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::css_core::{argmax, SpectralEngine, C64};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub axis_value: f64,
    pub l: usize,
    pub sf: u32,
    pub probability: f64,
}

/// `exp(-x) I_k(x)` for `k = 0..=kmax`, by Miller's backward recurrence
/// normalized with `I_0 + 2 sum I_k = exp(x)`.
pub fn scaled_bessel_i(x: f64, kmax: usize) -> Vec<f64> {
    let mut out = vec![0.0; kmax + 1];
    if x <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    let extra = (10.0 * x.sqrt()).ceil() as usize + 40;
    let n = kmax + extra;
    let mut ip1 = 0.0f64;
    let mut i = 1e-280f64;
    let mut sum = 0.0f64;
    for k in (1..=n).rev() {
        if k <= kmax {
            out[k] = i;
        }
        sum += i;
        let im1 = (2.0 * k as f64 / x) * i + ip1;
        ip1 = i;
        i = im1;
        if i > 1e250 {
            let s = 1e-250;
            i *= s;
            ip1 *= s;
            sum *= s;
            for v in out.iter_mut().skip(k.min(kmax + 1)) {
                *v *= s;
            }
        }
    }
    out[0] = i;
    let norm = i + 2.0 * sum;
    for v in &mut out {
        *v /= norm;
    }
    out
}

/// `exp(-x) I_0(x)`.
pub fn bessel_i0_scaled(x: f64) -> f64 {
    scaled_bessel_i(x, 0)[0]
}

/// First-order Marcum Q function.
pub fn marcum_q1(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        return 1.0;
    }
    if a <= 0.0 {
        return (-0.5 * b * b).exp();
    }
    let e = (-0.5 * (a - b) * (a - b)).exp();
    if e == 0.0 {
        return if b > a { 0.0 } else { 1.0 };
    }
    let x = a * b;
    let kmax = (9.0 * x.sqrt()).ceil() as usize + 40;
    let ik = scaled_bessel_i(x, kmax);
    if b >= a {
        let r = a / b;
        let mut s = 0.0;
        let mut rk = 1.0;
        for v in &ik {
            s += rk * v;
            rk *= r;
        }
        (e * s).clamp(0.0, 1.0)
    } else {
        let r = b / a;
        let mut s = 0.0;
        let mut rk = r;
        for v in &ik[1..] {
            s += rk * v;
            rk *= r;
        }
        (1.0 - e * s).clamp(0.0, 1.0)
    }
}

/// CDF of the minimum of `l` unit Rayleigh magnitudes.
pub fn noise_min_cdf(z: f64, l: usize) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    -(-(l as f64) * z * z).exp_m1()
}

/// Density of a unit-noise Rician magnitude with non-centrality `nu`.
pub fn rician_pdf(z: f64, nu: f64) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    2.0 * z * (-(z - nu) * (z - nu)).exp() * bessel_i0_scaled(2.0 * z * nu)
}

/// Density of the minimum of `l` Rician magnitudes, `Es` the per-sample SNR.
pub fn signal_min_pdf(z: f64, l: usize, m: usize, es: f64) -> f64 {
    let nu = (m as f64 * es).sqrt();
    let f = rician_pdf(z, nu);
    if l == 1 || f == 0.0 {
        return f;
    }
    let tail = marcum_q1(std::f64::consts::SQRT_2 * nu, std::f64::consts::SQRT_2 * z);
    l as f64 * tail.powi(l as i32 - 1) * f
}

const GK_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for i in 0..7 {
        let dx = h * GK_X[i];
        let s = f(c - dx) + f(c + dx);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) quadrature to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    let pieces = 16;
    let mut stack: Vec<(f64, f64, f64, f64, u32)> = (0..pieces)
        .map(|i| {
            let lo = a + (b - a) * i as f64 / pieces as f64;
            let hi = a + (b - a) * (i + 1) as f64 / pieces as f64;
            let (v, e) = gk15(&f, lo, hi);
            (lo, hi, v, e, 0)
        })
        .collect();
    let mut total = 0.0;
    let mut evals = 0usize;
    while let Some((lo, hi, v, e, depth)) = stack.pop() {
        let local_tol = tol * (hi - lo) / (b - a);
        if e <= local_tol.max(1e-15) || depth >= 40 {
            if depth >= 40 && e > 10.0 * local_tol {
                return Err(Error::Numerical(format!("quadrature did not converge on [{lo}, {hi}]")));
            }
            total += v;
            continue;
        }
        evals += 1;
        if evals > 200_000 {
            return Err(Error::Numerical("quadrature exceeded its subdivision budget".into()));
        }
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        stack.push((lo, mid, v1, e1, depth + 1));
        stack.push((mid, hi, v2, e2, depth + 1));
    }
    Ok(total)
}

/// Probability that the preamble bin is the largest of the min-intersected
/// spectrum over `l` windows, at per-sample SNR `snr_db`.
pub fn single_user_success(snr_db: f64, sf: u32, l: usize) -> Result<f64> {
    if l == 0 {
        return Err(Error::Domain("L must be at least 1".into()));
    }
    let m = 1usize << sf;
    let es = 10f64.powf(snr_db / 10.0);
    let nu = (m as f64 * es).sqrt();
    let integrand = |z: f64| noise_min_cdf(z, l).powi(m as i32 - 1) * signal_min_pdf(z, l, m, es);
    let p = integrate(integrand, 0.0, nu + 10.0, 1e-8)?;
    Ok(p.clamp(0.0, 1.0))
}

/// Smallest axis value in `[lo, hi]` at which a nondecreasing `f` reaches `target`.
pub fn bisect_threshold(f: impl Fn(f64) -> Result<f64>, target: f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    if f(hi)? < target {
        return Err(Error::Numerical(format!("target {target} not reached at {hi}")));
    }
    if f(lo)? >= target {
        return Ok(lo);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Threshold of a Monte Carlo curve: walk down from `hi` in `step` until the
/// target is missed, then bisect the last bracket to `tol`.
pub fn scan_threshold(f: impl Fn(f64) -> f64, target: f64, lo: f64, hi: f64, step: f64, tol: f64) -> Option<f64> {
    if f(hi) < target {
        return None;
    }
    let mut pass = hi;
    let mut fail = None;
    let mut x = hi - step;
    while x >= lo - 1e-9 {
        if f(x) >= target {
            pass = x;
        } else {
            fail = Some(x);
            break;
        }
        x -= step;
    }
    let mut fail = match fail {
        Some(v) => v,
        None => return Some(lo),
    };
    while pass - fail > tol {
        let mid = 0.5 * (pass + fail);
        if f(mid) >= target {
            pass = mid;
        } else {
            fail = mid;
        }
    }
    Some(0.5 * (pass + fail))
}

pub fn single_user_threshold(sf: u32, l: usize, target: f64) -> Result<f64> {
    bisect_threshold(|s| single_user_success(s, sf, l), target, -40.0, 10.0, 1e-3)
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn complex_normal(rng: &mut ChaCha8Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn min_argmax_hit(engine: &mut SpectralEngine, windows: &[Vec<C64>], m_sym: usize) -> bool {
    let mut z: Option<Vec<f64>> = None;
    for w in windows {
        let mags = engine.dft_magnitudes(w);
        z = Some(match z {
            None => mags,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(mags) {
                    *a = a.min(b);
                }
                acc
            }
        });
    }
    argmax(&z.expect("at least one window")) == m_sym
}

/// Monte Carlo counterpart of [`single_user_success`]: `l` dechirped windows of
/// a tone at a random bin plus unit complex Gaussian noise.
pub fn preamble_mc_detection(snr_db: f64, sf: u32, l: usize, trials: usize, seed: u64) -> f64 {
    let m = 1usize << sf;
    let amp = 10f64.powf(snr_db / 20.0);
    let hits: usize = (0..trials as u64)
        .into_par_iter()
        .map_init(
            || SpectralEngine::new(m),
            |engine, t| {
                let mut rng = trial_rng(seed, t);
                let sym = rng.random_range(0..m);
                let windows: Vec<Vec<C64>> = (0..l)
                    .map(|_| {
                        let phase = rng.random_range(0.0..TAU);
                        (0..m)
                            .map(|n| {
                                let s = C64::from_polar(amp, TAU * (sym * n % m) as f64 / m as f64 + phase);
                                s + complex_normal(&mut rng)
                            })
                            .collect()
                    })
                    .collect();
                min_argmax_hit(engine, &windows, sym) as usize
            },
        )
        .sum();
    hits as f64 / trials as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoUserMode {
    /// Independent interference draws per window.
    Model,
    /// Consecutive preamble windows against a continuous interfering symbol stream.
    Preamble,
}

fn add_tone(buf: &mut [C64], from: usize, to: usize, freq: f64, phase: f64, amp: f64, m: usize) {
    for (n, v) in buf.iter_mut().enumerate().take(to).skip(from) {
        *v += C64::from_polar(amp, TAU * freq * n as f64 / m as f64 + phase);
    }
}

/// Two-user success probability: a unit tone at a random bin plus an interferer
/// made of two clipped tones (a symbol boundary at `T`), noise free.
/// `sir_db` is the ratio of per-window energies.
pub fn two_user_success_mc(sir_db: f64, sf: u32, l: usize, trials: usize, seed: u64, mode: TwoUserMode) -> f64 {
    let m = 1usize << sf;
    let a_i = 10f64.powf(-sir_db / 20.0);
    let hits: usize = (0..trials as u64)
        .into_par_iter()
        .map_init(
            || SpectralEngine::new(m),
            |engine, t| {
                let mut rng = trial_rng(seed, t);
                let sym = rng.random_range(0..m);
                let mut windows = Vec::with_capacity(l);
                match mode {
                    TwoUserMode::Model => {
                        for _ in 0..l {
                            let seg = rng.random_range(0..=m);
                            let (f1, f2) = (rng.random_range(0.0..m as f64), rng.random_range(0.0..m as f64));
                            let (p1, p2) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
                            let mut w = vec![C64::new(0.0, 0.0); m];
                            add_tone(&mut w, 0, m, sym as f64, 0.0, 1.0, m);
                            add_tone(&mut w, 0, seg, f1, p1, a_i, m);
                            add_tone(&mut w, seg, m, f2, p2, a_i, m);
                            windows.push(w);
                        }
                    }
                    TwoUserMode::Preamble => {
                        let seg = rng.random_range(0..m);
                        let frac = rng.random_range(0.0..1.0);
                        let freqs: Vec<f64> = (0..=l).map(|_| rng.random_range(0..m) as f64 + frac).collect();
                        let phases: Vec<f64> = (0..=l).map(|_| rng.random_range(0.0..TAU)).collect();
                        let p0 = rng.random_range(0.0..TAU);
                        for i in 0..l {
                            let mut w = vec![C64::new(0.0, 0.0); m];
                            add_tone(&mut w, 0, m, sym as f64, p0 + TAU * sym as f64 * i as f64, 1.0, m);
                            add_tone(&mut w, 0, seg, freqs[i], phases[i], a_i, m);
                            add_tone(&mut w, seg, m, freqs[i + 1], phases[i + 1], a_i, m);
                            windows.push(w);
                        }
                    }
                }
                min_argmax_hit(engine, &windows, sym) as usize
            },
        )
        .sum();
    hits as f64 / trials as f64
}

/// SNR below which an opposite-slope chirp can mask the target bin:
/// `10 log10((2 sqrt 2)^2 / M)`.
pub fn opposite_chirp_threshold(sf: u32) -> f64 {
    10.0 * (8.0 / (1u64 << sf) as f64).log10()
}

/// Table of `single_user_success` over an SNR axis for `L = 1..=l_max`.
pub fn single_user_table(sf: u32, axis: &[f64], l_max: usize) -> Result<Vec<Vec<f64>>> {
    axis.par_iter()
        .map(|&s| (1..=l_max).map(|l| single_user_success(s, sf, l)).collect::<Result<Vec<_>>>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_small_and_large() {
        // e^-1 I0(1) = 0.4657596075936404
        assert!((bessel_i0_scaled(1.0) - 0.465_759_607_593_640_4).abs() < 1e-13);
        // e^-50 I0(50) = 0.056561626647454193
        assert!((bessel_i0_scaled(50.0) - 0.056_561_626_647_454_19).abs() < 1e-13);
        assert_eq!(bessel_i0_scaled(0.0), 1.0);
        let v = scaled_bessel_i(3.0, 3);
        // e^-3 I3(3) = 0.047783319568023303
        assert!((v[3] - 0.047_783_319_568_023_3).abs() < 1e-12);
    }

    #[test]
    fn marcum_closed_forms() {
        for b in [0.0, 0.3, 1.0, 4.0] {
            assert!((marcum_q1(0.0, b) - (-b * b / 2.0f64).exp()).abs() < 1e-15);
        }
        assert_eq!(marcum_q1(2.0, 0.0), 1.0);
    }

    #[test]
    fn marcum_matches_rician_tail_integral() {
        for &(a, b) in &[(1.0, 2.0), (2.0, 1.0), (5.0, 5.5), (0.3, 0.1), (12.0, 9.0), (30.0, 31.0)] {
            let tail = integrate(
                |x: f64| x * (-(x - a) * (x - a) / 2.0).exp() * bessel_i0_scaled(a * x),
                b,
                a + b + 40.0,
                1e-12,
            )
            .unwrap();
            assert!((marcum_q1(a, b) - tail).abs() < 1e-8, "({a},{b}): {} vs {tail}", marcum_q1(a, b));
        }
    }

    #[test]
    fn marcum_frozen_values() {
        // reference: 30-digit quadrature of the Rician tail, cross-checked
        // against the noncentral chi-square survival function
        let cases = [
            (1.0, 2.0, 0.269_012_060_035_91),
            (2.0, 1.0, 0.918_107_696_369_406),
            (3.0, 3.0, 0.567_479_762_290_861_5),
            (10.0, 12.0, 0.025_329_474_297_941_42),
        ];
        for (a, b, q) in cases {
            assert!((marcum_q1(a, b) - q).abs() < 1e-8, "({a},{b}) -> {}", marcum_q1(a, b));
        }
    }

    #[test]
    fn noise_cdf() {
        assert_eq!(noise_min_cdf(0.0, 3), 0.0);
        assert!((noise_min_cdf(1.0, 1) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn min_pdf_normalized_and_reduces_to_rician() {
        for l in [1usize, 4, 7] {
            let total = integrate(|z| signal_min_pdf(z, l, 256, 0.05), 0.0, 20.0, 1e-10).unwrap();
            assert!((total - 1.0).abs() < 1e-4, "L={l}: {total}");
        }
        let nu = (256.0f64 * 0.05).sqrt();
        assert!((signal_min_pdf(2.0, 1, 256, 0.05) - rician_pdf(2.0, nu)).abs() < 1e-15);
    }

    #[test]
    fn success_is_monotone() {
        let mut prev = 0.0;
        for i in 0..30 {
            let s = -24.0 + i as f64 * 0.5;
            let p = single_user_success(s, 8, 4).unwrap();
            assert!(p + 1e-9 >= prev);
            prev = p;
        }
        for s in [-16.0, -13.0, -10.0] {
            let mut prev = 0.0;
            for l in 1..=7 {
                let p = single_user_success(s, 8, l).unwrap();
                assert!(p + 1e-9 >= prev, "snr {s} L {l}");
                prev = p;
            }
        }
    }

    #[test]
    fn mc_limits() {
        assert!(preamble_mc_detection(20.0, 7, 1, 200, 1) == 1.0);
        let p = preamble_mc_detection(-200.0, 2, 1, 20_000, 2);
        assert!((p - 0.25).abs() < 0.02, "{p}");
        assert!(two_user_success_mc(60.0, 7, 3, 200, 3, TwoUserMode::Model) == 1.0);
        assert!(two_user_success_mc(60.0, 7, 3, 200, 3, TwoUserMode::Preamble) == 1.0);
    }

    #[test]
    fn mc_is_reproducible() {
        let a = two_user_success_mc(-20.0, 8, 3, 500, 9, TwoUserMode::Model);
        let b = two_user_success_mc(-20.0, 8, 3, 500, 9, TwoUserMode::Model);
        assert_eq!(a, b);
    }

    #[test]
    fn opposite_chirp_formula() {
        assert!((opposite_chirp_threshold(7) - 10.0 * (8.0f64 / 128.0).log10()).abs() < 1e-12);
        assert!((opposite_chirp_threshold(7) + 12.041).abs() < 1e-3);
    }
}
