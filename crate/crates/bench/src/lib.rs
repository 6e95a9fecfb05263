//! Fixtures shared by the benchmarks.

use lorasync_core::channel_sim::{amplitude_for_snr, render_scene, FrameSpec, PayloadConfig, TrafficScene};
use lorasync_core::{Hypothesis, IqCapture, LoRaParams};

/// A capture holding one frame at `start` (Nyquist samples) with unit noise,
/// and the hypothesis a coarse stage would hand to fine synchronization.
pub fn single_frame(sf: u32, start: f64, snr_db: f64) -> (LoRaParams, IqCapture, Hypothesis) {
    let params = LoRaParams::new(sf);
    let m = params.m() as f64;
    let cfo_hz = 1500.0;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(sf as u64);
    let frame = FrameSpec {
        start,
        cfo_hz,
        amplitude: amplitude_for_snr(snr_db),
        payload: PayloadConfig::default().sample(&mut rng),
        sf,
        phase: 0.0,
    };
    let scene = TrafficScene { frames: vec![frame], duration_samples: start + 50.0 * m, noise_power: 1.0, seed: 1 };
    let (capture, _) = render_scene(&scene, &params).expect("scene");
    let f = params.hz_to_bins(cfo_hz);
    let hyp = Hypothesis { start_estimate: (start - f.fract()).round(), cfo_estimate: f.floor(), score: 1.0 };
    (params, capture, hyp)
}

/// Pure-noise capture of `windows` symbol windows.
pub fn noise(sf: u32, windows: usize) -> (LoRaParams, IqCapture) {
    let params = LoRaParams::new(sf);
    let scene = TrafficScene { frames: vec![], duration_samples: (windows * params.m()) as f64, noise_power: 1.0, seed: 2 };
    let (capture, _) = render_scene(&scene, &params).expect("scene");
    (params, capture)
}
