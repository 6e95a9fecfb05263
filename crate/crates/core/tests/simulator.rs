use lorasync_core::channel_sim::{
    amplitude_for_snr, match_detections, poisson_traffic, render_scene, snr_sweep, FrameSpec, GroundTruth, PayloadConfig,
    SimConfig, SnrDist, TrafficScene, TruthFrame,
};
use lorasync_core::io::{sweep_csv, to_jsonl};
use lorasync_core::phy_codec::{encode, frame_length};
use lorasync_core::{CodingRate, FramePayload, GridConfig, LoRaParams, StepDebug, SyncResult, C64};

fn frame(start: f64, cfo_hz: f64, snr_db: f64, byte: u8) -> FrameSpec {
    FrameSpec {
        start,
        cfo_hz,
        amplitude: amplitude_for_snr(snr_db),
        payload: FramePayload::new(vec![byte; 12], CodingRate::Cr48),
        sf: 8,
        phase: 0.4,
    }
}

fn result(start: f64) -> SyncResult {
    SyncResult { start, cfo_bins: 0.0, validated: true, score: 0.9, debug: StepDebug::default() }
}

#[test]
fn rendering_is_linear() {
    let p = LoRaParams::new(8);
    let a = frame(300.25, 1200.0, 3.0, 1);
    let b = frame(2000.6, -800.0, -2.0, 2);
    let dur = 20_000.0;
    let render = |frames: Vec<FrameSpec>| {
        render_scene(&TrafficScene { frames, duration_samples: dur, noise_power: 0.0, seed: 0 }, &p).unwrap().0
    };
    let joint = render(vec![a.clone(), b.clone()]);
    let sa = render(vec![a]);
    let sb = render(vec![b]);
    let err = joint
        .samples
        .iter()
        .zip(sa.samples.iter().zip(&sb.samples))
        .map(|(j, (x, y))| (j - x - y).norm())
        .fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn noise_power_is_calibrated() {
    let p = LoRaParams::new(8);
    let s = TrafficScene { frames: vec![], duration_samples: 250_000.0, noise_power: 1.0, seed: 3 };
    let (cap, _) = render_scene(&s, &p).unwrap();
    assert_eq!(cap.samples.len(), 1_000_000);
    let pw = cap.samples.iter().map(|c| c.norm_sqr()).sum::<f64>() / cap.samples.len() as f64;
    assert!((pw - 1.0).abs() < 0.01, "{pw}");
}

#[test]
fn frame_snr_is_calibrated() {
    let p = LoRaParams::new(8);
    for snr in [-15.0, 0.0, 7.5] {
        let f = frame(100.5, 2000.0, snr, 9);
        let len = frame_length(&p, encode(&f.payload, &p).unwrap().len());
        let s = TrafficScene { frames: vec![f], duration_samples: 100.5 + len + 10.0, noise_power: 0.0, seed: 0 };
        let (cap, _) = render_scene(&s, &p).unwrap();
        // Nyquist-rate samples inside the frame
        let inside: Vec<&C64> = cap.samples.iter().skip(403).step_by(4).take((len - 2.0) as usize).collect();
        let pw = inside.iter().map(|c| c.norm_sqr()).sum::<f64>() / inside.len() as f64;
        assert!((10.0 * pw.log10() - snr).abs() < 0.1, "{snr}: {}", 10.0 * pw.log10());
    }
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let p = LoRaParams::new(8);
    let pc = PayloadConfig::default();
    let a = poisson_traffic(5.0, 0.5, &p, &pc, SnrDist::Uniform(0.0, 10.0), 42);
    let b = poisson_traffic(5.0, 0.5, &p, &pc, SnrDist::Uniform(0.0, 10.0), 42);
    assert_eq!(a, b);
    let (ca, ta) = render_scene(&a, &p).unwrap();
    let (cb, tb) = render_scene(&b, &p).unwrap();
    assert_eq!(ca.samples, cb.samples);
    assert_eq!(to_jsonl(&ta.frames).unwrap(), to_jsonl(&tb.frames).unwrap());

    let cfg = SimConfig::new(p, GridConfig::default(), 6, 5);
    let r1 = snr_sweep(&cfg, &[-4.0, 0.0]).unwrap();
    let r2 = snr_sweep(&cfg, &[-4.0, 0.0]).unwrap();
    assert_eq!(sweep_csv("snr_db", &r1.0), sweep_csv("snr_db", &r2.0));
    assert_eq!(r1, r2);
}

#[test]
fn poisson_traffic_respects_bounds() {
    let p = LoRaParams::new(8);
    let s = poisson_traffic(20.0, 2.0, &p, &PayloadConfig::default(), SnrDist::Fixed(3.0), 7);
    assert!(s.frames.len() > 20 && s.frames.len() < 60, "{}", s.frames.len());
    for w in s.frames.windows(2) {
        assert!(w[1].start > w[0].start);
    }
    for f in &s.frames {
        assert!(f.cfo_hz.abs() <= 4880.0);
        assert!((f.snr_db() - 3.0).abs() < 1e-9);
    }
    assert!(render_scene(&s, &p).is_ok());
}

#[test]
fn frames_outside_the_scene_are_rejected() {
    let p = LoRaParams::new(8);
    let s = TrafficScene { frames: vec![frame(-1.0, 0.0, 0.0, 1)], duration_samples: 50_000.0, noise_power: 0.0, seed: 0 };
    assert!(render_scene(&s, &p).is_err());
    let s = TrafficScene { frames: vec![frame(100.0, 0.0, 0.0, 1)], duration_samples: 1000.0, noise_power: 0.0, seed: 0 };
    assert!(render_scene(&s, &p).is_err());
}

#[test]
fn matching_is_greedy_and_one_to_one() {
    let p = LoRaParams::new(8);
    let t = |start| TruthFrame {
        start,
        cfo_hz: 0.0,
        snr_db: 0.0,
        payload_hex: String::new(),
        coding_rate: CodingRate::Cr45,
        has_crc: true,
    };
    let truth = GroundTruth { frames: vec![t(1000.0), t(1100.0), t(5000.0)] };
    let results = vec![result(1090.0), result(1001.0), result(1105.0), result(9000.0)];
    let m = match_detections(&truth, &results, 128.0, &p);
    assert_eq!(m.matches, vec![Some(1), Some(2), None]);
    assert_eq!(m.n_detected, 2);
    assert_eq!(m.false_positives, 2);
    assert!((m.fdr + m.mfr - 1.0).abs() < 1e-12);
    assert!((m.per + m.prr - 1.0).abs() < 1e-12);
    let strict = match_detections(&truth, &results, 2.0, &p);
    assert_eq!(strict.matches, vec![Some(1), None, None]);
}
