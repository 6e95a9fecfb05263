use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lorasync_core::analytics::{opposite_chirp_threshold, single_user_table, two_user_success_mc, TwoUserMode};
use lorasync_core::channel_sim::{
    offset_sweep, poisson_traffic, rate_sweep, render_scene, score_capture, snr_sweep, PayloadConfig, SimConfig, SnrDist,
};
use lorasync_core::io::{
    read_iq, read_results, read_truth, sweep_csv, write_csv, write_hypotheses, write_iq, write_json, write_results,
    write_truth, atomic_write, IqMeta,
};
use lorasync_core::{CodingRate, GridConfig, LoRaParams, Receiver, SpectralEngine, StepDebug, SyncResult};

#[derive(Parser, Debug)]
#[command(name = "lorasync", version, about = "LoRa frame synchronization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
enum Command {
    /// Render a Poisson traffic scene to an IQ capture with ground truth.
    Simulate(SimulateArgs),
    /// Run coarse and fine synchronization over a capture.
    Detect(DetectArgs),
    /// Score detections against ground truth, demodulating matched frames.
    Evaluate(EvaluateArgs),
    /// Monte Carlo sweeps over SNR, traffic rate or collision offset.
    Sweep(SweepArgs),
    /// Analytical and Monte Carlo detection models.
    Model(ModelArgs),
    /// Repeat a run from its saved run.json.
    Rerun {
        config: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct PhyArgs {
    /// Spreading factor.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(7..=12))]
    sf: u32,
    /// Bandwidth in Hz.
    #[arg(long, default_value_t = 125_000.0)]
    bw: f64,
    /// Oversampling factor of the capture.
    #[arg(long, default_value_t = 4)]
    os: usize,
}

impl PhyArgs {
    fn params(&self) -> LoRaParams {
        LoRaParams::new(self.sf).with_bandwidth(self.bw).with_oversampling(self.os)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SnrArgs {
    /// Fixed per-frame SNR in dB.
    #[arg(long, conflicts_with_all = ["snr_min", "snr_max"])]
    snr_db: Option<f64>,
    /// Lower bound of a uniform SNR draw in dB.
    #[arg(long, requires = "snr_max")]
    snr_min: Option<f64>,
    /// Upper bound of a uniform SNR draw in dB.
    #[arg(long, requires = "snr_min")]
    snr_max: Option<f64>,
}

impl SnrArgs {
    fn dist(&self, default: SnrDist) -> SnrDist {
        match (self.snr_db, self.snr_min, self.snr_max) {
            (Some(v), _, _) => SnrDist::Fixed(v),
            (_, Some(a), Some(b)) => SnrDist::Uniform(a, b),
            _ => default,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct PayloadArgs {
    /// Payload length in bytes.
    #[arg(long, default_value_t = 12)]
    payload_len: usize,
    /// Number of Hamming parity bits (1..=4, i.e. CR 4/5..4/8).
    #[arg(long, default_value_t = 4)]
    cr: usize,
}

impl PayloadArgs {
    fn config(&self) -> Result<PayloadConfig> {
        if self.payload_len > 255 {
            bail!("payload length {} exceeds 255 bytes", self.payload_len);
        }
        Ok(PayloadConfig { len: self.payload_len, coding_rate: CodingRate::from_parity_bits(self.cr)? })
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct GridArgs {
    /// Fractional search grid as N_delta x N_f.
    #[arg(long, default_value = "2x2", value_parser = parse_grid)]
    grid: (usize, usize),
    /// Max-to-median prominence gate.
    #[arg(long, default_value_t = 5.0)]
    rho: f64,
    /// Template correlation threshold.
    #[arg(long, default_value_t = 0.7)]
    corr: f64,
}

impl GridArgs {
    fn config(&self) -> GridConfig {
        GridConfig { rho: self.rho, corr_threshold: self.corr, ..GridConfig::with_grid(self.grid.0, self.grid.1) }
    }
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected NxM, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad N_delta in {s:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad N_f in {s:?}"))?;
    if a == 0 || b == 0 {
        return Err("grid sizes must be at least 1".into());
    }
    Ok((a, b))
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SimulateArgs {
    #[command(flatten)]
    phy: PhyArgs,
    #[command(flatten)]
    snr: SnrArgs,
    #[command(flatten)]
    payload: PayloadArgs,
    /// Mean frame arrival rate in packets per second.
    #[arg(long, default_value_t = 5.0)]
    rate_pps: f64,
    /// Scene duration in seconds.
    #[arg(long, default_value_t = 1.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct DetectArgs {
    /// IQ capture (its .json sidecar supplies SF, bandwidth and oversampling).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct EvaluateArgs {
    /// IQ capture the detections came from.
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth JSONL written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Detections JSONL written by `detect`.
    #[arg(long)]
    detections: PathBuf,
    /// Matching tolerance in samples (default M/2).
    #[arg(long)]
    tol: Option<f64>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
enum SweepAxis {
    Snr,
    Rate,
    Offset,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SweepArgs {
    #[arg(value_enum)]
    axis: SweepAxis,
    #[command(flatten)]
    phy: PhyArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    snr: SnrArgs,
    #[command(flatten)]
    payload: PayloadArgs,
    #[arg(long, allow_negative_numbers = true)]
    from: f64,
    #[arg(long, allow_negative_numbers = true)]
    to: f64,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Scene duration for rate sweeps, in seconds.
    #[arg(long, default_value_t = 1.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
enum ModelKind {
    /// Single-user success probability for L = 1..=l_max.
    Single,
    /// Two-user Monte Carlo success probability over SIR.
    TwoUser,
    /// Opposite-chirp SNR threshold.
    Opposite,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ModelArgs {
    #[arg(value_enum)]
    kind: ModelKind,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(7..=12))]
    sf: u32,
    #[arg(long, default_value_t = 7)]
    l_max: usize,
    #[arg(long, default_value_t = -30.0, allow_negative_numbers = true)]
    from: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    to: f64,
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    /// Trials per point for Monte Carlo models.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn axis(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || to < from {
        bail!("empty axis: from {from} to {to} step {step}");
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| from + k as f64 * step).collect())
}

fn save_run(dir: &Path, cmd: &Command) -> Result<()> {
    write_json(&dir.join("run.json"), cmd)?;
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let params = a.phy.params();
    params.validate()?;
    let scene = poisson_traffic(a.rate_pps, a.duration_s, &params, &a.payload.config()?, a.snr.dist(SnrDist::Uniform(0.0, 10.0)), a.seed);
    let (capture, truth) = render_scene(&scene, &params)?;
    write_iq(&a.out.join("capture.iq"), &capture, &IqMeta::from_params(&params))?;
    write_truth(&a.out.join("truth.jsonl"), &truth)?;
    write_json(&a.out.join("scene.json"), &scene)?;
    println!("{} frames, {} samples -> {}", truth.frames.len(), capture.len(), a.out.display());
    Ok(())
}

fn params_from_meta(meta: &IqMeta) -> LoRaParams {
    LoRaParams::new(meta.sf).with_bandwidth(meta.bandwidth_hz).with_oversampling(meta.oversampling)
}

#[derive(Serialize)]
struct FftReport {
    strides: usize,
    windows: usize,
    full_ffts_per_window: f64,
    hypotheses: usize,
    fft_equivalents_per_hypothesis: f64,
    validated: usize,
    coarse: lorasync_core::FftCounter,
    fine: lorasync_core::FftCounter,
}

fn detect(a: &DetectArgs) -> Result<()> {
    let (capture, meta) = read_iq(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let params = params_from_meta(&meta);
    let rx = Receiver::new(&params, &a.grid.config())?;
    let report = rx.detect(&capture)?;
    write_hypotheses(&a.out.join("hypotheses.jsonl"), &report.hypotheses)?;
    write_results(&a.out.join("detections.jsonl"), &report.frames)?;
    let fft = FftReport {
        strides: report.strides,
        windows: report.windows,
        full_ffts_per_window: report.full_ffts_per_window(),
        hypotheses: report.refined.len(),
        fft_equivalents_per_hypothesis: report.fft_equivalents_per_hypothesis(params.m()),
        validated: report.frames.len(),
        coarse: report.coarse_counter,
        fine: report.fine_counter,
    };
    write_json(&a.out.join("fft_report.json"), &fft)?;
    println!(
        "{} frames from {} hypotheses; {} full FFTs per window",
        report.frames.len(),
        report.refined.len(),
        fft.full_ffts_per_window
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (capture, meta) = read_iq(&a.input)?;
    let params = params_from_meta(&meta);
    let truth = read_truth(&a.truth)?;
    let results: Vec<SyncResult> = read_results(&a.detections)?
        .into_iter()
        .filter(|r| r.validated)
        .map(|r| SyncResult { start: r.start_samples, cfo_bins: r.cfo_bins, validated: true, score: r.score, debug: StepDebug::default() })
        .collect();
    let mut engine = SpectralEngine::for_params(&params);
    let tol = a.tol.unwrap_or(params.m() as f64 / 2.0);
    let metrics = score_capture(&mut engine, &capture, &truth, &results, &params, tol);
    let mean_abs = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64 };
    let row = vec![
        metrics.n_truth.to_string(),
        metrics.n_detected.to_string(),
        metrics.n_decoded.to_string(),
        metrics.false_positives.to_string(),
        format!("{:.6}", metrics.mfr),
        format!("{:.6}", metrics.fdr),
        format!("{:.6}", metrics.per),
        format!("{:.6}", metrics.prr),
        format!("{:.6}", mean_abs(&metrics.timing_errors)),
        format!("{:.6}", mean_abs(&metrics.cfo_errors)),
    ];
    write_csv(
        &a.out,
        &["n_truth", "n_detected", "n_decoded", "false_positives", "mfr", "fdr", "per", "prr", "mean_abs_timing_error", "mean_abs_cfo_error"],
        &[row],
    )?;
    println!("FDR {:.4} PRR {:.4} ({} of {} frames)", metrics.fdr, metrics.prr, metrics.n_detected, metrics.n_truth);
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let params = a.phy.params();
    let mut cfg = SimConfig::new(params, a.grid.config(), a.trials, a.seed);
    cfg.payload = a.payload.config()?;
    let xs = axis(a.from, a.to, a.step)?;
    match a.axis {
        SweepAxis::Snr => {
            let (det, dec) = snr_sweep(&cfg, &xs)?;
            atomic_write(&a.out.join("detection.csv"), sweep_csv("snr_db", &det).as_bytes())?;
            atomic_write(&a.out.join("decoding.csv"), sweep_csv("snr_db", &dec).as_bytes())?;
        }
        SweepAxis::Rate => {
            let (det, rec) = rate_sweep(&cfg, &xs, a.duration_s, a.snr.dist(SnrDist::Uniform(0.0, 10.0)))?;
            atomic_write(&a.out.join("detection.csv"), sweep_csv("tx_rate", &det).as_bytes())?;
            atomic_write(&a.out.join("reception.csv"), sweep_csv("tx_rate", &rec).as_bytes())?;
        }
        SweepAxis::Offset => {
            let det = offset_sweep(&cfg, &xs, a.snr.dist(SnrDist::Uniform(0.0, 10.0)))?;
            atomic_write(&a.out.join("detection.csv"), sweep_csv("offset_symbols", &det).as_bytes())?;
        }
    }
    println!("{} points -> {}", xs.len(), a.out.display());
    Ok(())
}

fn model(a: &ModelArgs) -> Result<()> {
    let csv = match a.kind {
        ModelKind::Opposite => format!("sf,threshold_db\n{},{:.6}\n", a.sf, opposite_chirp_threshold(a.sf)),
        ModelKind::Single | ModelKind::TwoUser => {
            let xs = axis(a.from, a.to, a.step)?;
            let table: Vec<Vec<f64>> = if a.kind == ModelKind::Single {
                single_user_table(a.sf, &xs, a.l_max)?
            } else {
                xs.iter()
                    .map(|&s| (1..=a.l_max).map(|l| two_user_success_mc(s, a.sf, l, a.trials, a.seed, TwoUserMode::Model)).collect())
                    .collect()
            };
            let axis_name = if a.kind == ModelKind::Single { "snr_db" } else { "sir_db" };
            let mut header = vec![axis_name.to_string()];
            header.extend((1..=a.l_max).map(|l| format!("L{l}")));
            let mut s = header.join(",") + "\n";
            for (x, row) in xs.iter().zip(&table) {
                let vals: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
                s.push_str(&format!("{x},{}\n", vals.join(",")));
            }
            s
        }
    };
    match &a.out {
        Some(p) => atomic_write(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn out_dir(cmd: &Command) -> Option<PathBuf> {
    match cmd {
        Command::Simulate(a) => Some(a.out.clone()),
        Command::Detect(a) => Some(a.out.clone()),
        Command::Sweep(a) => Some(a.out.clone()),
        _ => None,
    }
}

fn run(cmd: &Command) -> Result<()> {
    if let Some(dir) = out_dir(cmd) {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save_run(&dir, cmd)?;
    }
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Detect(a) => detect(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Model(a) => model(a),
        Command::Rerun { config } => {
            let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
            let saved: Command = serde_json::from_str(&text).context("parsing run configuration")?;
            if matches!(saved, Command::Rerun { .. }) {
                bail!("a rerun configuration cannot point at another rerun");
            }
            run(&saved)
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LORASYNC_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LORASYNC_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| run(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
