//! LoRa frame synchronization toolkit.
//!
//! Coarse detection by spectral intersection over a fractional (delay, frequency)
//! grid, four-step fine STO/CFO refinement with sync-word validation, a baseline
//! LoRa payload codec, a multi-user channel simulator and the detection
//! probability models used to check the receiver against theory.

pub mod analytics;
pub mod coarse_sync;
pub mod css_core;
pub mod error;
pub mod fine_sync;
pub mod io;
pub mod params;
pub mod phy_codec;
pub mod channel_sim;
pub mod receiver;
pub mod stats;

pub use coarse_sync::{GridConfig, Hypothesis, Peak, TemplateBank};
pub use css_core::{Direction, FftCounter, IqCapture, SpectralEngine, WindowMatrix, C64};
pub use error::{Error, Result};
pub use fine_sync::{SearchRegions, StepDebug, SyncResult};
pub use params::LoRaParams;
pub use phy_codec::{CodingRate, FramePayload};
pub use channel_sim::{FrameSpec, GroundTruth, Metrics, TrafficScene};
pub use receiver::{DetectReport, Receiver};
