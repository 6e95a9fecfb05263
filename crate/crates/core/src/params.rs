use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static PHY configuration shared by every stage of the receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRaParams {
    pub sf: u32,
    pub bandwidth_hz: f64,
    pub oversampling: usize,
    pub n_preamble: usize,
    pub sync_word: (usize, usize),
    pub max_cfo_hz: f64,
}

impl LoRaParams {
    pub fn new(sf: u32) -> Self {
        Self {
            sf,
            bandwidth_hz: 125_000.0,
            oversampling: 4,
            n_preamble: 8,
            sync_word: (8, 16),
            max_cfo_hz: 8680.0,
        }
    }

    pub fn with_oversampling(mut self, os: usize) -> Self {
        self.oversampling = os;
        self
    }

    pub fn with_bandwidth(mut self, bw: f64) -> Self {
        self.bandwidth_hz = bw;
        self
    }

    /// Samples per symbol at Nyquist rate.
    pub fn m(&self) -> usize {
        1usize << self.sf
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.bandwidth_hz * self.oversampling as f64
    }

    pub fn f_max_bins(&self) -> f64 {
        self.m() as f64 * self.max_cfo_hz / self.bandwidth_hz
    }

    pub fn hz_to_bins(&self, hz: f64) -> f64 {
        hz * self.m() as f64 / self.bandwidth_hz
    }

    pub fn bins_to_hz(&self, bins: f64) -> f64 {
        bins * self.bandwidth_hz / self.m() as f64
    }

    /// Offset of the first payload symbol from the frame start, in Nyquist samples.
    pub fn payload_offset(&self) -> f64 {
        (self.n_preamble as f64 + 4.25) * self.m() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(7..=12).contains(&self.sf) {
            return Err(Error::Domain(format!("spreading factor {} outside 7..=12", self.sf)));
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::Domain("bandwidth must be positive".into()));
        }
        if self.oversampling == 0 {
            return Err(Error::Domain("oversampling must be at least 1".into()));
        }
        if self.n_preamble < 2 {
            return Err(Error::Domain("preamble needs at least 2 upchirps".into()));
        }
        let m = self.m();
        if self.sync_word.0 >= m || self.sync_word.1 >= m {
            return Err(Error::Domain("sync word symbol out of range".into()));
        }
        let fmax = self.f_max_bins();
        if !(self.max_cfo_hz >= 0.0 && fmax.is_finite() && fmax < m as f64 / 4.0) {
            return Err(Error::Domain(format!("f_max = {fmax} bins must be below M/4")));
        }
        Ok(())
    }
}
