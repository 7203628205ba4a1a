//! Stacked-histogram encoding of event windows.
//!
//! Each window becomes a `(P, T, H', W')` grid of saturating event counts
//! (polarity, time bin, row, column), which is then flattened to the
//! `(P*T, H', W')` tensor the backbone consumes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EmfError, Result};
use crate::event_io::{EventWindow, DEFAULT_WINDOW_US};
use crate::tensor::Tensor;

/// Negative and positive polarity channels.
pub const POLARITIES: usize = 2;
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub bins: usize,
    pub dt_us: u64,
    /// Integer coordinate downscale applied before binning.
    pub spatial_divisor: u16,
    /// Per-cell count ceiling, at most 255.
    pub saturation: u8,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            bins: DEFAULT_BINS,
            dt_us: DEFAULT_WINDOW_US,
            spatial_divisor: 1,
            saturation: u8::MAX,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.dt_us == 0 || self.spatial_divisor == 0 || self.saturation == 0 {
            return Err(EmfError::Config(format!(
                "encoder needs bins, dt, spatial divisor and saturation >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        POLARITIES * self.bins
    }

    /// `(H', W')` for a sensor of the given size.
    pub fn output_size(&self, width: u16, height: u16) -> (usize, usize) {
        let d = self.spatial_divisor as usize;
        ((height as usize).div_ceil(d), (width as usize).div_ceil(d))
    }
}

/// Saturating per-cell event counts laid out `[polarity][bin][row][col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventVolume {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    counts: Vec<u8>,
}

impl EventVolume {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        EventVolume {
            bins,
            height,
            width,
            counts: vec![0; POLARITIES * bins * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [POLARITIES, self.bins, self.height, self.width]
    }

    pub fn index(&self, p: usize, bin: usize, y: usize, x: usize) -> usize {
        ((p * self.bins + bin) * self.height + y) * self.width + x
    }

    pub fn get(&self, p: usize, bin: usize, y: usize, x: usize) -> u8 {
        self.counts[self.index(p, bin, y, x)]
    }

    pub fn set(&mut self, p: usize, bin: usize, y: usize, x: usize, v: u8) {
        let i = self.index(p, bin, y, x);
        self.counts[i] = v;
    }

    pub fn counts(&self) -> &[u8] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

pub fn encode_stacked_histogram(
    window: &EventWindow<'_>,
    cfg: &EncoderConfig,
) -> Result<EventVolume> {
    cfg.validate()?;
    if window.dt != cfg.dt_us {
        return Err(EmfError::Argument(format!(
            "window duration {} us differs from encoder dt {} us",
            window.dt, cfg.dt_us
        )));
    }
    let (h, w) = cfg.output_size(window.width, window.height);
    let mut vol = EventVolume::zeros(cfg.bins, h, w);
    let div = cfg.spatial_divisor;
    let bins = cfg.bins as u128;
    for e in window.events {
        if e.t < window.t0 || e.t - window.t0 >= cfg.dt_us {
            return Err(EmfError::Internal(format!(
                "event at t={} outside window [{}, {})",
                e.t,
                window.t0,
                window.t0 + cfg.dt_us
            )));
        }
        if e.x >= window.width || e.y >= window.height {
            return Err(EmfError::Internal(format!(
                "event ({}, {}) outside {}x{} window geometry",
                e.x, e.y, window.width, window.height
            )));
        }
        let rel = (e.t - window.t0) as u128;
        let bin = ((rel * bins / cfg.dt_us as u128) as usize).min(cfg.bins - 1);
        let p = usize::from(e.p > 0);
        let i = vol.index(p, bin, (e.y / div) as usize, (e.x / div) as usize);
        let c = &mut vol.counts[i];
        if *c < cfg.saturation {
            *c += 1;
        }
    }
    Ok(vol)
}

/// Encodes independent windows in parallel, preserving order.
pub fn encode_windows(
    windows: &[EventWindow<'_>],
    cfg: &EncoderConfig,
) -> Result<Vec<EventVolume>> {
    windows
        .par_iter()
        .map(|w| encode_stacked_histogram(w, cfg))
        .collect()
}

/// Merges polarity and time bin into one channel axis: `c = p * T + bin`.
pub fn flatten_volume(vol: &EventVolume) -> Tensor {
    let data = vol.counts.iter().map(|&c| c as f32).collect();
    Tensor::from_vec(&[POLARITIES * vol.bins, vol.height, vol.width], data)
        .expect("volume layout is already (P*T, H, W) contiguous")
}
