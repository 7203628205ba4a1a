use std::time::Instant;

use anyhow::Result;
use emf_core::backbone::{Form, LstmStateSet, Model};
use emf_core::detection::{postprocess, PostProcess};
use emf_core::encoder::{encode_stacked_histogram, flatten_volume, EncoderConfig};
use emf_core::event_io::{Event, EventWindow};
use emf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub form: Form,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub end_to_end: bool,
    pub threads: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Summary statistics over timed samples in milliseconds. Percentiles use
/// linear interpolation between order statistics.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64, f64, f64, f64) {
    assert!(!samples.is_empty(), "no samples");
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        let pos = q * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    (
        mean,
        var.sqrt(),
        pct(0.5),
        pct(0.95),
        sorted[0],
        sorted[sorted.len() - 1],
    )
}

/// Deterministic benchmark input with histogram-like magnitudes.
pub fn bench_input(channels: usize, height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * height * width)
        .map(|_| {
            if rng.gen_bool(0.1) {
                rng.gen_range(1..4) as f32
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(&[channels, height, width], data).expect("shape matches data")
}

/// Times `iters` forward passes (backbone and head) after `warmup`
/// untimed ones. The input is built before the clock starts and the
/// recurrent state carries over between iterations. Returns milliseconds.
pub fn time_forward(model: &Model, x: &Tensor, warmup: usize, iters: usize) -> Result<Vec<f64>> {
    let mut state = LstmStateSet::new();
    for _ in 0..warmup {
        state = model.forward(x, &state)?.1;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let (raw, next) = model.forward(x, &state)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&raw);
        state = next;
    }
    Ok(samples)
}

fn synthetic_events(width: u16, height: u16, dt: u64, n: usize, seed: u64) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev: Vec<Event> = (0..n)
        .map(|_| {
            Event::new(
                rng.gen_range(0..dt),
                rng.gen_range(0..width),
                rng.gen_range(0..height),
                if rng.gen_bool(0.5) { 1 } else { -1 },
            )
        })
        .collect();
    ev.sort_by_key(|e| e.t);
    ev
}

/// Like [`time_forward`] but each timed iteration also encodes a window of
/// events and runs decoding and NMS.
pub fn time_end_to_end(
    model: &Model,
    encoder: &EncoderConfig,
    sensor: (u16, u16),
    pp: &PostProcess,
    warmup: usize,
    iters: usize,
) -> Result<Vec<f64>> {
    let events = synthetic_events(sensor.0, sensor.1, encoder.dt_us, 50_000, 1);
    let window = EventWindow {
        t0: 0,
        dt: encoder.dt_us,
        width: sensor.0,
        height: sensor.1,
        events: &events,
        labels: Vec::new(),
    };
    let mut state = LstmStateSet::new();
    let mut samples = Vec::with_capacity(iters);
    for i in 0..warmup + iters {
        let t = Instant::now();
        let x = flatten_volume(&encode_stacked_histogram(&window, encoder)?);
        let (raw, next) = model.forward(&x, &state)?;
        let dets = postprocess(&raw, pp)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(&dets);
        state = next;
        if i >= warmup {
            samples.push(ms);
        }
    }
    Ok(samples)
}

pub fn report(
    model: &Model,
    shape: [usize; 3],
    warmup: usize,
    end_to_end: bool,
    samples: &[f64],
) -> BenchReport {
    let (mean_ms, std_ms, p50_ms, p95_ms, min_ms, max_ms) = summarize(samples);
    BenchReport {
        form: model.form,
        channels: shape[0],
        height: shape[1],
        width: shape[2],
        batch: 1,
        warmup,
        iterations: samples.len(),
        end_to_end,
        threads: rayon::current_num_threads(),
        mean_ms,
        std_ms,
        p50_ms,
        p95_ms,
        min_ms,
        max_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let (mean, std, p50, p95, min, max) = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((mean, p50, min, max), (3.0, 3.0, 1.0, 5.0));
        assert!((std - 2f64.sqrt()).abs() < 1e-12);
        assert!((p95 - 4.8).abs() < 1e-12);
        assert_eq!(summarize(&[7.0]).2, 7.0);
    }

    #[test]
    fn warmup_is_excluded() {
        let cfg = emf_core::backbone::ModelConfig {
            stage_channels: [4, 4, 4, 4],
            head_width: 4,
            ..Default::default()
        };
        let m = emf_core::backbone::init_model(&cfg, 0).unwrap();
        let x = bench_input(20, 32, 32, 0);
        assert_eq!(time_forward(&m, &x, 3, 4).unwrap().len(), 4);
        let enc = EncoderConfig::default();
        let s = time_end_to_end(&m, &enc, (32, 32), &PostProcess::default(), 2, 3).unwrap();
        assert_eq!(s.len(), 3);
    }
}
