use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::patch::PATCH_SIDE;
use super::wav::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Floor applied to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub mel_bins: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    /// Output frame count; shorter inputs are padded with silent frames on
    /// the right, longer ones are center-cropped.
    pub target_frames: usize,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            mel_bins: 128,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            target_frames: 1024,
        }
    }
}

impl FbankConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    /// Frames produced from `n` samples before padding or cropping.
    pub fn raw_frames(&self, n: usize) -> usize {
        let w = self.window_samples();
        if n <= w {
            1
        } else {
            1 + (n - w) / self.hop_samples()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_bins == 0 || self.mel_bins % PATCH_SIDE != 0 {
            return Err(Error::invalid(format!(
                "mel_bins must be a positive multiple of {PATCH_SIDE}, got {}",
                self.mel_bins
            )));
        }
        if self.target_frames == 0 || self.target_frames % PATCH_SIDE != 0 {
            return Err(Error::invalid(format!(
                "target_frames must be a positive multiple of {PATCH_SIDE}, got {}",
                self.target_frames
            )));
        }
        if !(self.hop_ms > 0.0 && self.window_ms >= self.hop_ms) {
            return Err(Error::invalid("need window_ms >= hop_ms > 0"));
        }
        if self.window_samples() > self.n_fft {
            return Err(Error::invalid(format!(
                "window of {} samples exceeds n_fft {}",
                self.window_samples(),
                self.n_fft
            )));
        }
        Ok(())
    }
}

/// Standardized log-mel spectrogram, `mel_bins × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankGrid {
    pub values: Matrix,
    pub frame_hop_ms: f64,
    pub frame_window_ms: f64,
}

impl FbankGrid {
    pub fn from_values(values: Matrix) -> Self {
        Self {
            values,
            frame_hop_ms: 10.0,
            frame_window_ms: 25.0,
        }
    }

    pub fn mel_bins(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// HTK-scale triangular filters spanning 0 Hz to Nyquist, one row per mel
/// bin and one column per FFT bin (`n_fft / 2 + 1`).
pub fn mel_filterbank(mel_bins: usize, n_fft: usize, sample_rate: u32) -> Matrix {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Matrix::from_fn(mel_bins, n_bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
    hop: usize,
}

impl Stft {
    fn new(cfg: &FbankConfig) -> Self {
        let win = cfg.window_samples();
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            .collect();
        Self {
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            window,
            n_fft: cfg.n_fft,
            hop: cfg.hop_samples(),
        }
    }

    /// Magnitude spectrum of every frame, `frames × (n_fft/2 + 1)`.
    fn magnitudes(&self, x: &[f64], frames: usize) -> Matrix {
        let n_bins = self.n_fft / 2 + 1;
        let mut out = Matrix::zeros(frames, n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for f in 0..frames {
            let start = f * self.hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (n, w) in self.window.iter().enumerate() {
                let s = x.get(start + n).copied().unwrap_or(0.0);
                buf[n] = Complex::new(s * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (dst, c) in out.row_mut(f).iter_mut().zip(&buf[..n_bins]) {
                *dst = c.norm();
            }
        }
        out
    }
}

/// Waveform → standardized log-mel grid of shape `mel_bins × target_frames`.
///
/// Missing frames are silent (mel energy zero, hence the log floor) and are
/// included in the per-utterance standardization. A grid whose variance is
/// below `1e-12` standardizes to all zeros.
pub fn compute_fbank(w: &Waveform, cfg: &FbankConfig) -> Result<FbankGrid> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate()
        )));
    }
    if w.samples().iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }

    let raw = cfg.raw_frames(w.len());
    let stft = Stft::new(cfg);
    let mags = stft.magnitudes(w.samples(), raw);
    let bank = mel_filterbank(cfg.mel_bins, cfg.n_fft, SAMPLE_RATE);

    // mel × raw frames
    let mut energies = Matrix::zeros(cfg.mel_bins, raw);
    crate::tensor::gemm_acc(&bank, false, &mags, true, &mut energies);

    let target = cfg.target_frames;
    let crop = raw.saturating_sub(target) / 2;
    let mut grid = Matrix::filled(cfg.mel_bins, target, LOG_FLOOR.ln());
    for m in 0..cfg.mel_bins {
        for t in 0..target.min(raw) {
            grid.set(m, t, energies.get(m, t + crop).max(LOG_FLOOR).ln());
        }
    }
    standardize(&mut grid);
    Ok(FbankGrid {
        values: grid,
        frame_hop_ms: cfg.hop_ms,
        frame_window_ms: cfg.window_ms,
    })
}

fn standardize(grid: &mut Matrix) {
    let n = grid.len() as f64;
    let mean = grid.sum() / n;
    let var = grid.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var < DEGENERATE_VARIANCE {
        grid.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let inv = 1.0 / var.sqrt();
    grid.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = (*v - mean) * inv);
}
