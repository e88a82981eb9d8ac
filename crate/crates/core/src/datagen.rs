//! Synthetic corpus: harmonic "bonafide" tones and "spoof" signals carrying
//! requantization, band-limiting and STFT phase-jitter traces.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_manifest, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::frontend::{write_wav, Waveform, SAMPLE_RATE};
use crate::model::derive_seed;

const PEAK: f64 = 0.9;
const NOISE_SNR_DB: f64 = 45.0;
const STFT_SIZE: usize = 512;
const STFT_HOP: usize = 128;

/// Spoofing traces to apply. `None` disables an artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactConfig {
    pub quantization_bits: Option<u32>,
    pub band_cut_hz: Option<f64>,
    pub phase_jitter_rad: Option<f64>,
    /// Blend factor in `(0, 1]` between the input and the fully processed signal.
    pub intensity: f64,
}

impl ArtifactConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quantization_bits.is_none() && self.band_cut_hz.is_none() && self.phase_jitter_rad.is_none() {
            return Err(Error::invalid("a spoof needs at least one artifact"));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::invalid(format!("intensity must lie in (0, 1], got {}", self.intensity)));
        }
        if let Some(b) = self.quantization_bits {
            if !(1..=24).contains(&b) {
                return Err(Error::invalid(format!("quantization_bits must lie in 1..=24, got {b}")));
            }
        }
        if let Some(f) = self.band_cut_hz {
            if !(f > 0.0 && f < SAMPLE_RATE as f64 / 2.0) {
                return Err(Error::invalid(format!("band_cut_hz must lie in (0, Nyquist), got {f}")));
            }
        }
        if let Some(p) = self.phase_jitter_rad {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::invalid(format!("phase_jitter_rad must be positive, got {p}")));
            }
        }
        Ok(())
    }
}

/// Uniform requantization to `2^bits` levels on `[-1, 1)`.
pub fn requantize(x: f64, bits: u32) -> f64 {
    let half = (1u64 << (bits - 1)) as f64;
    (x * half).round().clamp(-half, half - 1.0) / half
}

/// Harmonic tone with a random fundamental in `[100, 300]` Hz, 3–6
/// partials, an attack/decay envelope and broadband noise 45 dB below the
/// tone, peak-normalized to 0.9.
pub fn gen_bonafide(seed: u64, duration_s: f64) -> Result<Waveform> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration is shorter than one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.random_range(100.0..=300.0);
    let partials = rng.random_range(3..=6usize);
    let harmonics: Vec<(f64, f64, f64)> = (1..=partials)
        .map(|k| {
            let amp = rng.random_range(0.3..1.0) / k as f64;
            (k as f64 * f0, amp, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let vibrato_hz = rng.random_range(3.0..7.0);
    let vibrato_depth = rng.random_range(0.0..0.01);

    // envelope: consecutive notes, each a linear attack then exponential decay
    let mut env = vec![0.0; n];
    let mut start = 0usize;
    while start < n {
        let len = ((rng.random_range(0.25..0.8) * sr) as usize).min(n - start);
        let attack = rng.random_range(0.01..0.08) * sr;
        let tau = rng.random_range(0.1..0.5) * sr;
        let level = rng.random_range(0.5..1.0);
        for (i, e) in env[start..start + len].iter_mut().enumerate() {
            let t = i as f64;
            *e = level * (t / attack).min(1.0) * (-(t - attack).max(0.0) / tau).exp();
        }
        start += len;
    }

    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let warp = 1.0 + vibrato_depth * (2.0 * PI * vibrato_hz * t).sin();
            let s: f64 = harmonics
                .iter()
                .map(|&(f, a, p)| a * (2.0 * PI * f * t * warp + p).sin())
                .sum();
            s * env[i]
        })
        .collect();

    let power = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let noise_std = (power / 10f64.powf(NOISE_SNR_DB / 10.0)).sqrt().max(1e-9);
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    for v in &mut x {
        *v += noise.sample(&mut rng);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    x.iter_mut().for_each(|v| *v *= PEAK / peak);
    Waveform::new(x, SAMPLE_RATE)
}

fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
        .collect()
}

/// Short-time processing with weighted overlap-add resynthesis. `edit`
/// receives the frame index and the positive-frequency half spectrum.
fn stft_process(x: &[f64], mut edit: impl FnMut(usize, &mut [Complex<f64>])) -> Vec<f64> {
    let n = x.len();
    let win = sqrt_hann(STFT_SIZE);
    let mut planner = FftPlanner::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(STFT_SIZE);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(STFT_SIZE);
    let pad = STFT_SIZE;
    let total = n + 2 * pad;
    let frames = (total - STFT_SIZE) / STFT_HOP + 1;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_SIZE];
    let half = STFT_SIZE / 2;
    for f in 0..frames {
        let off = f * STFT_HOP;
        for (k, b) in buf.iter_mut().enumerate() {
            let idx = off + k;
            let v = if idx >= pad && idx < pad + n { x[idx - pad] } else { 0.0 };
            *b = Complex::new(v * win[k], 0.0);
        }
        fwd.process(&mut buf);
        edit(f, &mut buf[..=half]);
        // restore Hermitian symmetry so the inverse is real
        buf[0].im = 0.0;
        buf[half].im = 0.0;
        for k in 1..half {
            buf[STFT_SIZE - k] = buf[k].conj();
        }
        inv.process(&mut buf);
        for (k, b) in buf.iter().enumerate() {
            out[off + k] += b.re / STFT_SIZE as f64 * win[k];
            norm[off + k] += win[k] * win[k];
        }
    }
    (0..n)
        .map(|i| {
            let w = norm[i + pad];
            if w > 1e-8 {
                out[i + pad] / w
            } else {
                0.0
            }
        })
        .collect()
}

/// Applies the configured traces. Band-limiting and phase jitter share one
/// STFT pass; requantization runs last; the result is then blended with the
/// input by `intensity`.
pub fn gen_spoof(bonafide: &Waveform, a: &ArtifactConfig, seed: u64) -> Result<Waveform> {
    a.validate()?;
    let x = bonafide.samples();
    let mut y = x.to_vec();
    if a.band_cut_hz.is_some() || a.phase_jitter_rad.is_some() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bin_hz = bonafide.sample_rate() as f64 / STFT_SIZE as f64;
        let cut_bin = a.band_cut_hz.map(|f| (f / bin_hz).ceil() as usize);
        let jitter = a.phase_jitter_rad;
        y = stft_process(&y, |_, spec| {
            for (k, c) in spec.iter_mut().enumerate() {
                if cut_bin.is_some_and(|cb| k >= cb) {
                    *c = Complex::new(0.0, 0.0);
                } else if let Some(p) = jitter {
                    let d = rng.random_range(-p..=p);
                    *c *= Complex::from_polar(1.0, d);
                }
            }
        });
    }
    if let Some(bits) = a.quantization_bits {
        y.iter_mut().for_each(|v| *v = requantize(*v, bits));
    }
    let out = x.iter().zip(&y).map(|(&s, &t)| s + a.intensity * (t - s)).collect();
    Waveform::new(out, bonafide.sample_rate())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_bonafide: usize,
    pub n_spoof: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Range of the random requantization depth.
    pub quantization_bits: (u32, u32),
    pub band_cut_hz: (f64, f64),
    pub phase_jitter_rad: (f64, f64),
    pub intensity: (f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_bonafide: 200,
            n_spoof: 200,
            duration_s: 1.3,
            seed: 0,
            quantization_bits: (4, 6),
            band_cut_hz: (1500.0, 4000.0),
            phase_jitter_rad: (0.8, 2.0),
            intensity: (0.8, 1.0),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bonafide == 0 || self.n_spoof == 0 {
            return Err(Error::invalid("corpus needs at least one item of each class"));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::invalid("duration must be positive"));
        }
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !ok(self.band_cut_hz) || !ok(self.phase_jitter_rad) || !ok(self.intensity) || self.intensity.1 > 1.0 {
            return Err(Error::invalid("artifact ranges must be positive, ordered, and intensity ≤ 1"));
        }
        let (b0, b1) = self.quantization_bits;
        if b0 == 0 || b0 > b1 || b1 > 24 {
            return Err(Error::invalid("quantization bit range must be ordered within 1..=24"));
        }
        Ok(())
    }

    /// Random non-empty artifact subset for spoof `index`.
    pub fn sample_artifacts(&self, index: usize) -> ArtifactConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[2, index as u64]));
        let mask = rng.random_range(1..8u8);
        let range = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let bits = rng.random_range(self.quantization_bits.0..=self.quantization_bits.1);
        let cut = range(&mut rng, self.band_cut_hz);
        let jitter = range(&mut rng, self.phase_jitter_rad);
        let intensity = range(&mut rng, self.intensity);
        ArtifactConfig {
            quantization_bits: (mask & 1 != 0).then_some(bits),
            band_cut_hz: (mask & 2 != 0).then_some(cut),
            phase_jitter_rad: (mask & 4 != 0).then_some(jitter),
            intensity,
        }
    }

    pub fn bonafide_item(&self, index: usize) -> Result<Waveform> {
        gen_bonafide(derive_seed(self.seed, &[0, index as u64]), self.duration_s)
    }

    /// Spoof `index`, derived from a bonafide source drawn from a seed stream
    /// disjoint from the bonafide items.
    pub fn spoof_item(&self, index: usize) -> Result<Waveform> {
        let source = gen_bonafide(derive_seed(self.seed, &[1, index as u64]), self.duration_s)?;
        gen_spoof(
            &source,
            &self.sample_artifacts(index),
            derive_seed(self.seed, &[3, index as u64]),
        )
    }
}

/// Writes `wav/{bonafide,spoof}_NNNNN.wav` and `manifest.tsv` (relative
/// paths) under `out_dir`; returns the manifest path and the entries as
/// `read_manifest` would resolve them.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<(PathBuf, Vec<ManifestEntry>)> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("wav"))?;
    let mut jobs: Vec<(Label, usize)> = (0..cfg.n_bonafide).map(|i| (Label::Bonafide, i)).collect();
    jobs.extend((0..cfg.n_spoof).map(|i| (Label::Spoof, i)));
    let entries = jobs
        .par_iter()
        .map(|&(label, i)| {
            let w = match label {
                Label::Bonafide => cfg.bonafide_item(i)?,
                Label::Spoof => cfg.spoof_item(i)?,
            };
            let rel = PathBuf::from(format!("wav/{label}_{i:05}.wav"));
            write_wav(out_dir.join(&rel), &w)?;
            Ok(ManifestEntry { path: rel, label })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    let resolved = entries
        .into_iter()
        .map(|e| ManifestEntry {
            path: out_dir.join(e.path),
            label: e.label,
        })
        .collect();
    Ok((manifest, resolved))
}
