use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FbankConfig, PATCH_DIM, PATCH_SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Hidden width of every feed-forward block, as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    pub mask_ratio: f64,
    /// Fixed output scale of the local (depthwise-conv adapter) stream.
    pub local_scale: f64,
    pub local_kernel: usize,
    /// 1-based decoder layers whose outputs feed the dispersal loss. `None`
    /// selects [`default_probe_layers`].
    pub probe_layers: Option<Vec<usize>>,
    pub frontend: FbankConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 4,
            ffn_mult: 4,
            mask_ratio: 0.8,
            local_scale: 1.0,
            local_kernel: 3,
            probe_layers: None,
            frontend: FbankConfig::default(),
        }
    }
}

/// Quarter points of the decoder stack: `{D/4, D/2, 3D/4, D}` when `D` is a
/// multiple of four, otherwise the ceilings of those fractions, deduplicated.
pub fn default_probe_layers(decoder_layers: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=4).map(|k| (k * decoder_layers).div_ceil(4)).collect();
    out.dedup();
    out.retain(|&l| l >= 1);
    out
}

impl ModelConfig {
    /// Full-size architecture on 1.28 s feature grids (128 frames, an 8×8
    /// tile grid), sized for CPU training runs of a few minutes.
    pub fn desk() -> Self {
        Self {
            frontend: FbankConfig {
                target_frames: 128,
                ..FbankConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn probes(&self) -> Vec<usize> {
        self.probe_layers
            .clone()
            .unwrap_or_else(|| default_probe_layers(self.decoder_layers))
    }

    pub fn patch_dim(&self) -> usize {
        PATCH_DIM
    }

    /// `(bands, segments)` of the patch grid.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.frontend.mel_bins / PATCH_SIDE,
            self.frontend.target_frames / PATCH_SIDE,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (f, t) = self.grid();
        f * t
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.embed_dim / 4
    }

    pub fn visible_count(&self) -> usize {
        visible_count(self.num_patches(), self.mask_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        let d = self.embed_dim;
        if d == 0 || self.heads == 0 || d % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {d} must be a positive multiple of heads {}",
                self.heads
            )));
        }
        if d % 4 != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {d} must be divisible by 4 (2-D position code, adapter bottleneck)"
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::invalid("encoder and decoder need at least one layer"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::invalid("ffn_mult must be positive"));
        }
        if self.local_kernel % 2 == 0 {
            return Err(Error::invalid("local_kernel must be odd"));
        }
        if !self.local_scale.is_finite() {
            return Err(Error::invalid("local_scale must be finite"));
        }
        let probes = self.probes();
        if probes.is_empty() || probes.iter().any(|&l| l == 0 || l > self.decoder_layers) {
            return Err(Error::invalid(format!(
                "probe layers {probes:?} must be a non-empty subset of 1..={}",
                self.decoder_layers
            )));
        }
        let (f, t) = self.grid();
        if f % 2 != 0 || t % 2 != 0 {
            return Err(Error::invalid(format!(
                "patch grid {f}x{t} must have even sides for the wavelet stream"
            )));
        }
        Ok(())
    }
}

/// Patches left visible when masking `n` patches at ratio `rho`.
pub fn visible_count(n: usize, rho: f64) -> usize {
    n - (rho * n as f64).round() as usize
}
