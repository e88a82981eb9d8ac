//! Dual-stream block applied after every decoder layer.
//!
//! The global stream works in the wavelet domain: the token sequence is laid
//! out on its `bands × segments` patch grid, split into four Haar subbands,
//! attended across the subband axis and then across positions within each
//! subband, refined by a feed-forward layer and transformed back. The local
//! stream is a depthwise-separable 1-D conv adapter along the token axis.
//! A per-token sigmoid gate blends the two.

use std::sync::Arc;

use rand::Rng;

use super::layers::{FeedForward, Linear, MultiHeadAttention, Norm};
use crate::autograd::{Graph, Groups, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};

/// Attention groups for a stacked `[LL; LH; HL; HH]` subband layout.
#[derive(Debug, Clone)]
pub struct SubbandGroups {
    /// One 4-token group per spatial location: the same cell in every subband.
    pub cross_band: Groups,
    /// One group per subband containing all of its cells.
    pub within_band: Groups,
    pub grid: (usize, usize),
}

impl SubbandGroups {
    pub fn new(bands: usize, segments: usize) -> Result<Self> {
        if bands % 2 != 0 || segments % 2 != 0 || bands == 0 || segments == 0 {
            return Err(Error::invalid(format!(
                "wavelet stream needs an even token grid, got {bands}x{segments}"
            )));
        }
        let m = (bands / 2) * (segments / 2);
        Ok(Self {
            cross_band: Arc::new((0..m).map(|s| (0..4).map(|k| k * m + s).collect()).collect()),
            within_band: Arc::new((0..4).map(|k| (k * m..(k + 1) * m).collect()).collect()),
            grid: (bands, segments),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GlobalStream {
    pub cross_norm: Norm,
    pub cross_band: MultiHeadAttention,
    pub within_norm: Norm,
    pub within_band: MultiHeadAttention,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

impl GlobalStream {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Self {
        pb.scoped(name, |pb| Self {
            cross_norm: Norm::new(pb, "cross_norm", dim),
            cross_band: MultiHeadAttention::new(pb, "cross_band", dim, heads),
            within_norm: Norm::new(pb, "within_norm", dim),
            within_band: MultiHeadAttention::new(pb, "within_band", dim, heads),
            ffn_norm: Norm::new(pb, "ffn_norm", dim),
            ffn: FeedForward::new(pb, "ffn", dim, dim * ffn_mult),
        })
    }

    /// Residual branches are pre-normalized, so zeroing the attention and
    /// feed-forward output projections reduces the stream to IDWT∘DWT.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, groups: &SubbandGroups) -> Result<Var> {
        let (bands, segments) = groups.grid;
        if g.value(x).rows() != bands * segments {
            return Err(Error::invalid(format!(
                "{} tokens do not fill a {bands}x{segments} grid",
                g.value(x).rows()
            )));
        }
        let s = g.dwt(x, bands, segments);
        let h = self.cross_norm.forward(g, s);
        let h = self.cross_band.forward(g, h, groups.cross_band.clone());
        let s = g.add(s, h);
        let h = self.within_norm.forward(g, s);
        let h = self.within_band.forward(g, h, groups.within_band.clone());
        let s = g.add(s, h);
        let h = self.ffn_norm.forward(g, s);
        let h = self.ffn.forward(g, h);
        let s = g.add(s, h);
        Ok(g.idwt(s, bands, segments))
    }
}

/// `scale · GELU(up(dwconv(down(x))))`.
#[derive(Debug, Clone)]
pub struct LocalStream {
    pub down: Linear,
    pub kernel: ParamId,
    pub conv_bias: ParamId,
    pub up: Linear,
    pub scale: f64,
}

impl LocalStream {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        dim: usize,
        kernel: usize,
        scale: f64,
    ) -> Self {
        let hidden = dim / 4;
        pb.scoped(name, |pb| Self {
            down: Linear::new(pb, "down", dim, hidden),
            kernel: pb.normal("dwconv.kernel", kernel, hidden, (1.0 / kernel as f64).sqrt()),
            conv_bias: pb.constant("dwconv.bias", 1, hidden, 0.0),
            up: Linear::new(pb, "up", hidden, dim),
            scale,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.down.forward(g, x);
        let (k, b) = (g.param(self.kernel), g.param(self.conv_bias));
        let h = g.depthwise_conv(h, k, b);
        let h = self.up.forward(g, h);
        let h = g.gelu(h);
        g.scale(h, self.scale)
    }
}

/// `α = σ([g; l] · W)` per token; output `α·g + (1 − α)·l`.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub weight: ParamId,
}

impl GatedFusion {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| Self {
            weight: pb.xavier("weight", 2 * dim, 1),
        })
    }

    pub fn gate(&self, g: &mut Graph<'_>, global: Var, local: Var) -> Var {
        let cat = g.concat_cols(global, local);
        let w = g.param(self.weight);
        let logit = g.matmul(cat, w);
        g.sigmoid(logit)
    }

    pub fn forward(&self, g: &mut Graph<'_>, global: Var, local: Var) -> Result<Var> {
        if g.value(global).shape() != g.value(local).shape() {
            return Err(Error::invalid(format!(
                "stream shapes differ: {:?} vs {:?}",
                g.value(global).shape(),
                g.value(local).shape()
            )));
        }
        let alpha = self.gate(g, global, local);
        Ok(g.mix(alpha, global, local))
    }
}

#[derive(Debug, Clone)]
pub struct GlobalLocalBlock {
    pub global: GlobalStream,
    pub local: LocalStream,
    pub fusion: GatedFusion,
}

impl GlobalLocalBlock {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        kernel: usize,
        local_scale: f64,
    ) -> Self {
        pb.scoped(name, |pb| Self {
            global: GlobalStream::new(pb, "global", dim, heads, ffn_mult),
            local: LocalStream::new(pb, "local", dim, kernel, local_scale),
            fusion: GatedFusion::new(pb, "fusion", dim),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, groups: &SubbandGroups) -> Result<Var> {
        let gg = self.global.forward(g, x, groups)?;
        let gl = self.local.forward(g, x);
        self.fusion.forward(g, gg, gl)
    }
}
