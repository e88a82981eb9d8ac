//! Generic transformer building blocks on top of the autodiff tape.

use rand::Rng;

use crate::autograd::{Graph, Groups, Var};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        pb.scoped(name, |pb| Self {
            weight: pb.xavier("weight", fan_in, fan_out),
            bias: Some(pb.constant("bias", 1, fan_out, 0.0)),
        })
    }

    pub fn without_bias<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        pb.scoped(name, |pb| Self {
            weight: pb.xavier("weight", fan_in, fan_out),
            bias: None,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| Self {
            gamma: pb.constant("gamma", 1, dim, 1.0),
            beta: pb.constant("beta", 1, dim, 0.0),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        pb.scoped(name, |pb| Self {
            query: Linear::new(pb, "query", dim, dim),
            key: Linear::new(pb, "key", dim, dim),
            value: Linear::new(pb, "value", dim, dim),
            output: Linear::new(pb, "output", dim, dim),
            heads,
        })
    }

    /// Self-attention restricted to each row group.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, groups: Groups) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let a = g.attention(q, k, v, self.heads, groups);
        self.output.forward(g, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize, hidden: usize) -> Self {
        pb.scoped(name, |pb| Self {
            up: Linear::new(pb, "up", dim, hidden),
            down: Linear::new(pb, "down", hidden, dim),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm block: `x + attn(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn_norm: Norm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Self {
        pb.scoped(name, |pb| Self {
            attn_norm: Norm::new(pb, "attn_norm", dim),
            attn: MultiHeadAttention::new(pb, "attn", dim, heads),
            ffn_norm: Norm::new(pb, "ffn_norm", dim),
            ffn: FeedForward::new(pb, "ffn", dim, dim * ffn_mult),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, groups: Groups) -> Var {
        let h = self.attn_norm.forward(g, x);
        let h = self.attn.forward(g, h, groups);
        let x = g.add(x, h);
        let h = self.ffn_norm.forward(g, x);
        let h = self.ffn.forward(g, h);
        g.add(x, h)
    }
}

/// One group holding every row, i.e. ordinary full self-attention.
pub fn full_group(n: usize) -> Groups {
    std::sync::Arc::new(vec![(0..n).collect()])
}

/// Fixed 2-D sine/cosine position code for a `bands × segments` patch grid.
///
/// The first half of the channels encodes the band index, the second half
/// the segment index; each half alternates sin/cos blocks over geometric
/// frequencies as in the usual 1-D transformer code.
pub fn sincos_2d(bands: usize, segments: usize, dim: usize) -> Matrix {
    assert!(dim % 4 == 0, "position code width must be divisible by 4");
    let half = dim / 2;
    let quarter = half / 2;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10_000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Matrix::zeros(bands * segments, dim);
    for f in 0..bands {
        for t in 0..segments {
            let row = out.row_mut(f * segments + t);
            for (i, w) in freqs.iter().enumerate() {
                row[i] = (f as f64 * w).sin();
                row[quarter + i] = (f as f64 * w).cos();
                row[half + i] = (t as f64 * w).sin();
                row[half + quarter + i] = (t as f64 * w).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_code_rows_are_distinct() {
        let p = sincos_2d(4, 6, 16);
        for a in 0..p.rows() {
            for b in a + 1..p.rows() {
                let d: f64 = p.row(a).iter().zip(p.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d > 1e-6, "rows {a} and {b} coincide");
            }
        }
        // origin: all sines zero, all cosines one
        assert!(p.row(0).iter().enumerate().all(|(i, &v)| v == if (i / 4) % 2 == 0 { 0.0 } else { 1.0 }));
    }
}
