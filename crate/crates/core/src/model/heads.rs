//! Discrepancy-driven reweighting of encoder features and the classifier
//! head that consumes them.

use rand::Rng;

use super::layers::{Linear, Norm};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Matrix;

/// Softmax over per-patch reconstruction discrepancies, used to emphasize
/// the encoder features of poorly reconstructed patches.
#[derive(Debug, Clone)]
pub struct DiscrepancyAttention {
    pub norm: Norm,
}

/// Intermediate values of [`DiscrepancyAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct DiscrepancyOutput {
    /// `n × 1` mean absolute error per patch.
    pub errors: Var,
    /// `n × 1`, non-negative, sums to one.
    pub weights: Var,
    pub features: Var,
}

impl DiscrepancyAttention {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Self {
        Self {
            norm: Norm::new(pb, &format!("{name}.norm"), dim),
        }
    }

    /// `original` and `reconstructed` hold the same patches (rows) as `encoded`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        original: &Matrix,
        reconstructed: Var,
        encoded: Var,
    ) -> Result<DiscrepancyOutput> {
        let (rv, ev) = (g.value(reconstructed), g.value(encoded));
        if rv.shape() != original.shape() || rv.rows() != ev.rows() {
            return Err(Error::invalid(format!(
                "patch sets disagree: original {:?}, reconstructed {:?}, encoded {:?}",
                original.shape(),
                rv.shape(),
                ev.shape()
            )));
        }
        let errors = g.mean_abs_diff(reconstructed, original.clone());
        let weights = g.softmax(errors);
        let scaled = g.mul_col(encoded, weights);
        let sum = g.add(encoded, scaled);
        let features = self.norm.forward(g, sum);
        Ok(DiscrepancyOutput {
            errors,
            weights,
            features,
        })
    }
}

/// Learned-query attention pooling followed by a two-layer MLP.
/// Logit column 0 is spoof, column 1 is bonafide.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub query: ParamId,
    pub hidden: Linear,
    pub out: Linear,
    dim: usize,
}

impl ClassifierHead {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| Self {
            query: pb.normal("query", dim, 1, (1.0 / dim as f64).sqrt()),
            hidden: Linear::new(pb, "hidden", dim, dim),
            out: Linear::new(pb, "out", dim, 2),
            dim,
        })
    }

    /// `n × d` features to `1 × 2` logits.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let q = g.param(self.query);
        let s = g.matmul(x, q);
        let s = g.scale(s, 1.0 / (self.dim as f64).sqrt());
        let a = g.softmax(s);
        let at = g.transpose(a);
        let pooled = g.matmul(at, x);
        let h = self.hidden.forward(g, pooled);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, DiscrepancyAttention, ClassifierHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let d = DiscrepancyAttention::new(&mut pb, "disc", 4);
        let c = ClassifierHead::new(&mut pb, "head", 4);
        (store, d, c)
    }

    #[test]
    fn two_patch_weights() {
        let (store, d, _) = setup();
        let mut g = Graph::new(&store);
        let orig = Matrix::zeros(2, 3);
        let rec = g.input(Matrix::from_vec(2, 3, vec![1.0, -1.0, 1.0, 2.0, -2.0, 2.0]));
        let enc = g.input(Matrix::from_fn(2, 4, |r, c| (r + c) as f64));
        let out = d.forward(&mut g, &orig, rec, enc).unwrap();
        let w = g.value(out.weights).as_slice();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((w[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((w[0] - 0.2689).abs() < 1e-4 && (w[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn equal_errors_give_uniform_weights() {
        let (store, d, _) = setup();
        let mut g = Graph::new(&store);
        let orig = Matrix::filled(5, 3, 1.0);
        let rec = g.input(Matrix::filled(5, 3, 0.25));
        let enc = g.input(Matrix::from_fn(5, 4, |r, c| (r * c) as f64 * 0.1));
        let out = d.forward(&mut g, &orig, rec, enc).unwrap();
        assert!(g.value(out.weights).as_slice().iter().all(|&w| (w - 0.2).abs() < 1e-15));
        assert_eq!(g.value(out.features).shape(), (5, 4));
    }

    #[test]
    fn mismatched_sets_are_rejected() {
        let (store, d, _) = setup();
        let mut g = Graph::new(&store);
        let rec = g.input(Matrix::zeros(3, 3));
        let enc = g.input(Matrix::zeros(2, 4));
        assert!(d.forward(&mut g, &Matrix::zeros(3, 3), rec, enc).is_err());
        assert!(d.forward(&mut g, &Matrix::zeros(2, 3), rec, enc).is_err());
    }

    #[test]
    fn head_shape_and_determinism() {
        let (store, _, c) = setup();
        let x = Matrix::from_fn(7, 4, |r, col| ((r * 3 + col) as f64).sin());
        let run = || {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let y = c.forward(&mut g, xv);
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), (1, 2));
        assert_eq!(a, run());
    }
}
