//! Training objectives, each returning its value together with the gradient
//! with respect to its inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the bonafide-only reconstruction loss.
    pub reconstruction: f64,
    /// Weight of the multi-layer dispersal loss.
    pub dispersal: f64,
    /// Hinge margin between bonafide and spoof embeddings.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 0.01,
            dispersal: 0.1,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.reconstruction >= 0.0 && self.reconstruction.is_finite()) {
            return Err(Error::invalid("reconstruction weight must be finite and non-negative"));
        }
        if !(self.dispersal >= 0.0 && self.dispersal.is_finite()) {
            return Err(Error::invalid("dispersal weight must be finite and non-negative"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid("margin must be positive"));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the loss inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Differentiated<G> {
    pub value: f64,
    pub grad: G,
}

/// Mean over the batch of `−log softmax(logits)[label]`; label `true` is
/// column 1 (bonafide).
pub fn cross_entropy(logits: &Matrix, labels: &[bool]) -> Result<Differentiated<Matrix>> {
    let b = logits.rows();
    if logits.cols() != 2 || labels.len() != b || b == 0 {
        return Err(Error::invalid(format!(
            "cross entropy needs B x 2 logits and B labels, got {:?} and {}",
            logits.shape(),
            labels.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::invalid("non-finite logits"));
    }
    let mut value = 0.0;
    let mut grad = Matrix::zeros(b, 2);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mx = row[0].max(row[1]);
        let lse = mx + ((row[0] - mx).exp() + (row[1] - mx).exp()).ln();
        let target = label as usize;
        value += lse - row[target];
        for c in 0..2 {
            let p = (row[c] - lse).exp();
            grad.set(r, c, (p - (c == target) as u8 as f64) / b as f64);
        }
    }
    Ok(Differentiated {
        value: value / b as f64,
        grad,
    })
}

/// Reconstruction MSE over bonafide samples only.
///
/// Each sample contributes the mean squared error over all elements of its
/// rows; the result averages those per-sample errors over the bonafide
/// samples. Spoof samples get zero gradient, and a batch without bonafide
/// samples has loss zero. Callers choose which patch rows to pass (hidden
/// ones during training, all of them for diagnostics).
pub fn reconstruction_loss(
    originals: &[Matrix],
    reconstructions: &[Matrix],
    labels: &[bool],
) -> Result<Differentiated<Vec<Matrix>>> {
    if originals.len() != reconstructions.len() || originals.len() != labels.len() {
        return Err(Error::invalid("reconstruction loss inputs differ in batch size"));
    }
    let real = labels.iter().filter(|&&l| l).count();
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(labels.len());
    for ((x, y), &label) in originals.iter().zip(reconstructions).zip(labels) {
        if x.shape() != y.shape() {
            return Err(Error::invalid(format!(
                "original {:?} and reconstruction {:?} are misaligned",
                x.shape(),
                y.shape()
            )));
        }
        let mut g = Matrix::zeros(y.rows(), y.cols());
        if label && !x.is_empty() {
            let n = x.len() as f64;
            let mut sq = 0.0;
            for ((gv, a), b) in g.as_mut_slice().iter_mut().zip(x.as_slice()).zip(y.as_slice()) {
                let diff = b - a;
                sq += diff * diff;
                *gv = 2.0 * diff / (n * real as f64);
            }
            value += sq / n;
        }
        grads.push(g);
    }
    if real > 0 {
        value /= real as f64;
    }
    Ok(Differentiated { value, grad: grads })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Adds `scale · ∂‖a − b‖/∂(a, b)` into rows `i` and `j` of `grad`.
fn add_distance_grad(grad: &mut Matrix, emb: &Matrix, i: usize, j: usize, dist: f64, scale: f64) {
    if dist == 0.0 {
        return;
    }
    for c in 0..emb.cols() {
        let g = scale * (emb.get(i, c) - emb.get(j, c)) / dist;
        grad.set(i, c, grad.get(i, c) + g);
        grad.set(j, c, grad.get(j, c) - g);
    }
}

/// Mean bonafide–bonafide distance (unordered pairs) plus mean hinge
/// `max(0, margin − distance)` over bonafide–spoof pairs. Either term is zero
/// when its pair set is empty.
pub fn dispersal_loss(batch: &EmbeddingBatch, margin: f64) -> Result<Differentiated<Matrix>> {
    let emb = &batch.features;
    if batch.labels.len() != emb.rows() {
        return Err(Error::invalid(format!(
            "{} labels for {} embeddings",
            batch.labels.len(),
            emb.rows()
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid("margin must be positive"));
    }
    let real: Vec<usize> = (0..emb.rows()).filter(|&i| batch.labels[i]).collect();
    let fake: Vec<usize> = (0..emb.rows()).filter(|&i| !batch.labels[i]).collect();
    let mut grad = Matrix::zeros(emb.rows(), emb.cols());
    let mut value = 0.0;

    let n_rr = real.len() * real.len().saturating_sub(1) / 2;
    if n_rr > 0 {
        let mut sum = 0.0;
        for (k, &i) in real.iter().enumerate() {
            for &j in &real[k + 1..] {
                let d = distance(emb.row(i), emb.row(j));
                sum += d;
                add_distance_grad(&mut grad, emb, i, j, d, 1.0 / n_rr as f64);
            }
        }
        value += sum / n_rr as f64;
    }

    let n_rf = real.len() * fake.len();
    if n_rf > 0 {
        let mut sum = 0.0;
        for &i in &real {
            for &j in &fake {
                let d = distance(emb.row(i), emb.row(j));
                if d < margin {
                    sum += margin - d;
                    add_distance_grad(&mut grad, emb, i, j, d, -1.0 / n_rf as f64);
                }
            }
        }
        value += sum / n_rf as f64;
    }
    Ok(Differentiated { value, grad })
}

/// Mean of [`dispersal_loss`] over probe layers; one gradient per layer.
pub fn multi_layer_dispersal(layers: &[EmbeddingBatch], margin: f64) -> Result<Differentiated<Vec<Matrix>>> {
    if layers.is_empty() {
        return Err(Error::invalid("no probe layers to aggregate"));
    }
    let k = layers.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut d = dispersal_loss(layer, margin)?;
        value += d.value;
        d.grad.scale_assign(1.0 / k);
        grads.push(d.grad);
    }
    Ok(Differentiated {
        value: value / k,
        grad: grads,
    })
}

/// `ce + λ1·reconstruction + λ2·dispersal`.
pub fn total_loss(ce: f64, reconstruction: f64, dispersal: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("cross entropy", ce), ("reconstruction", reconstruction), ("dispersal", dispersal)] {
        if !v.is_finite() {
            return Err(Error::TrainingDiverged(format!("{name} loss is {v}")));
        }
    }
    let total = ce + w.reconstruction * reconstruction + w.dispersal * dispersal;
    if !total.is_finite() {
        return Err(Error::TrainingDiverged(format!("total loss is {total}")));
    }
    Ok(total)
}
