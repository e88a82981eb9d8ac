//! Mini-batch training and evaluation.
//!
//! A step builds one autodiff graph per sample (in parallel), computes the
//! batch losses outside the graphs, seeds each graph with its share of the
//! loss gradient and sums the per-sample parameter gradients in batch order,
//! so results do not depend on the number of worker threads.

mod optim;

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{cosine_lr, optimizer_step, AdamWConfig, OptimizerState};

use crate::autograd::Graph;
use crate::corpus::{read_manifest, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::frontend::{compute_fbank, patchify, read_wav, FbankConfig, PatchSet};
use crate::losses::{cross_entropy, multi_layer_dispersal, reconstruction_loss, total_loss, LossWeights};
use crate::metrics::{MetricsReport, ScoreRecord, TdcfCosts};
use crate::model::{derive_seed, mask_patches, Detector, EmbeddingBatch, SampleTrace};
use crate::params::Gradients;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Rescale the summed gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
    pub loss: LossWeights,
    /// Patch positions the reconstruction loss covers during training.
    pub reconstruction_scope: ReconstructionScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionScope {
    /// Only the patches hidden from the encoder.
    #[default]
    Masked,
    /// Every patch, visible ones included.
    All,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-6,
            lr_min: 0.0,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            optimizer: AdamWConfig::default(),
            grad_clip: None,
            loss: LossWeights::default(),
            reconstruction_scope: ReconstructionScope::Masked,
        }
    }
}

impl TrainConfig {
    /// Short CPU schedule paired with [`ModelConfig::desk`]: a larger peak
    /// rate, 15 epochs, and the reconstruction loss over every patch so that
    /// the unmasked reconstructions used at inference are trained too.
    ///
    /// [`ModelConfig::desk`]: crate::model::ModelConfig::desk
    pub fn desk() -> Self {
        Self {
            lr0: 1e-3,
            epochs: 15,
            reconstruction_scope: ReconstructionScope::All,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr0 >= self.lr_min && self.lr0.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rates must satisfy lr0 ({}) >= lr_min ({}) >= 0",
                self.lr0, self.lr_min
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip must be positive"));
            }
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// A labelled utterance with its features already extracted.
#[derive(Debug, Clone)]
pub struct Example {
    pub utt_id: String,
    pub label: Label,
    pub patches: PatchSet,
}

/// Reads and featurizes every manifest entry (in parallel, order kept).
pub fn load_examples(entries: &[ManifestEntry], frontend: &FbankConfig) -> Result<Vec<Example>> {
    entries
        .par_iter()
        .map(|e| {
            let w = read_wav(&e.path)?;
            let grid = compute_fbank(&w, frontend)?;
            Ok(Example {
                utt_id: e.utt_id(),
                label: e.label,
                patches: patchify(&grid)?,
            })
        })
        .collect()
}

pub fn load_manifest_examples(manifest: impl AsRef<Path>, frontend: &FbankConfig) -> Result<Vec<Example>> {
    load_examples(&read_manifest(manifest)?, frontend)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub total: f64,
    pub ce: f64,
    pub reconstruction: f64,
    pub dispersal: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Loss value and summed parameter gradient of one batch.
pub fn batch_gradients(
    model: &Detector,
    batch: &[&Example],
    mask_seed: u64,
    weights: &LossWeights,
    scope: ReconstructionScope,
) -> Result<(StepStats, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let rho = model.config().mask_ratio;
    let masked: Vec<PatchSet> = batch
        .iter()
        .enumerate()
        .map(|(i, ex)| mask_patches(&ex.patches, rho, derive_seed(mask_seed, &[i as u64])))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = batch.iter().map(|e| e.label.is_bonafide()).collect();

    let traced: Vec<(Graph<'_>, SampleTrace)> = masked
        .par_iter()
        .map(|p| {
            let mut g = Graph::new(model.params());
            let t = model.trace(&mut g, p)?;
            Ok((g, t))
        })
        .collect::<Result<_>>()?;

    let b = batch.len();
    let mut logits = Matrix::zeros(b, 2);
    let mut originals = Vec::with_capacity(b);
    let mut recons = Vec::with_capacity(b);
    let hidden: Vec<Vec<usize>> = masked
        .iter()
        .map(|p| match scope {
            ReconstructionScope::Masked => p.masked_indices(),
            ReconstructionScope::All => (0..p.len()).collect(),
        })
        .collect();
    for (i, (g, t)) in traced.iter().enumerate() {
        logits.row_mut(i).copy_from_slice(g.value(t.logits).as_slice());
        originals.push(masked[i].patches.select_rows(&hidden[i]));
        recons.push(g.value(t.reconstructed).select_rows(&hidden[i]));
    }
    let probes = model.config().probes();
    let layers: Vec<EmbeddingBatch> = probes
        .iter()
        .enumerate()
        .map(|(k, &layer_index)| {
            let mut features = Matrix::zeros(b, model.config().embed_dim);
            for (i, (g, t)) in traced.iter().enumerate() {
                features.row_mut(i).copy_from_slice(g.value(t.probes[k]).as_slice());
            }
            EmbeddingBatch {
                features,
                layer_index,
                labels: labels.clone(),
            }
        })
        .collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        warn!("batch of {b} holds a single class; dispersal hinge term is empty");
    }

    let ce = cross_entropy(&logits, &labels)?;
    let rec = reconstruction_loss(&originals, &recons, &labels)?;
    let disp = multi_layer_dispersal(&layers, weights.margin)?;
    let total = total_loss(ce.value, rec.value, disp.value, weights)?;

    let n = model.config().num_patches();
    let per_sample: Vec<Gradients> = traced
        .par_iter()
        .enumerate()
        .map(|(i, (g, t))| {
            let mut seeds = Vec::with_capacity(2 + t.probes.len());
            seeds.push((t.logits, Matrix::from_vec(1, 2, ce.grad.row(i).to_vec())));
            if labels[i] && weights.reconstruction != 0.0 {
                let mut full = Matrix::zeros(n, rec.grad[i].cols());
                for (r, &row) in hidden[i].iter().enumerate() {
                    for (o, v) in full.row_mut(row).iter_mut().zip(rec.grad[i].row(r)) {
                        *o = weights.reconstruction * v;
                    }
                }
                seeds.push((t.reconstructed, full));
            }
            if weights.dispersal != 0.0 {
                for (k, &v) in t.probes.iter().enumerate() {
                    let row: Vec<f64> = disp.grad[k].row(i).iter().map(|x| weights.dispersal * x).collect();
                    seeds.push((v, Matrix::from_vec(1, row.len(), row)));
                }
            }
            let mut grads = model.params().zeros_like();
            g.backward(&seeds, &mut grads);
            grads
        })
        .collect();
    drop(traced);
    let mut grads = model.params().zeros_like();
    for g in &per_sample {
        grads.add_assign(g);
    }
    let stats = StepStats {
        total,
        ce: ce.value,
        reconstruction: rec.value,
        dispersal: disp.value,
        grad_norm: grads.norm(),
        lr: 0.0,
    };
    Ok((stats, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub reconstruction: f64,
    pub dispersal: f64,
    pub grad_norm: f64,
}

impl EpochStats {
    /// One line of the training log; `dev_eer` is `nan` when there is no
    /// development set.
    pub fn log_line(&self, dev_eer: Option<f64>) -> String {
        format!(
            "epoch={} lr={:.6e} total={:.6} ce={:.6} recon={:.6} dispersal={:.6} grad_norm={:.6} dev_eer={}",
            self.epoch,
            self.lr,
            self.total,
            self.ce,
            self.reconstruction,
            self.dispersal,
            self.grad_norm,
            dev_eer.map_or("nan".to_string(), |e| format!("{e:.6}")),
        )
    }
}

/// Mutable training progress carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub total_steps: u64,
}

impl TrainState {
    pub fn new(model: &Detector, cfg: &TrainConfig, n_examples: usize) -> Self {
        let per_epoch = n_examples.div_ceil(cfg.batch_size) as u64;
        Self {
            optimizer: OptimizerState::new(model.params()),
            total_steps: per_epoch * cfg.epochs as u64,
        }
    }
}

/// Seeded batch order for `epoch` (1-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5348_5546, epoch as u64])));
    idx
}

/// One pass over `data` in shuffled mini-batches.
pub fn train_epoch(
    model: &mut Detector,
    data: &[Example],
    cfg: &TrainConfig,
    state: &mut TrainState,
    epoch: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let mut acc = EpochStats {
        epoch,
        ..Default::default()
    };
    let batches = order.chunks(cfg.batch_size).count();
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
        let mask_seed = derive_seed(cfg.seed, &[epoch as u64, b as u64]);
        let (stats, mut grads) = batch_gradients(model, &batch, mask_seed, &cfg.loss, cfg.reconstruction_scope).map_err(|e| match e {
            Error::TrainingDiverged(m) => Error::TrainingDiverged(format!("epoch {epoch}, batch {b}: {m}")),
            other => other,
        })?;
        if let Some(clip) = cfg.grad_clip {
            if stats.grad_norm > clip {
                grads.scale(clip / stats.grad_norm);
            }
        }
        let lr = cosine_lr(state.optimizer.step, state.total_steps, cfg.lr0, cfg.lr_min);
        optimizer_step(model.params_mut(), &grads, &mut state.optimizer, lr, &cfg.optimizer)
            .map_err(|e| match e {
                Error::TrainingDiverged(m) => Error::TrainingDiverged(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
        acc.total += stats.total;
        acc.ce += stats.ce;
        acc.reconstruction += stats.reconstruction;
        acc.dispersal += stats.dispersal;
        acc.grad_norm += stats.grad_norm;
        acc.lr = lr;
    }
    let k = batches as f64;
    acc.total /= k;
    acc.ce /= k;
    acc.reconstruction /= k;
    acc.dispersal /= k;
    acc.grad_norm /= k;
    Ok(acc)
}

/// Unmasked inference outputs of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub score: f64,
    /// Mean squared reconstruction error over every patch.
    pub reconstruction_error: f64,
    /// Pooled decoder features, one vector per probe layer.
    pub probe_features: Vec<Vec<f64>>,
    /// Discrepancy weights over all patches.
    pub weights: Vec<f64>,
    /// Mean absolute reconstruction error per patch.
    pub patch_errors: Vec<f64>,
}

/// A [`Diagnosis`] tagged with the utterance it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Inspection {
    pub utt_id: String,
    pub label: Label,
    pub diagnosis: Diagnosis,
}

const INFER_CHUNK: usize = 32;

/// Unmasked forward pass over unlabeled patch sets, in chunks.
pub fn diagnose(model: &Detector, sets: &[PatchSet]) -> Result<Vec<Diagnosis>> {
    let mut out = Vec::with_capacity(sets.len());
    for chunk in sets.chunks(INFER_CHUNK) {
        let chunk = model.apply_mode(chunk, crate::model::Mode::Infer)?;
        let fwd = model.forward_patches(&chunk, None)?;
        let scores = fwd.scores();
        for (i, p) in chunk.iter().enumerate() {
            let x = &p.patches;
            let y = &fwd.reconstructed[i].patches;
            let mse = x
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / x.len() as f64;
            out.push(Diagnosis {
                score: scores[i],
                reconstruction_error: mse,
                probe_features: fwd
                    .probe_embeddings
                    .iter()
                    .map(|e| e.features.row(i).to_vec())
                    .collect(),
                weights: fwd.discrepancy_weights[i].clone(),
                patch_errors: fwd.patch_errors[i].clone(),
            });
        }
    }
    Ok(out)
}

pub fn inspect(model: &Detector, data: &[Example]) -> Result<Vec<Inspection>> {
    let sets: Vec<PatchSet> = data.iter().map(|e| e.patches.clone()).collect();
    Ok(diagnose(model, &sets)?
        .into_iter()
        .zip(data)
        .map(|(diagnosis, e)| Inspection {
            utt_id: e.utt_id.clone(),
            label: e.label,
            diagnosis,
        })
        .collect())
}

/// Scores every example and computes the metrics bundle. Accuracy uses the
/// decision threshold 0 (the logits' own argmax).
pub fn evaluate(model: &Detector, data: &[Example], costs: &TdcfCosts) -> Result<(Vec<ScoreRecord>, MetricsReport)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let records: Vec<ScoreRecord> = inspect(model, data)?
        .into_iter()
        .map(|i| ScoreRecord::new(i.utt_id, i.label, i.diagnosis.score))
        .collect();
    let report = MetricsReport::compute(&records, costs, 0.0)?;
    Ok((records, report))
}

/// What [`fit`] reports after every epoch.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub stats: EpochStats,
    pub dev_eer: Option<f64>,
    /// Whether this epoch produced the best development EER so far (always
    /// true without a development set).
    pub improved: bool,
}

impl EpochReport {
    pub fn log_line(&self) -> String {
        self.stats.log_line(self.dev_eer)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochReport>,
    /// Parameters of the best epoch (lowest dev EER, ties to the earlier epoch;
    /// the last epoch without a development set).
    pub best: Detector,
    pub best_epoch: usize,
}

/// Full training run. `on_epoch` sees every epoch report with the current
/// model and can persist it; an error from it aborts training.
pub fn fit(
    model: &mut Detector,
    train: &[Example],
    dev: Option<&[Example]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Detector) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut state = TrainState::new(model, cfg, train.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(model, train, cfg, &mut state, epoch)?;
        let dev_eer = match dev {
            Some(d) => Some(evaluate(model, d, &TdcfCosts::default())?.1.eer),
            None => None,
        };
        let improved = dev_eer.is_none_or(|e| e < best.2);
        if improved {
            best = (model.clone(), epoch, dev_eer.unwrap_or(f64::NEG_INFINITY));
        }
        let report = EpochReport {
            stats,
            dev_eer,
            improved,
        };
        on_epoch(&report, model)?;
        history.push(report);
    }
    Ok(FitOutcome {
        history,
        best: best.0,
        best_epoch: best.1,
    })
}
