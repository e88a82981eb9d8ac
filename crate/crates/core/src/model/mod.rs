//! Masked reconstruction detector.
//!
//! Per utterance: the visible patches are embedded and encoded; the decoder
//! re-inserts a shared mask token at hidden positions and runs `D` rounds of
//! (transformer block, dual-stream block); a linear head reconstructs every
//! patch. Per-patch reconstruction errors of the encoded patches reweight the
//! encoder output, which the classifier head pools into two logits.

mod checkpoint;
mod config;
mod heads;
mod layers;
mod masking;
mod perception;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{default_probe_layers, visible_count, ModelConfig};
pub use heads::{ClassifierHead, DiscrepancyAttention, DiscrepancyOutput};
pub use layers::{full_group, sincos_2d, FeedForward, Linear, MultiHeadAttention, Norm, TransformerBlock};
pub use masking::{derive_seed, mask_patches};
pub use perception::{GatedFusion, GlobalLocalBlock, GlobalStream, LocalStream, SubbandGroups};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::frontend::{compute_fbank, patchify, PatchSet, Waveform, PATCH_DIM};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub norm: Norm,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub perception: Vec<GlobalLocalBlock>,
    pub norm: Norm,
    pub project: Linear,
}

/// Typed handles into the parameter store.
#[derive(Debug, Clone)]
pub struct Layout {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discrepancy: DiscrepancyAttention,
    pub head: ClassifierHead,
}

impl Layout {
    fn build<R: rand::Rng>(cfg: &ModelConfig, pb: &mut ParamBuilder<'_, R>) -> Self {
        let d = cfg.embed_dim;
        let encoder = pb.scoped("encoder", |pb| Encoder {
            embed: Linear::new(pb, "embed", PATCH_DIM, d),
            blocks: (0..cfg.encoder_layers)
                .map(|i| TransformerBlock::new(pb, &format!("block{i}"), d, cfg.heads, cfg.ffn_mult))
                .collect(),
            norm: Norm::new(pb, "norm", d),
        });
        let decoder = pb.scoped("decoder", |pb| Decoder {
            embed: Linear::new(pb, "embed", d, d),
            mask_token: pb.normal("mask_token", 1, d, 0.02),
            blocks: (0..cfg.decoder_layers)
                .map(|i| TransformerBlock::new(pb, &format!("block{i}"), d, cfg.heads, cfg.ffn_mult))
                .collect(),
            perception: (0..cfg.decoder_layers)
                .map(|i| {
                    GlobalLocalBlock::new(
                        pb,
                        &format!("perception{i}"),
                        d,
                        cfg.heads,
                        cfg.ffn_mult,
                        cfg.local_kernel,
                        cfg.local_scale,
                    )
                })
                .collect(),
            norm: Norm::new(pb, "norm", d),
            project: Linear::new(pb, "project", d, PATCH_DIM),
        });
        let discrepancy = DiscrepancyAttention::new(pb, "discrepancy", d);
        let head = ClassifierHead::new(pb, "head", d);
        Self {
            encoder,
            decoder,
            discrepancy,
            head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Random masking; sample `i` of a batch uses `derive_seed(seed, [i])`.
    Train { seed: u64 },
    /// No masking; every patch is encoded and reweighted.
    Infer,
}

/// Handles to the interesting nodes of one sample's graph.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    /// `1 × 2`, `[spoof, bonafide]`.
    pub logits: Var,
    /// `N × 256`, every patch position.
    pub reconstructed: Var,
    /// `1 × d` mean-pooled decoder output per probe layer, in probe order.
    pub probes: Vec<Var>,
    /// Encoder output over the visible patches.
    pub encoded: Var,
    pub discrepancy: DiscrepancyOutput,
    /// Patch indices (into the full set) of the encoded rows.
    pub visible: Vec<usize>,
}

/// Per-layer, per-sample pooled decoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    /// `B × d`.
    pub features: Matrix,
    /// 1-based decoder layer.
    pub layer_index: usize,
    /// `true` = bonafide. Empty when the batch was run without labels.
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × 2`, columns `[spoof, bonafide]`.
    pub logits: Matrix,
    /// Input patches with the mask applied for this pass.
    pub inputs: Vec<PatchSet>,
    /// Reconstruction of every patch, carrying the same mask flags.
    pub reconstructed: Vec<PatchSet>,
    pub probe_embeddings: Vec<EmbeddingBatch>,
    /// Discrepancy weights over the encoded patches (`inputs[b].visible_indices()`).
    pub discrepancy_weights: Vec<Vec<f64>>,
    /// Per-patch mean absolute reconstruction error over the same patches.
    pub patch_errors: Vec<Vec<f64>>,
    /// `N_vis × d` encoder output per sample.
    pub encoded: Vec<Matrix>,
}

impl ForwardOutput {
    /// `logit(bonafide) − logit(spoof)` per sample.
    pub fn scores(&self) -> Vec<f64> {
        (0..self.logits.rows())
            .map(|r| self.logits.get(r, 1) - self.logits.get(r, 0))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    position: Matrix,
    subbands: SubbandGroups,
}

impl Detector {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::build(&config, &mut ParamBuilder::new(&mut params, &mut rng));
        Self::assemble(config, params, layout)
    }

    /// Model whose parameters are taken from `params` by name; shapes and
    /// names must match the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (id, name, value) in params.iter() {
            let slot = fresh
                .params
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter '{name}'")))?;
            if fresh.params.get(slot).shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    value.shape(),
                    fresh.params.get(slot).shape()
                )));
            }
            let _ = id;
            *fresh.params.get_mut(slot) = value.clone();
        }
        Ok(fresh)
    }

    fn assemble(config: ModelConfig, params: ParamStore, layout: Layout) -> Result<Self> {
        let (bands, segments) = config.grid();
        let position = sincos_2d(bands, segments, config.embed_dim);
        let subbands = SubbandGroups::new(bands, segments)?;
        Ok(Self {
            config,
            params,
            layout,
            position,
            subbands,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Feature extraction: fbank grid cut into patches, nothing masked.
    pub fn prepare(&self, w: &Waveform) -> Result<PatchSet> {
        let grid = compute_fbank(w, &self.config.frontend)?;
        patchify(&grid)
    }

    fn check_patches(&self, p: &PatchSet) -> Result<()> {
        let (bands, segments) = self.config.grid();
        if p.bands != bands || p.segments != segments || p.patches.shape() != (bands * segments, PATCH_DIM) {
            return Err(Error::invalid(format!(
                "patch set is {}x{} tiles, model expects {bands}x{segments}",
                p.bands, p.segments
            )));
        }
        if p.masked.len() != p.len() {
            return Err(Error::invalid("mask flags do not cover the patch set"));
        }
        Ok(())
    }

    /// Visible patches to `N_vis × d` encoder features.
    pub fn encode(&self, g: &mut Graph<'_>, p: &PatchSet) -> Result<Var> {
        self.check_patches(p)?;
        let visible = p.visible_indices();
        if visible.is_empty() {
            return Err(Error::invalid("no visible patches to encode"));
        }
        let enc = &self.layout.encoder;
        let x = g.input(p.patches.select_rows(&visible));
        let x = enc.embed.forward(g, x);
        let pos = g.input(self.position.select_rows(&visible));
        let mut x = g.add(x, pos);
        let groups = full_group(visible.len());
        for block in &enc.blocks {
            x = block.forward(g, x, groups.clone());
        }
        Ok(enc.norm.forward(g, x))
    }

    /// Encoder features at `visible` positions to the reconstruction of all
    /// `N` patches plus the pooled probe-layer features.
    pub fn decode(&self, g: &mut Graph<'_>, encoded: Var, visible: &[usize]) -> Result<(Var, Vec<Var>)> {
        let n = self.config.num_patches();
        if g.value(encoded).rows() != visible.len() {
            return Err(Error::invalid("encoded rows do not match visible positions"));
        }
        let mut seen = vec![false; n];
        for &v in visible {
            if v >= n || std::mem::replace(&mut seen[v], true) {
                return Err(Error::invalid(format!("visible position {v} is out of range or repeated")));
            }
        }
        let dec = &self.layout.decoder;
        let probes = self.config.probes();
        let x = dec.embed.forward(g, encoded);
        let token = g.param(dec.mask_token);
        let x = g.fill_rows(x, token, visible, n);
        let pos = g.input(self.position.clone());
        let mut x = g.add(x, pos);
        let groups = full_group(n);
        let mut pooled = Vec::with_capacity(probes.len());
        for (layer, (block, fusion)) in dec.blocks.iter().zip(&dec.perception).enumerate() {
            x = block.forward(g, x, groups.clone());
            x = fusion.forward(g, x, &self.subbands)?;
            if probes.contains(&(layer + 1)) {
                pooled.push((layer + 1, g.mean_rows(x)));
            }
        }
        // probe order follows the configured list
        let probe_vars = probes
            .iter()
            .map(|l| pooled.iter().find(|(k, _)| k == l).map(|(_, v)| *v).expect("probe layer visited"))
            .collect();
        let h = dec.norm.forward(g, x);
        Ok((dec.project.forward(g, h), probe_vars))
    }

    /// Builds the full per-sample graph. The mask flags of `p` decide which
    /// patches are encoded (and reweighted); pass an unmasked set for inference.
    pub fn trace(&self, g: &mut Graph<'_>, p: &PatchSet) -> Result<SampleTrace> {
        let encoded = self.encode(g, p)?;
        let visible = p.visible_indices();
        let (reconstructed, probes) = self.decode(g, encoded, &visible)?;
        let rec_vis = g.select_rows(reconstructed, &visible);
        let original = p.patches.select_rows(&visible);
        let discrepancy = self.layout.discrepancy.forward(g, &original, rec_vis, encoded)?;
        let logits = self.layout.head.forward(g, discrepancy.features);
        Ok(SampleTrace {
            logits,
            reconstructed,
            probes,
            encoded,
            discrepancy,
            visible,
        })
    }

    /// Applies the mode's masking to prepared patch sets.
    pub fn apply_mode(&self, sets: &[PatchSet], mode: Mode) -> Result<Vec<PatchSet>> {
        sets.iter()
            .enumerate()
            .map(|(i, p)| match mode {
                Mode::Train { seed } => mask_patches(p, self.config.mask_ratio, derive_seed(seed, &[i as u64])),
                Mode::Infer => {
                    let mut p = p.clone();
                    p.masked.iter_mut().for_each(|m| *m = false);
                    Ok(p)
                }
            })
            .collect()
    }

    /// Forward pass over already masked patch sets. Samples run in parallel.
    pub fn forward_patches(&self, sets: &[PatchSet], labels: Option<&[bool]>) -> Result<ForwardOutput> {
        if sets.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(l) = labels {
            if l.len() != sets.len() {
                return Err(Error::invalid("label count differs from batch size"));
            }
        }
        let per_sample: Vec<SampleValues> = sets
            .par_iter()
            .map(|p| {
                let mut g = Graph::new(&self.params);
                let t = self.trace(&mut g, p)?;
                Ok(SampleValues::collect(&g, &t, p))
            })
            .collect::<Result<_>>()?;

        let b = sets.len();
        let d = self.config.embed_dim;
        let probes = self.config.probes();
        let mut logits = Matrix::zeros(b, 2);
        let mut probe_embeddings: Vec<EmbeddingBatch> = probes
            .iter()
            .map(|&layer_index| EmbeddingBatch {
                features: Matrix::zeros(b, d),
                layer_index,
                labels: labels.map(|l| l.to_vec()).unwrap_or_default(),
            })
            .collect();
        let mut out = ForwardOutput {
            logits: Matrix::zeros(0, 2),
            inputs: sets.to_vec(),
            reconstructed: Vec::with_capacity(b),
            probe_embeddings: Vec::new(),
            discrepancy_weights: Vec::with_capacity(b),
            patch_errors: Vec::with_capacity(b),
            encoded: Vec::with_capacity(b),
        };
        for (i, s) in per_sample.into_iter().enumerate() {
            logits.row_mut(i).copy_from_slice(s.logits.as_slice());
            for (batch, probe) in probe_embeddings.iter_mut().zip(&s.probes) {
                batch.features.row_mut(i).copy_from_slice(probe.as_slice());
            }
            out.reconstructed.push(s.reconstructed);
            out.discrepancy_weights.push(s.weights);
            out.patch_errors.push(s.errors);
            out.encoded.push(s.encoded);
        }
        out.logits = logits;
        out.probe_embeddings = probe_embeddings;
        Ok(out)
    }

    /// Waveforms to every intermediate the detector exposes.
    pub fn forward_full(&self, batch: &[Waveform], labels: Option<&[bool]>, mode: Mode) -> Result<ForwardOutput> {
        if let Some(first) = batch.first() {
            if batch.iter().any(|w| w.len() != first.len()) {
                return Err(Error::invalid("batch mixes utterance durations"));
            }
        }
        let sets = batch.par_iter().map(|w| self.prepare(w)).collect::<Result<Vec<_>>>()?;
        let sets = self.apply_mode(&sets, mode)?;
        self.forward_patches(&sets, labels)
    }

    /// Unmasked scores, `logit(bonafide) − logit(spoof)`.
    pub fn score_patches(&self, sets: &[PatchSet]) -> Result<Vec<f64>> {
        let sets = self.apply_mode(sets, Mode::Infer)?;
        Ok(self.forward_patches(&sets, None)?.scores())
    }
}

struct SampleValues {
    logits: Matrix,
    reconstructed: PatchSet,
    probes: Vec<Matrix>,
    weights: Vec<f64>,
    errors: Vec<f64>,
    encoded: Matrix,
}

impl SampleValues {
    fn collect(g: &Graph<'_>, t: &SampleTrace, p: &PatchSet) -> Self {
        let mut reconstructed = p.clone();
        reconstructed.patches = g.value(t.reconstructed).clone();
        Self {
            logits: g.value(t.logits).clone(),
            reconstructed,
            probes: t.probes.iter().map(|&v| g.value(v).clone()).collect(),
            weights: g.value(t.discrepancy.weights).as_slice().to_vec(),
            errors: g.value(t.discrepancy.errors).as_slice().to_vec(),
            encoded: g.value(t.encoded).clone(),
        }
    }
}
