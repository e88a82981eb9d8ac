#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofscope::autograd::{Graph, Var};
use spoofscope::params::{ParamId, ParamStore};
use spoofscope::tensor::Matrix;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. A central difference at
/// `FD_STEP` carries ~1e-10 of rounding noise on O(10) outputs, so
/// derivatives below the floor (e.g. attention key biases, which are exactly
/// zero) are judged by an absolute error of `1e-5 · REL_FLOOR` instead.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn rand_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Checks `d/dθ Σ(W ⊙ f(θ))` for a random `W` against central differences
/// at `coords` random coordinates drawn from `ids`. Returns the worst
/// relative error and the number of coordinates checked.
pub fn check_param_grads(
    store: &ParamStore,
    ids: &[ParamId],
    coords: usize,
    seed: u64,
    build: impl Fn(&mut Graph<'_>) -> Var,
) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (weights, analytic) = {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        let shape = g.value(out).shape();
        let w = rand_matrix(shape.0, shape.1, 1.0, &mut rng);
        let mut grads = store.zeros_like();
        g.backward(&[(out, w.clone())], &mut grads);
        (w, grads)
    };
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new(s);
        let out = build(&mut g);
        g.value(out)
            .as_slice()
            .iter()
            .zip(weights.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut worst = 0.0f64;
    let mut perturbed = store.clone();
    for _ in 0..coords {
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..store.get(id).len());
        let orig = store.get(id).as_slice()[k];
        perturbed.get_mut(id).as_mut_slice()[k] = orig + FD_STEP;
        let up = eval(&perturbed);
        perturbed.get_mut(id).as_mut_slice()[k] = orig - FD_STEP;
        let down = eval(&perturbed);
        perturbed.get_mut(id).as_mut_slice()[k] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.get(id).as_slice()[k], numeric));
    }
    (worst, coords)
}

/// Same check for a plain function of a flat input vector with a
/// closed-form gradient.
pub fn check_fn_grad(x: &[f64], grad: &[f64], coords: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for _ in 0..coords {
        let k = rng.random_range(0..x.len());
        xp[k] = x[k] + FD_STEP;
        let up = f(&xp);
        xp[k] = x[k] - FD_STEP;
        let down = f(&xp);
        xp[k] = x[k];
        worst = worst.max(rel_err(grad[k], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// All parameter ids of a store whose name starts with `prefix`.
pub fn ids_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .map(|(id, _, _)| id)
        .collect()
}

pub mod suite {
    use super::*;
    use spoofscope::losses::{cross_entropy, dispersal_loss, multi_layer_dispersal, reconstruction_loss};
    use spoofscope::model::{
        ClassifierHead, DiscrepancyAttention, EmbeddingBatch, GatedFusion, GlobalLocalBlock, GlobalStream,
        LocalStream, SubbandGroups, TransformerBlock,
    };
    use spoofscope::params::ParamBuilder;

    pub const COORDS: usize = 24;
    const D: usize = 8;
    const HEADS: usize = 2;
    // 4 × 4 token grid
    const BANDS: usize = 4;
    const SEGMENTS: usize = 4;
    const N: usize = BANDS * SEGMENTS;

    /// One named result per trainable op: worst relative error, coordinates.
    pub type Outcome = (&'static str, f64, usize);

    fn store_with<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> T) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = f(&mut ParamBuilder::new(&mut store, &mut rng));
        (store, t)
    }

    /// Perturbs every parameter away from its (often constant) initial value
    /// so that LayerNorm gains, biases and gates are exercised generically.
    fn jitter(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in store.values_mut() {
            for v in m.as_mut_slice() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }

    fn input(seed: u64, rows: usize, cols: usize) -> Matrix {
        rand_matrix(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn encoder_block() -> Outcome {
        let (mut store, block) = store_with(1, |pb| TransformerBlock::new(pb, "enc", D, HEADS, 2));
        jitter(&mut store, 2);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let x = input(3, 7, D);
        let (e, n) = check_param_grads(&store, &ids, COORDS, 4, |g| {
            let xv = g.input(x.clone());
            block.forward(g, xv, spoofscope::model::full_group(7))
        });
        ("encoder block", e, n)
    }

    pub fn decoder_block() -> Outcome {
        let (mut store, (block, fusion)) = store_with(5, |pb| {
            (
                TransformerBlock::new(pb, "dec", D, HEADS, 2),
                GlobalLocalBlock::new(pb, "perc", D, HEADS, 2, 3, 1.0),
            )
        });
        jitter(&mut store, 6);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let groups = SubbandGroups::new(BANDS, SEGMENTS).unwrap();
        let x = input(7, N, D);
        let (e, n) = check_param_grads(&store, &ids, COORDS, 8, |g| {
            let xv = g.input(x.clone());
            let h = block.forward(g, xv, spoofscope::model::full_group(N));
            fusion.forward(g, h, &groups).unwrap()
        });
        ("decoder block (transformer + dual-stream)", e, n)
    }

    pub fn global_stream() -> Outcome {
        let (mut store, gs) = store_with(9, |pb| GlobalStream::new(pb, "global", D, HEADS, 2));
        jitter(&mut store, 10);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let groups = SubbandGroups::new(BANDS, SEGMENTS).unwrap();
        let x = input(11, N, D);
        let (e, n) = check_param_grads(&store, &ids, COORDS, 12, |g| {
            let xv = g.input(x.clone());
            gs.forward(g, xv, &groups).unwrap()
        });
        ("global (wavelet) stream", e, n)
    }

    pub fn local_stream() -> Outcome {
        let (mut store, ls) = store_with(13, |pb| LocalStream::new(pb, "local", D, 3, 0.7));
        jitter(&mut store, 14);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let x = input(15, N, D);
        let (e, n) = check_param_grads(&store, &ids, COORDS, 16, |g| {
            let xv = g.input(x.clone());
            ls.forward(g, xv)
        });
        ("local (conv adapter) stream", e, n)
    }

    /// Gate weights plus both stream inputs, registered as parameters so
    /// their gradients are checked too.
    pub fn gated_fusion() -> Outcome {
        let (mut store, (fusion, a, b)) = store_with(17, |pb| {
            (
                GatedFusion::new(pb, "fusion", D),
                pb.normal("stream_a", N, D, 1.0),
                pb.normal("stream_b", N, D, 1.0),
            )
        });
        jitter(&mut store, 18);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let (e, n) = check_param_grads(&store, &ids, COORDS, 19, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            fusion.forward(g, av, bv).unwrap()
        });
        ("gated fusion", e, n)
    }

    /// LayerNorm parameters plus the reconstruction and encoder inputs.
    pub fn discrepancy_attention() -> Outcome {
        let (mut store, (att, rec, enc)) = store_with(20, |pb| {
            (
                DiscrepancyAttention::new(pb, "disc", D),
                pb.normal("reconstructed", 9, 12, 1.0),
                pb.normal("encoded", 9, D, 1.0),
            )
        });
        jitter(&mut store, 21);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let original = input(22, 9, 12);
        let (e, n) = check_param_grads(&store, &ids, COORDS, 23, |g| {
            let (r, en) = (g.param(rec), g.param(enc));
            att.forward(g, &original, r, en).unwrap().features
        });
        ("discrepancy attention", e, n)
    }

    pub fn classifier_head() -> Outcome {
        let (mut store, head) = store_with(24, |pb| ClassifierHead::new(pb, "head", D));
        jitter(&mut store, 25);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let x = input(26, 11, D);
        let (e, n) = check_param_grads(&store, &ids, COORDS, 27, |g| {
            let xv = g.input(x.clone());
            head.forward(g, xv)
        });
        ("classifier head", e, n)
    }

    pub fn cross_entropy_grad() -> Outcome {
        let logits = input(28, 6, 2).map(|v| 3.0 * v);
        let labels = [true, false, false, true, true, false];
        let grad = cross_entropy(&logits, &labels).unwrap().grad;
        let e = check_fn_grad(logits.as_slice(), grad.as_slice(), COORDS, 29, |x| {
            cross_entropy(&Matrix::from_vec(6, 2, x.to_vec()), &labels).unwrap().value
        });
        ("cross entropy", e, COORDS)
    }

    pub fn reconstruction_grad() -> Outcome {
        let labels = [true, false, true];
        let originals: Vec<Matrix> = (0..3).map(|i| input(30 + i, 4, 5)).collect();
        let recons: Vec<Matrix> = (0..3).map(|i| input(40 + i, 4, 5)).collect();
        let flat: Vec<f64> = recons.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let grad: Vec<f64> = reconstruction_loss(&originals, &recons, &labels)
            .unwrap()
            .grad
            .iter()
            .flat_map(|m| m.as_slice().to_vec())
            .collect();
        let e = check_fn_grad(&flat, &grad, COORDS, 31, |x| {
            let r: Vec<Matrix> = x.chunks(20).map(|c| Matrix::from_vec(4, 5, c.to_vec())).collect();
            reconstruction_loss(&originals, &r, &labels).unwrap().value
        });
        ("bonafide reconstruction loss", e, COORDS)
    }

    fn embeddings(seed: u64) -> EmbeddingBatch {
        EmbeddingBatch {
            features: input(seed, 6, 3),
            layer_index: 1,
            labels: vec![true, true, false, true, false, false],
        }
    }

    pub fn dispersal_grad() -> Outcome {
        // margin 1.5 puts some bonafide–spoof pairs inside the hinge
        let b = embeddings(50);
        let grad = dispersal_loss(&b, 1.5).unwrap().grad;
        let e = check_fn_grad(b.features.as_slice(), grad.as_slice(), COORDS, 51, |x| {
            let bb = EmbeddingBatch {
                features: Matrix::from_vec(6, 3, x.to_vec()),
                ..b.clone()
            };
            dispersal_loss(&bb, 1.5).unwrap().value
        });
        ("dispersal loss", e, COORDS)
    }

    pub fn multi_layer_grad() -> Outcome {
        let layers: Vec<EmbeddingBatch> = (0..3).map(|i| embeddings(60 + i)).collect();
        let flat: Vec<f64> = layers.iter().flat_map(|l| l.features.as_slice().to_vec()).collect();
        let grad: Vec<f64> = multi_layer_dispersal(&layers, 1.5)
            .unwrap()
            .grad
            .iter()
            .flat_map(|m| m.as_slice().to_vec())
            .collect();
        let e = check_fn_grad(&flat, &grad, COORDS, 61, |x| {
            let ls: Vec<EmbeddingBatch> = x
                .chunks(18)
                .zip(&layers)
                .map(|(c, l)| EmbeddingBatch {
                    features: Matrix::from_vec(6, 3, c.to_vec()),
                    ..l.clone()
                })
                .collect();
            multi_layer_dispersal(&ls, 1.5).unwrap().value
        });
        ("multi-layer dispersal loss", e, COORDS)
    }

    pub fn all() -> Vec<Outcome> {
        vec![
            encoder_block(),
            decoder_block(),
            global_stream(),
            local_stream(),
            gated_fusion(),
            discrepancy_attention(),
            classifier_head(),
            cross_entropy_grad(),
            reconstruction_grad(),
            dispersal_grad(),
            multi_layer_grad(),
        ]
    }
}

/// Brute-force metric oracles: every operating point is counted directly.
pub mod oracle {
    use spoofscope::corpus::Label;
    use spoofscope::metrics::{ScoreRecord, TdcfCosts};

    /// Direct counting at every candidate threshold: bonafide accepted when
    /// `score ≥ t`.
    pub fn operating_points(records: &[ScoreRecord]) -> Vec<(f64, f64, f64)> {
        let mut ts: Vec<f64> = records.iter().map(|r| r.score).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.push(f64::INFINITY);
        let nb = records.iter().filter(|r| r.label == Label::Bonafide).count() as f64;
        let ns = records.len() as f64 - nb;
        ts.iter()
            .map(|&t| {
                let miss = records.iter().filter(|r| r.label == Label::Bonafide && r.score < t).count() as f64 / nb;
                let fa = records.iter().filter(|r| r.label == Label::Spoof && r.score >= t).count() as f64 / ns;
                (t, fa, miss)
            })
            .collect()
    }

    /// Intersection of the operating-point polyline with FAR = FRR, taken on
    /// the first segment that reaches or crosses it.
    pub fn eer(records: &[ScoreRecord]) -> f64 {
        let pts = operating_points(records);
        for (k, &(_, fa, miss)) in pts.iter().enumerate() {
            if fa <= miss {
                if k == 0 || fa == miss {
                    return fa;
                }
                let (_, fa0, miss0) = pts[k - 1];
                let lam = (fa0 - miss0) / ((fa0 - miss0) - (fa - miss));
                return miss0 + lam * (miss - miss0);
            }
        }
        unreachable!("the +inf threshold rejects everything")
    }

    pub fn min_tdcf(records: &[ScoreRecord], c: &TdcfCosts) -> f64 {
        let c1 = c.p_target * (c.c_miss_cm - c.c_miss_asv * c.asv_miss) - c.p_nontarget * c.c_fa_asv * c.asv_fa;
        let c2 = c.c_fa_cm * c.p_spoof * (1.0 - c.asv_spoof_miss);
        let mut best = f64::INFINITY;
        // accept-everything point included explicitly
        let mut pts = operating_points(records);
        pts.push((f64::NEG_INFINITY, 1.0, 0.0));
        for (_, fa, miss) in pts {
            best = best.min((c1 * miss + c2 * fa) / c1.min(c2));
        }
        best
    }
}
