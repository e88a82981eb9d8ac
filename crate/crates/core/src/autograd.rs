//! Reverse-mode differentiation over a per-sample tape of matrix ops.
//!
//! A [`Graph`] borrows the parameter store, records every op together with
//! whatever the backward pass needs, and replays the tape in reverse in
//! [`Graph::backward`]. Graphs are cheap and single-use: one is built per
//! sample per step, so samples can be differentiated on separate threads.

use std::sync::Arc;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_acc, Matrix};
use crate::wavelet;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row-index groups; attention is computed independently inside each group.
pub type Groups = Arc<Vec<Vec<usize>>>;

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Groups,
        probs: Vec<Matrix>,
    },
    Dwt { x: Var, h: usize, w: usize },
    Idwt { x: Var, h: usize, w: usize },
    DepthwiseConv { x: Var, kernel: Var, bias: Var },
    ConcatCols(Var, Var),
    Mix { alpha: Var, a: Var, b: Var },
    SelectRows { x: Var, idx: Vec<usize> },
    FillRows { x: Var, token: Var, positions: Vec<usize> },
    MeanRows(Var),
    MulCol { x: Var, col: Var },
    Softmax(Var),
    MeanAbsDiff { x: Var, target: Matrix },
    Transpose(Var),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a + b` with `b` (1 × cols) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (1, av.cols()), "add_row expects a 1 x cols bias");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            av.rows(),
            av.cols(),
            av.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (1 × cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * inv;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * gv[c] + bv[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Scaled dot-product attention over `heads` column slices, applied
    /// independently within each row group. `q`, `k`, `v` are `n × d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: Groups) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        assert_eq!(kv.shape(), (n, d));
        assert_eq!(vv.shape(), (n, d));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for idx in groups.iter() {
            for h in 0..heads {
                let qg = gather_block(qv, idx, h * dh, dh);
                let kg = gather_block(kv, idx, h * dh, dh);
                let vg = gather_block(vv, idx, h * dh, dh);
                let mut s = Matrix::zeros(idx.len(), idx.len());
                gemm_acc(&qg, false, &kg, true, &mut s);
                s.scale_assign(scale);
                softmax_rows_in_place(&mut s);
                let mut o = Matrix::zeros(idx.len(), dh);
                gemm_acc(&s, false, &vg, false, &mut o);
                scatter_block(&mut out, &o, idx, h * dh);
                probs.push(s);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
        )
    }

    /// Per-channel 2-D Haar transform of an `(h·w) × c` grid-major matrix.
    pub fn dwt(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = wavelet::dwt2_channels(self.value(x), h, w).expect("dwt shape checked by caller");
        self.push(out, Op::Dwt { x, h, w })
    }

    pub fn idwt(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = wavelet::idwt2_channels(self.value(x), h, w).expect("idwt shape checked by caller");
        self.push(out, Op::Idwt { x, h, w })
    }

    /// Per-channel 1-D convolution along rows, zero padded, odd kernel
    /// length `kernel.rows()`, `kernel` is `k × c`, `bias` is `1 × c`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Var {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (n, c) = xv.shape();
        let klen = kv.rows();
        assert!(klen % 2 == 1 && kv.cols() == c && bv.shape() == (1, c));
        let half = klen / 2;
        let mut out = Matrix::zeros(n, c);
        for i in 0..n {
            let o = out.row_mut(i);
            o.copy_from_slice(bv.as_slice());
            for k in 0..klen {
                let src = i + k;
                if src < half || src - half >= n {
                    continue;
                }
                let xr = xv.row(src - half);
                let wr = kv.row(k);
                for ch in 0..c {
                    o[ch] += wr[ch] * xr[ch];
                }
            }
        }
        self.push(out, Op::DepthwiseConv { x, kernel, bias })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Matrix::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            let o = out.row_mut(r);
            o[..ca].copy_from_slice(av.row(r));
            o[ca..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// `alpha ⊙ a + (1 − alpha) ⊙ b` with `alpha` (n × 1) broadcast over columns.
    pub fn mix(&mut self, alpha: Var, a: Var, b: Var) -> Var {
        let (al, av, bv) = (self.value(alpha), self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mix operands differ in shape");
        assert_eq!(al.shape(), (av.rows(), 1), "mix gate must be n x 1");
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let g = al.get(r, 0);
            for (o, (x, y)) in out.row_mut(r).iter_mut().zip(av.row(r).iter().zip(bv.row(r))) {
                *o = g * x + (1.0 - g) * y;
            }
        }
        self.push(out, Op::Mix { alpha, a, b })
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Builds an `n`-row matrix: row `positions[i]` is row `i` of `x`, all
    /// other rows are the `1 × c` `token`.
    pub fn fill_rows(&mut self, x: Var, token: Var, positions: &[usize], n: usize) -> Var {
        let (xv, tv) = (self.value(x), self.value(token));
        assert_eq!(xv.rows(), positions.len());
        assert_eq!(tv.shape(), (1, xv.cols()));
        let mut out = Matrix::zeros(n, xv.cols());
        let mut placed = vec![false; n];
        for (i, &p) in positions.iter().enumerate() {
            out.row_mut(p).copy_from_slice(xv.row(i));
            placed[p] = true;
        }
        for (r, done) in placed.into_iter().enumerate() {
            if !done {
                out.row_mut(r).copy_from_slice(tv.as_slice());
            }
        }
        self.push(
            out,
            Op::FillRows {
                x,
                token,
                positions: positions.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.as_mut_slice().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / xv.rows() as f64);
        self.push(out, Op::MeanRows(x))
    }

    /// Scales row `i` of `x` by `col[i]` (`col` is n × 1).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!(cv.shape(), (xv.rows(), 1));
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let s = cv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::MulCol { x, col })
    }

    /// Softmax over every element of `x`, treated as one vector.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone().reshape(1, xv.len());
        softmax_rows_in_place(&mut out);
        let out = out.reshape(xv.rows(), xv.cols());
        self.push(out, Op::Softmax(x))
    }

    /// `n × 1` column of per-row mean absolute differences to a constant target.
    pub fn mean_abs_diff(&mut self, x: Var, target: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        let c = xv.cols() as f64;
        let out = Matrix::from_fn(xv.rows(), 1, |r, _| {
            xv.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b).abs()).sum::<f64>() / c
        });
        self.push(out, Op::MeanAbsDiff { x, target })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Back-propagates the given output cotangents and adds the resulting
    /// parameter gradients into `grads`.
    pub fn backward(&self, seeds: &[(Var, Matrix)], grads: &mut Gradients) {
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, s) in seeds {
            assert_eq!(self.value(*v).shape(), s.shape(), "seed shape mismatch");
            accumulate(&mut adj[v.0], s.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&dy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm_acc(&dy, false, bv, true, &mut da);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm_acc(av, true, &dy, false, &mut db);
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, v) in db.as_mut_slice().iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj[b.0], db);
                    accumulate(&mut adj[a.0], dy);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[b.0], dy.clone());
                    accumulate(&mut adj[a.0], dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[b.0], dy.map(|v| -v));
                    accumulate(&mut adj[a.0], dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = hadamard(&dy, bv);
                    let db = hadamard(&dy, av);
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Scale(a, s) => accumulate(&mut adj[a.0], dy.map(|v| v * s)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).as_slice();
                    let (rows, cols) = dy.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    let n = cols as f64;
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        let (dyr, xh) = (dy.row(r), xhat.row(r));
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for c in 0..cols {
                            dg.as_mut_slice()[c] += dyr[c] * xh[c];
                            db.as_mut_slice()[c] += dyr[c];
                            dxh[c] = dyr[c] * gv[c];
                            s1 += dxh[c];
                            s2 += dxh[c] * xh[c];
                        }
                        let k = inv_std[r] / n;
                        let dxr = dx.row_mut(r);
                        for c in 0..cols {
                            dxr[c] = k * (n * dxh[c] - s1 - xh[c] * s2);
                        }
                    }
                    accumulate(&mut adj[gamma.0], dg);
                    accumulate(&mut adj[beta.0], db);
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = Matrix::from_vec(
                        dy.rows(),
                        dy.cols(),
                        dy.as_slice()
                            .iter()
                            .zip(xv.as_slice())
                            .map(|(g, &v)| {
                                let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                                let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                                g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                            })
                            .collect(),
                    );
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let yv = self.value(Var(i));
                    let dx = Matrix::from_vec(
                        dy.rows(),
                        dy.cols(),
                        dy.as_slice().iter().zip(yv.as_slice()).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    );
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    groups,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(n, d);
                    let mut dk = Matrix::zeros(n, d);
                    let mut dv = Matrix::zeros(n, d);
                    let mut p_iter = probs.iter();
                    for idx in groups.iter() {
                        let len = idx.len();
                        for h in 0..*heads {
                            let p = p_iter.next().expect("one probability block per group and head");
                            let col = h * dh;
                            let qg = gather_block(qv, idx, col, dh);
                            let kg = gather_block(kv, idx, col, dh);
                            let vg = gather_block(vv, idx, col, dh);
                            let dog = gather_block(&dy, idx, col, dh);
                            let mut dvg = Matrix::zeros(len, dh);
                            gemm_acc(p, true, &dog, false, &mut dvg);
                            let mut dp = Matrix::zeros(len, len);
                            gemm_acc(&dog, false, &vg, true, &mut dp);
                            // softmax backward, folded with the score scale
                            for r in 0..len {
                                let pr = p.row(r);
                                let dot: f64 = pr.iter().zip(dp.row(r)).map(|(a, b)| a * b).sum();
                                for (dpv, pv) in dp.row_mut(r).iter_mut().zip(pr) {
                                    *dpv = pv * (*dpv - dot) * scale;
                                }
                            }
                            let mut dqg = Matrix::zeros(len, dh);
                            gemm_acc(&dp, false, &kg, false, &mut dqg);
                            let mut dkg = Matrix::zeros(len, dh);
                            gemm_acc(&dp, true, &qg, false, &mut dkg);
                            scatter_add_block(&mut dq, &dqg, idx, col);
                            scatter_add_block(&mut dk, &dkg, idx, col);
                            scatter_add_block(&mut dv, &dvg, idx, col);
                        }
                    }
                    accumulate(&mut adj[q.0], dq);
                    accumulate(&mut adj[k.0], dk);
                    accumulate(&mut adj[v.0], dv);
                }
                // orthonormal: adjoint of the forward transform is the inverse
                Op::Dwt { x, h, w } => {
                    let dx = wavelet::idwt2_channels(&dy, *h, *w).expect("shape fixed in forward");
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Idwt { x, h, w } => {
                    let dx = wavelet::dwt2_channels(&dy, *h, *w).expect("shape fixed in forward");
                    accumulate(&mut adj[x.0], dx);
                }
                Op::DepthwiseConv { x, kernel, bias } => {
                    let (xv, kv) = (self.value(*x), self.value(*kernel));
                    let (n, c) = xv.shape();
                    let klen = kv.rows();
                    let half = klen / 2;
                    let mut dx = Matrix::zeros(n, c);
                    let mut dk = Matrix::zeros(klen, c);
                    let mut db = Matrix::zeros(1, c);
                    for i in 0..n {
                        let g = dy.row(i);
                        for (o, v) in db.as_mut_slice().iter_mut().zip(g) {
                            *o += v;
                        }
                        for kk in 0..klen {
                            let src = i + kk;
                            if src < half || src - half >= n {
                                continue;
                            }
                            let s = src - half;
                            for ch in 0..c {
                                dk.as_mut_slice()[kk * c + ch] += g[ch] * xv.get(s, ch);
                                dx.as_mut_slice()[s * c + ch] += g[ch] * kv.get(kk, ch);
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                    accumulate(&mut adj[kernel.0], dk);
                    accumulate(&mut adj[bias.0], db);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut da = Matrix::zeros(dy.rows(), ca);
                    let mut db = Matrix::zeros(dy.rows(), cb);
                    for r in 0..dy.rows() {
                        da.row_mut(r).copy_from_slice(&dy.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&dy.row(r)[ca..]);
                    }
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Mix { alpha, a, b } => {
                    let (al, av, bv) = (self.value(*alpha), self.value(*a), self.value(*b));
                    let (rows, cols) = dy.shape();
                    let mut dal = Matrix::zeros(rows, 1);
                    let mut da = Matrix::zeros(rows, cols);
                    let mut db = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let g = al.get(r, 0);
                        let (dyr, ar, br) = (dy.row(r), av.row(r), bv.row(r));
                        let mut s = 0.0;
                        for c in 0..cols {
                            s += dyr[c] * (ar[c] - br[c]);
                        }
                        dal.set(r, 0, s);
                        for (o, v) in da.row_mut(r).iter_mut().zip(dyr) {
                            *o = g * v;
                        }
                        for (o, v) in db.row_mut(r).iter_mut().zip(dyr) {
                            *o = (1.0 - g) * v;
                        }
                    }
                    accumulate(&mut adj[alpha.0], dal);
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::SelectRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in dx.row_mut(src).iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::FillRows { x, token, positions } => {
                    let cols = dy.cols();
                    let mut dx = Matrix::zeros(positions.len(), cols);
                    let mut dt = Matrix::zeros(1, cols);
                    let mut placed = vec![false; dy.rows()];
                    for (r, &p) in positions.iter().enumerate() {
                        dx.row_mut(r).copy_from_slice(dy.row(p));
                        placed[p] = true;
                    }
                    for (r, done) in placed.into_iter().enumerate() {
                        if !done {
                            for (o, v) in dt.as_mut_slice().iter_mut().zip(dy.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                    accumulate(&mut adj[token.0], dt);
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).rows();
                    let inv = 1.0 / rows as f64;
                    let dx = Matrix::from_fn(rows, dy.cols(), |_, c| dy.get(0, c) * inv);
                    accumulate(&mut adj[x.0], dx);
                }
                Op::MulCol { x, col } => {
                    let (xv, cv) = (self.value(*x), self.value(*col));
                    let mut dx = dy.clone();
                    let mut dc = Matrix::zeros(cv.rows(), 1);
                    for r in 0..dy.rows() {
                        let s = cv.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        dc.set(r, 0, dy.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum());
                    }
                    accumulate(&mut adj[x.0], dx);
                    accumulate(&mut adj[col.0], dc);
                }
                Op::Softmax(x) => {
                    let y = self.value(Var(i));
                    let dot: f64 = y.as_slice().iter().zip(dy.as_slice()).map(|(a, b)| a * b).sum();
                    let dx = Matrix::from_vec(
                        y.rows(),
                        y.cols(),
                        y.as_slice().iter().zip(dy.as_slice()).map(|(p, g)| p * (g - dot)).collect(),
                    );
                    accumulate(&mut adj[x.0], dx);
                }
                Op::MeanAbsDiff { x, target } => {
                    let xv = self.value(*x);
                    let c = xv.cols() as f64;
                    let dx = Matrix::from_fn(xv.rows(), xv.cols(), |r, col| {
                        let diff = xv.get(r, col) - target.get(r, col);
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        sign * dy.get(r, 0) / c
                    });
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Transpose(x) => accumulate(&mut adj[x.0], dy.transpose()),
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Matrix>, m: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&m),
        None => *slot = Some(m),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).collect(),
    )
}

pub(crate) fn softmax_rows_in_place(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

fn gather_block(m: &Matrix, idx: &[usize], col: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), width);
    for (r, &src) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(&m.row(src)[col..col + width]);
    }
    out
}

fn scatter_block(dst: &mut Matrix, src: &Matrix, idx: &[usize], col: usize) {
    let w = src.cols();
    for (r, &t) in idx.iter().enumerate() {
        dst.row_mut(t)[col..col + w].copy_from_slice(src.row(r));
    }
}

fn scatter_add_block(dst: &mut Matrix, src: &Matrix, idx: &[usize], col: usize) {
    let w = src.cols();
    for (r, &t) in idx.iter().enumerate() {
        for (o, v) in dst.row_mut(t)[col..col + w].iter_mut().zip(src.row(r)) {
            *o += v;
        }
    }
}
