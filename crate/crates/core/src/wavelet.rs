//! Single-level orthonormal 2-D Haar transform.
//!
//! For every 2×2 block `[[a, b], [c, d]]` of the input:
//!
//! ```text
//! LL = (a + b + c + d) / 2      HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! The transform is orthonormal, so the inverse is its transpose and
//! energy is preserved exactly (up to rounding).

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// The four subbands of a single-level decomposition, each `(H/2) × (W/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub ll: Matrix,
    pub lh: Matrix,
    pub hl: Matrix,
    pub hh: Matrix,
    pub source_shape: (usize, usize),
}

impl SubbandSet {
    pub fn energy(&self) -> f64 {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "wavelet transform needs even, non-zero dimensions, got {h}x{w}"
        )));
    }
    Ok(())
}

#[inline]
fn forward_block(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    // [LL, LH, HL, HH]
    [
        0.5 * (a + b + c + d),
        0.5 * (a + b - c - d),
        0.5 * (a - b + c - d),
        0.5 * (a - b - c + d),
    ]
}

#[inline]
fn inverse_block(ll: f64, lh: f64, hl: f64, hh: f64) -> [f64; 4] {
    // [a, b, c, d]
    [
        0.5 * (ll + lh + hl + hh),
        0.5 * (ll + lh - hl - hh),
        0.5 * (ll - lh + hl - hh),
        0.5 * (ll - lh - hl + hh),
    ]
}

pub fn dwt2(grid: &Matrix) -> Result<SubbandSet> {
    let (h, w) = grid.shape();
    check_even(h, w)?;
    let stacked = dwt2_channels(&grid.clone().reshape(h * w, 1), h, w)?;
    let m = (h / 2) * (w / 2);
    let band = |k: usize| Matrix::from_vec(h / 2, w / 2, stacked.as_slice()[k * m..(k + 1) * m].to_vec());
    Ok(SubbandSet {
        ll: band(0),
        lh: band(1),
        hl: band(2),
        hh: band(3),
        source_shape: (h, w),
    })
}

pub fn idwt2(s: &SubbandSet) -> Result<Matrix> {
    let shape = s.ll.shape();
    if [&s.lh, &s.hl, &s.hh].iter().any(|b| b.shape() != shape) {
        return Err(Error::invalid("subbands have inconsistent shapes"));
    }
    let (h, w) = (shape.0 * 2, shape.1 * 2);
    if s.source_shape != (h, w) {
        return Err(Error::invalid(format!(
            "subband shape {}x{} does not match source shape {:?}",
            shape.0, shape.1, s.source_shape
        )));
    }
    let mut stacked = Vec::with_capacity(h * w);
    for band in [&s.ll, &s.lh, &s.hl, &s.hh] {
        stacked.extend_from_slice(band.as_slice());
    }
    let out = idwt2_channels(&Matrix::from_vec(h * w, 1, stacked), h, w)?;
    Ok(out.reshape(h, w))
}

/// Multi-channel forward transform.
///
/// `x` holds one row per grid cell in row-major `(row, col)` order of an
/// `h × w` grid, with one column per channel. The result stacks the
/// subbands along rows as `[LL; LH; HL; HH]`, each block holding
/// `(h/2)·(w/2)` rows in row-major order.
pub fn dwt2_channels(x: &Matrix, h: usize, w: usize) -> Result<Matrix> {
    check_even(h, w)?;
    if x.rows() != h * w {
        return Err(Error::invalid(format!(
            "expected {} rows for a {h}x{w} grid, got {}",
            h * w,
            x.rows()
        )));
    }
    let c = x.cols();
    let (hh, hw) = (h / 2, w / 2);
    let m = hh * hw;
    let mut out = Matrix::zeros(4 * m, c);
    let src = x.as_slice();
    let dst = out.as_mut_slice();
    for i in 0..hh {
        for j in 0..hw {
            let a = ((2 * i) * w + 2 * j) * c;
            let b = a + c;
            let cc = ((2 * i + 1) * w + 2 * j) * c;
            let d = cc + c;
            let s = i * hw + j;
            for ch in 0..c {
                let v = forward_block(src[a + ch], src[b + ch], src[cc + ch], src[d + ch]);
                for (k, val) in v.into_iter().enumerate() {
                    dst[(k * m + s) * c + ch] = val;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`dwt2_channels`].
pub fn idwt2_channels(s: &Matrix, h: usize, w: usize) -> Result<Matrix> {
    check_even(h, w)?;
    if s.rows() != h * w {
        return Err(Error::invalid(format!(
            "expected {} stacked subband rows for a {h}x{w} grid, got {}",
            h * w,
            s.rows()
        )));
    }
    let c = s.cols();
    let (hh, hw) = (h / 2, w / 2);
    let m = hh * hw;
    let mut out = Matrix::zeros(h * w, c);
    let src = s.as_slice();
    let dst = out.as_mut_slice();
    for i in 0..hh {
        for j in 0..hw {
            let sidx = i * hw + j;
            let a = ((2 * i) * w + 2 * j) * c;
            let b = a + c;
            let cc = ((2 * i + 1) * w + 2 * j) * c;
            let d = cc + c;
            for ch in 0..c {
                let band = |k: usize| src[(k * m + sidx) * c + ch];
                let v = inverse_block(band(0), band(1), band(2), band(3));
                dst[a + ch] = v[0];
                dst[b + ch] = v[1];
                dst[cc + ch] = v[2];
                dst[d + ch] = v[3];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_ones_block() {
        let s = dwt2(&Matrix::filled(2, 2, 1.0)).unwrap();
        assert_eq!(s.ll.as_slice(), &[2.0]);
        assert_eq!(s.lh.as_slice(), &[0.0]);
        assert_eq!(s.hl.as_slice(), &[0.0]);
        assert_eq!(s.hh.as_slice(), &[0.0]);
    }

    #[test]
    fn hand_computed_block() {
        let g = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let s = dwt2(&g).unwrap();
        assert_eq!(s.ll.as_slice(), &[5.0]);
        assert_eq!(s.hl.as_slice(), &[-1.0]);
        assert_eq!(s.lh.as_slice(), &[-2.0]);
        assert_eq!(s.hh.as_slice(), &[0.0]);
        assert_eq!(s.energy(), 30.0);
        assert_eq!(g.sum_sq(), 30.0);
    }

    #[test]
    fn constant_grid_has_no_detail() {
        let s = dwt2(&Matrix::filled(6, 8, -3.5)).unwrap();
        for band in [&s.lh, &s.hl, &s.hh] {
            assert!(band.as_slice().iter().all(|&v| v == 0.0));
        }
        assert!(s.ll.as_slice().iter().all(|&v| v == -7.0));
    }

    #[test]
    fn inverse_of_constant_low_band() {
        let s = SubbandSet {
            ll: Matrix::filled(3, 2, 2.0),
            lh: Matrix::zeros(3, 2),
            hl: Matrix::zeros(3, 2),
            hh: Matrix::zeros(3, 2),
            source_shape: (6, 4),
        };
        assert_eq!(idwt2(&s).unwrap(), Matrix::filled(6, 4, 1.0));
    }

    #[test]
    fn zero_subbands_give_zero_grid() {
        let z = Matrix::zeros(2, 2);
        let s = SubbandSet {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
            source_shape: (4, 4),
        };
        assert_eq!(idwt2(&s).unwrap(), Matrix::zeros(4, 4));
    }

    #[test]
    fn odd_dimensions_are_rejected() {
        assert!(matches!(dwt2(&Matrix::zeros(3, 4)), Err(Error::InvalidInput(_))));
        assert!(matches!(dwt2(&Matrix::zeros(4, 5)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mismatched_subbands_are_rejected() {
        let s = SubbandSet {
            ll: Matrix::zeros(2, 2),
            lh: Matrix::zeros(2, 3),
            hl: Matrix::zeros(2, 2),
            hh: Matrix::zeros(2, 2),
            source_shape: (4, 4),
        };
        assert!(matches!(idwt2(&s), Err(Error::InvalidInput(_))));
    }

    fn grid_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            prop::collection::vec(-100.0f64..100.0, 4 * h * w)
                .prop_map(move |v| Matrix::from_vec(2 * h, 2 * w, v))
        })
    }

    proptest! {
        #[test]
        fn perfect_reconstruction(g in grid_strategy()) {
            let back = idwt2(&dwt2(&g).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&g) <= 1e-9);
        }

        #[test]
        fn energy_is_preserved(g in grid_strategy()) {
            let e = g.sum_sq();
            let s = dwt2(&g).unwrap();
            prop_assert!((e - s.energy()).abs() <= 1e-12 * e.max(1.0));
        }

        #[test]
        fn linearity(g1 in grid_strategy(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let g2 = g1.map(|v| (v * 0.37).sin() * 50.0);
            let mixed = Matrix::from_fn(g1.rows(), g1.cols(), |r, c| alpha * g1.get(r, c) + beta * g2.get(r, c));
            let s = dwt2(&mixed).unwrap();
            let (s1, s2) = (dwt2(&g1).unwrap(), dwt2(&g2).unwrap());
            for (b, (b1, b2)) in [&s.ll, &s.lh, &s.hl, &s.hh]
                .into_iter()
                .zip([&s1.ll, &s1.lh, &s1.hl, &s1.hh].into_iter().zip([&s2.ll, &s2.lh, &s2.hl, &s2.hh]))
            {
                let want = Matrix::from_fn(b.rows(), b.cols(), |r, c| alpha * b1.get(r, c) + beta * b2.get(r, c));
                prop_assert!(b.max_abs_diff(&want) <= 1e-9);
            }
        }
    }

    #[test]
    fn channel_layout_matches_per_channel_transform() {
        let (h, w, c) = (4, 6, 3);
        let x = Matrix::from_fn(h * w, c, |r, ch| ((r * 7 + ch * 13) % 11) as f64 - 5.0);
        let stacked = dwt2_channels(&x, h, w).unwrap();
        let m = (h / 2) * (w / 2);
        for ch in 0..c {
            let grid = Matrix::from_fn(h, w, |i, j| x.get(i * w + j, ch));
            let s = dwt2(&grid).unwrap();
            for (k, band) in [&s.ll, &s.lh, &s.hl, &s.hh].into_iter().enumerate() {
                for idx in 0..m {
                    assert_eq!(stacked.get(k * m + idx, ch), band.as_slice()[idx]);
                }
            }
        }
        assert!(idwt2_channels(&stacked, h, w).unwrap().max_abs_diff(&x) < 1e-12);
    }
}
