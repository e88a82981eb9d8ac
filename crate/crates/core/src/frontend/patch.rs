use super::fbank::FbankGrid;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const PATCH_SIDE: usize = 16;
/// Flattened patch length, `16 × 16`.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;

/// A grid cut into 16×16 tiles.
///
/// Patch `i` is row `i` of `patches`; `coords[i]` is its `(band, segment)`
/// position on the `bands × segments` tile grid. `masked[i]` marks patches
/// hidden from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Matrix,
    pub coords: Vec<(usize, usize)>,
    pub bands: usize,
    pub segments: usize,
    pub masked: Vec<bool>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.masked[i]).collect()
    }
}

/// Row-major over `(band, segment)`; each tile flattened row-major.
pub fn patchify(g: &FbankGrid) -> Result<PatchSet> {
    let (rows, cols) = g.values.shape();
    if rows == 0 || cols == 0 || rows % PATCH_SIDE != 0 || cols % PATCH_SIDE != 0 {
        return Err(Error::invalid(format!(
            "grid {rows}x{cols} is not divisible into {PATCH_SIDE}x{PATCH_SIDE} patches"
        )));
    }
    let (bands, segments) = (rows / PATCH_SIDE, cols / PATCH_SIDE);
    let n = bands * segments;
    let mut patches = Matrix::zeros(n, PATCH_DIM);
    let mut coords = Vec::with_capacity(n);
    for f in 0..bands {
        for t in 0..segments {
            let idx = f * segments + t;
            let dst = patches.row_mut(idx);
            for r in 0..PATCH_SIDE {
                let src = &g.values.row(f * PATCH_SIDE + r)[t * PATCH_SIDE..(t + 1) * PATCH_SIDE];
                dst[r * PATCH_SIDE..(r + 1) * PATCH_SIDE].copy_from_slice(src);
            }
            coords.push((f, t));
        }
    }
    Ok(PatchSet {
        patches,
        coords,
        bands,
        segments,
        masked: vec![false; n],
    })
}

/// Reassembles a grid from patch coordinates; patch order is irrelevant.
pub fn unpatchify(p: &PatchSet) -> Result<FbankGrid> {
    let n = p.bands * p.segments;
    if p.coords.len() != n || p.patches.rows() != n {
        return Err(Error::invalid(format!(
            "expected {n} patches for a {}x{} tile grid, got {}",
            p.bands,
            p.segments,
            p.coords.len()
        )));
    }
    if p.patches.cols() != PATCH_DIM {
        return Err(Error::invalid(format!(
            "patch dimension must be {PATCH_DIM}, got {}",
            p.patches.cols()
        )));
    }
    let mut seen = vec![false; n];
    let mut values = Matrix::zeros(p.bands * PATCH_SIDE, p.segments * PATCH_SIDE);
    for (i, &(f, t)) in p.coords.iter().enumerate() {
        if f >= p.bands || t >= p.segments || std::mem::replace(&mut seen[f * p.segments + t], true) {
            return Err(Error::invalid(format!("bad or duplicate patch coordinate ({f}, {t})")));
        }
        let src = p.patches.row(i);
        for r in 0..PATCH_SIDE {
            values.row_mut(f * PATCH_SIDE + r)[t * PATCH_SIDE..(t + 1) * PATCH_SIDE]
                .copy_from_slice(&src[r * PATCH_SIDE..(r + 1) * PATCH_SIDE]);
        }
    }
    Ok(FbankGrid::from_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: usize, cols: usize) -> FbankGrid {
        FbankGrid::from_values(Matrix::from_fn(rows, cols, |r, c| (r * 1000 + c) as f64))
    }

    #[test]
    fn patch_counts() {
        let p = patchify(&grid(128, 1024)).unwrap();
        assert_eq!((p.len(), p.bands, p.segments), (512, 8, 64));
        assert_eq!(p.patches.cols(), 256);
        assert_eq!(patchify(&grid(128, 16)).unwrap().len(), 8);
    }

    #[test]
    fn layout_is_row_major() {
        let p = patchify(&grid(32, 48)).unwrap();
        // patch (1, 2) starts at grid row 16, column 32
        let idx = 3 + 2;
        assert_eq!(p.coords[idx], (1, 2));
        assert_eq!(p.patches.get(idx, 0), 16_032.0);
        assert_eq!(p.patches.get(idx, 17), 17_033.0);
    }

    #[test]
    fn rejects_non_divisible() {
        assert!(patchify(&grid(120, 32)).is_err());
        assert!(patchify(&grid(32, 40)).is_err());
    }

    #[test]
    fn constant_patch_gives_constant_block() {
        let p = PatchSet {
            patches: Matrix::filled(1, PATCH_DIM, 2.5),
            coords: vec![(0, 0)],
            bands: 1,
            segments: 1,
            masked: vec![false],
        };
        assert_eq!(unpatchify(&p).unwrap().values, Matrix::filled(16, 16, 2.5));
    }

    #[test]
    fn missing_coordinate_is_rejected() {
        let mut p = patchify(&grid(32, 32)).unwrap();
        p.coords[3] = p.coords[0];
        assert!(unpatchify(&p).is_err());
        let mut p = patchify(&grid(32, 32)).unwrap();
        p.coords.pop();
        assert!(unpatchify(&p).is_err());
    }

    #[test]
    fn permuted_order_reassembles_by_coordinates() {
        let g = grid(48, 64);
        let p = patchify(&g).unwrap();
        let order: Vec<usize> = (0..p.len()).rev().collect();
        let shuffled = PatchSet {
            patches: p.patches.select_rows(&order),
            coords: order.iter().map(|&i| p.coords[i]).collect(),
            masked: vec![false; p.len()],
            ..p
        };
        assert_eq!(unpatchify(&shuffled).unwrap().values, g.values);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(f in 1usize..4, t in 1usize..5, seed in any::<u64>()) {
            let vals = Matrix::from_fn(f * 16, t * 16, |r, c| {
                let x = (r as u64).wrapping_mul(0x9E37_79B9).wrapping_add(c as u64 ^ seed);
                (x % 10_007) as f64 / 7.0 - 500.0
            });
            let g = FbankGrid::from_values(vals);
            prop_assert_eq!(unpatchify(&patchify(&g).unwrap()).unwrap().values, g.values);
        }
    }
}
