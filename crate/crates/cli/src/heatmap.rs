//! Per-patch values laid out on the tile grid, written as CSV and 8-bit PGM.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Result};

/// `bands × segments` grid; `values[i]` lands at `coords[i]`.
pub fn to_grid(values: &[f64], coords: &[(usize, usize)], bands: usize, segments: usize) -> Result<Vec<Vec<f64>>> {
    ensure!(
        values.len() == coords.len() && values.len() == bands * segments,
        "{} values for a {bands}x{segments} grid",
        values.len()
    );
    let mut grid = vec![vec![0.0; segments]; bands];
    for (&v, &(f, t)) in values.iter().zip(coords) {
        grid[f][t] = v;
    }
    Ok(grid)
}

pub fn csv_text(grid: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

/// Binary greymap, min-max scaled to 0..=255; a constant grid maps to 0.
pub fn pgm_bytes(grid: &[Vec<f64>]) -> Vec<u8> {
    let h = grid.len();
    let w = grid.first().map_or(0, Vec::len);
    let (lo, hi) = grid
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.iter().flatten().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_both(dir: &Path, stem: &str, grid: &[Vec<f64>]) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.csv")), csv_text(grid))?;
    std::fs::write(dir.join(format!("{stem}.pgm")), pgm_bytes(grid))?;
    Ok(())
}
