use ndarray::{s, Array1, Array2};

use super::{Micrograph, Patch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePosition {
    pub row: usize,
    pub col: usize,
    pub y: usize,
    pub x: usize,
}

/// Sliding-window layout. Edge tiles are shifted inward so every tile is full-size.
#[derive(Debug, Clone, PartialEq)]
pub struct TileLayout {
    pub tile_size: usize,
    pub overlap: usize,
    pub height: usize,
    pub width: usize,
    pub grid: Vec<TilePosition>,
    pub pixel_size_angstrom: f64,
    pub origin: (f64, f64),
    pub provenance: String,
}

fn axis_offsets(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        if pos + tile >= len {
            out.push(len - tile);
            break;
        }
        out.push(pos);
        pos += stride;
    }
    out.dedup();
    out
}

pub fn tile(m: &Micrograph, tile_size: usize, overlap: usize) -> Result<(TileLayout, Vec<Patch>)> {
    let (h, w) = m.data.dim();
    if tile_size == 0 || tile_size > h.min(w) {
        return Err(Error::Dimension(format!(
            "tile size {tile_size} does not fit a {h}x{w} image"
        )));
    }
    if overlap >= tile_size {
        return Err(Error::Parameter(format!(
            "overlap {overlap} must be smaller than tile size {tile_size}"
        )));
    }
    let stride = tile_size - overlap;
    let ys = axis_offsets(h, tile_size, stride);
    let xs = axis_offsets(w, tile_size, stride);
    let mut grid = Vec::with_capacity(ys.len() * xs.len());
    let mut patches = Vec::with_capacity(ys.len() * xs.len());
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            grid.push(TilePosition { row, col, y, x });
            patches.push(m.data.slice(s![y..y + tile_size, x..x + tile_size]).to_owned());
        }
    }
    let layout = TileLayout {
        tile_size,
        overlap,
        height: h,
        width: w,
        grid,
        pixel_size_angstrom: m.pixel_size_angstrom,
        origin: m.origin,
        provenance: m.provenance.clone(),
    };
    Ok((layout, patches))
}

/// One-dimensional raised-cosine window: ramps of length `overlap` at both
/// ends, unit gain in between. Opposing ramps sum to exactly one.
pub fn blend_weights(tile_size: usize, overlap: usize) -> Array1<f64> {
    let ramp = |i: usize| {
        let t = std::f64::consts::PI * (i as f64 + 0.5) / (2.0 * overlap as f64);
        t.sin().powi(2)
    };
    Array1::from_shape_fn(tile_size, |i| {
        if overlap == 0 {
            1.0
        } else if i < overlap {
            ramp(i)
        } else if i >= tile_size - overlap {
            ramp(tile_size - 1 - i)
        } else {
            1.0
        }
    })
}

pub fn stitch(layout: &TileLayout, tiles: &[Patch]) -> Result<Micrograph> {
    if tiles.len() != layout.grid.len() {
        return Err(Error::Layout(format!(
            "layout has {} tiles, received {}",
            layout.grid.len(),
            tiles.len()
        )));
    }
    let t = layout.tile_size;
    let w1 = blend_weights(t, layout.overlap);
    let window = Array2::from_shape_fn((t, t), |(i, j)| w1[i] * w1[j]);
    let mut acc = Array2::<f64>::zeros((layout.height, layout.width));
    let mut norm = Array2::<f64>::zeros((layout.height, layout.width));
    for (pos, patch) in layout.grid.iter().zip(tiles) {
        if patch.dim() != (t, t) {
            return Err(Error::Layout(format!(
                "tile at ({}, {}) is {:?}, expected {t}x{t}",
                pos.row,
                pos.col,
                patch.dim()
            )));
        }
        let region = s![pos.y..pos.y + t, pos.x..pos.x + t];
        acc.slice_mut(region).zip_mut_with(&(patch * &window), |a, b| *a += b);
        norm.slice_mut(region).zip_mut_with(&window, |a, b| *a += b);
    }
    acc.zip_mut_with(&norm, |a, n| *a /= n);
    Ok(Micrograph {
        data: acc,
        pixel_size_angstrom: layout.pixel_size_angstrom,
        origin: layout.origin,
        provenance: layout.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn mic(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Micrograph {
        Micrograph::new(Array2::from_shape_fn((h, w), |(i, j)| f(i, j)), 1.0).unwrap()
    }

    #[test]
    fn tile_counts() {
        let (l, p) = tile(&mic(256, 256, |_, _| 0.0), 256, 0).unwrap();
        assert_eq!(l.grid.len(), 1);
        assert_eq!((l.grid[0].y, l.grid[0].x), (0, 0));
        assert_eq!(p.len(), 1);
        let (l, _) = tile(&mic(512, 512, |_, _| 0.0), 256, 0).unwrap();
        assert_eq!(l.grid.len(), 4);
    }

    #[test]
    fn inward_shift_and_coverage() {
        let m = mic(300, 300, |_, _| 0.0);
        let (l, _) = tile(&m, 256, 64).unwrap();
        let mut offs: Vec<_> = l.grid.iter().map(|p| (p.y, p.x)).collect();
        offs.sort();
        assert_eq!(offs, vec![(0, 0), (0, 44), (44, 0), (44, 44)]);
        // pixel-count oracle
        let mut cover = Array2::<u32>::zeros((300, 300));
        for p in &l.grid {
            cover.slice_mut(s![p.y..p.y + 256, p.x..p.x + 256]).mapv_inplace(|c| c + 1);
        }
        assert!(cover.iter().all(|&c| c >= 1));
        assert_eq!(cover.iter().map(|&c| c as usize).sum::<usize>(), 4 * 256 * 256);
    }

    #[test]
    fn tile_errors() {
        let m = mic(100, 120, |_, _| 0.0);
        assert!(matches!(tile(&m, 101, 0), Err(Error::Dimension(_))));
        assert!(matches!(tile(&m, 50, 50), Err(Error::Parameter(_))));
        let (l, p) = tile(&m, 50, 10).unwrap();
        assert!(matches!(stitch(&l, &p[1..]), Err(Error::Layout(_))));
    }

    #[test]
    fn constant_tiles_stitch_to_constant() {
        let m = mic(130, 97, |_, _| 0.0);
        let (l, p) = tile(&m, 40, 13).unwrap();
        let p: Vec<_> = p.into_iter().map(|t| t.mapv(|_| 3.25)).collect();
        let out = stitch(&l, &p).unwrap();
        assert!(out.data.iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn half_overlap_ramp_matches_closed_form() {
        let m = mic(16, 24, |_, _| 0.0);
        let (l, p) = tile(&m, 16, 8).unwrap();
        assert_eq!(l.grid.len(), 2);
        let tiles = vec![p[0].mapv(|_| 0.0), p[1].mapv(|_| 1.0)];
        let out = stitch(&l, &tiles).unwrap();
        let row = out.data.row(3);
        for x in 0..24 {
            let expected = if x < 8 {
                0.0
            } else if x >= 16 {
                1.0
            } else {
                let j = (x - 8) as f64;
                (std::f64::consts::PI * (j + 0.5) / 16.0).sin().powi(2)
            };
            assert!((row[x] - expected).abs() < 1e-12, "x={x}: {} vs {expected}", row[x]);
        }
        for x in 1..24 {
            assert!(row[x] >= row[x - 1]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn stitch_inverts_tile(h in 8usize..70, w in 8usize..70, t in 4usize..40, ov_frac in 0.0f64..0.95, seed in 0u64..1000) {
            let t = t.min(h).min(w);
            let ov = ((t as f64) * ov_frac) as usize;
            let ov = ov.min(t - 1);
            let m = mic(h, w, |i, j| ((i * 31 + j * 17) as f64 + seed as f64).sin());
            let (l, p) = tile(&m, t, ov).unwrap();
            let out = stitch(&l, &p).unwrap();
            let err = (&out.data - &m.data).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            prop_assert!(err < 1e-6);
        }
    }
}
