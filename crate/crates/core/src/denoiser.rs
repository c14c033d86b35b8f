//! Iterative score-field refinement `x ← x + σ(x)²·s(x; σ̄)` over tiled micrographs.

use crate::error::{Error, Result};
use crate::mrc_io::{standardize, stitch, tile, Micrograph, Patch};
use crate::noise_model::{eval_noise_map, SpatialNoiseMap};
use crate::score_model::layers::Real;
use crate::score_model::ScoreModel;

/// Largest per-pixel change allowed in one iteration, in standardized units.
pub const DEFAULT_MAX_UPDATE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    pub n_iterations: usize,
    pub noise_map: SpatialNoiseMap,
    /// Defaults to the model patch size.
    pub tile_size: Option<usize>,
    /// Defaults to a quarter of the tile size.
    pub overlap: Option<usize>,
    pub max_update: f64,
    /// Evaluate the map at the iteration index instead of the pixel value,
    /// giving a spatially uniform `σ_k = a + b·k`.
    pub iteration_indexed: bool,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            n_iterations: 5,
            noise_map: SpatialNoiseMap::default(),
            tile_size: None,
            overlap: None,
            max_update: DEFAULT_MAX_UPDATE,
            iteration_indexed: false,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Parameter("n_iterations must be at least 1".into()));
        }
        if !(self.max_update > 0.0) {
            return Err(Error::Parameter("max_update must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that returns a score field for an input and a conditioning level.
pub trait ScoreField {
    fn score(&self, x: &Patch, sigma_a: f64) -> Result<Patch>;

    /// Natural tile size, if any.
    fn patch_size(&self) -> Option<usize> {
        None
    }
}

impl<T: Real> ScoreField for ScoreModel<T> {
    fn score(&self, x: &Patch, sigma_a: f64) -> Result<Patch> {
        Ok(self.forward(std::slice::from_ref(x), &[sigma_a])?.remove(0))
    }

    fn patch_size(&self) -> Option<usize> {
        Some(self.config.patch_size)
    }
}

/// Wraps a closure as a [`ScoreField`].
pub struct FnScore<F>(pub F);

impl<F: Fn(&Patch, f64) -> Patch> ScoreField for FnScore<F> {
    fn score(&self, x: &Patch, sigma_a: f64) -> Result<Patch> {
        Ok((self.0)(x, sigma_a))
    }
}

/// Per-run counters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenoiseStats {
    /// Pixel updates limited by `max_update`, summed over iterations and tiles.
    pub clamped_updates: usize,
    pub tiles: usize,
}

fn noise_levels(x: &Patch, cfg: &DenoiseConfig, k: usize) -> Result<Patch> {
    if cfg.iteration_indexed {
        let s = cfg.noise_map.a + cfg.noise_map.b * k as f64;
        if !(s > 0.0) {
            return Err(Error::InvalidNoiseMap {
                min: k as f64,
                max: k as f64,
            });
        }
        Ok(x.mapv(|_| s))
    } else {
        eval_noise_map(x, cfg.noise_map)
    }
}

/// Runs `n_iterations` steps of `x ← x + σ_k²·s(x; mean σ_k)`.
pub fn denoise_patch(model: &dyn ScoreField, x: &Patch, cfg: &DenoiseConfig) -> Result<Patch> {
    let mut stats = DenoiseStats::default();
    denoise_patch_with_stats(model, x, cfg, &mut stats)
}

fn denoise_patch_with_stats(model: &dyn ScoreField, x: &Patch, cfg: &DenoiseConfig, stats: &mut DenoiseStats) -> Result<Patch> {
    cfg.validate()?;
    let mut cur = x.clone();
    for k in 0..cfg.n_iterations {
        let sigma = noise_levels(&cur, cfg, k)?;
        let level = sigma.mean().expect("nonempty");
        let s = model.score(&cur, level)?;
        if s.dim() != cur.dim() {
            return Err(Error::Shape(format!("score field {:?} for input {:?}", s.dim(), cur.dim())));
        }
        let mut clamped = 0;
        for ((c, &sg), &sc) in cur.iter_mut().zip(sigma.iter()).zip(s.iter()) {
            let mut d = sg * sg * sc;
            if d.abs() > cfg.max_update {
                d = d.clamp(-cfg.max_update, cfg.max_update);
                clamped += 1;
            }
            *c += d;
        }
        if clamped > 0 {
            log::warn!("iteration {k}: update clamped at {} on {clamped} pixels", cfg.max_update);
            stats.clamped_updates += clamped;
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(k));
        }
    }
    Ok(cur)
}

/// Standardizes the whole micrograph, denoises overlapping tiles, blends them
/// back and restores the original mean and scale. Metadata is carried over.
pub fn denoise_micrograph(model: &dyn ScoreField, m: &Micrograph, cfg: &DenoiseConfig) -> Result<(Micrograph, DenoiseStats)> {
    cfg.validate()?;
    let tile_size = cfg
        .tile_size
        .or(model.patch_size())
        .ok_or_else(|| Error::Parameter("tile size must be given for this score field".into()))?;
    let overlap = cfg.overlap.unwrap_or(tile_size / 4);
    let (z, mean, std) = standardize(&m.data);
    let zm = Micrograph {
        data: z,
        pixel_size_angstrom: m.pixel_size_angstrom,
        origin: m.origin,
        provenance: m.provenance.clone(),
    };
    let (layout, tiles) = tile(&zm, tile_size, overlap)?;
    let mut stats = DenoiseStats {
        tiles: tiles.len(),
        ..Default::default()
    };
    let out: Vec<Patch> = tiles
        .iter()
        .map(|t| denoise_patch_with_stats(model, t, cfg, &mut stats))
        .collect::<Result<_>>()?;
    let mut stitched = stitch(&layout, &out)?;
    stitched.data.mapv_inplace(|v| v * std + mean);
    Ok((stitched, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::rng;
    use ndarray::Array2;
    use rand::Rng;

    fn rand_patch(h: usize, w: usize, seed: u64) -> Patch {
        let mut r = rng(seed);
        Array2::from_shape_simple_fn((h, w), || r.random::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn tweedie_fixed_point() {
        let target = rand_patch(8, 8, 1);
        let x = rand_patch(8, 8, 2);
        let sbar = 0.7;
        let t2 = target.clone();
        let oracle = FnScore(move |z: &Patch, _| -(z - &t2) / (sbar * sbar));
        let cfg = DenoiseConfig {
            n_iterations: 1,
            noise_map: SpatialNoiseMap { a: sbar, b: 0.0 },
            ..Default::default()
        };
        let out = denoise_patch(&oracle, &x, &cfg).unwrap();
        assert!((&out - &target).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_score_is_identity() {
        let x = rand_patch(8, 8, 3);
        let zero = FnScore(|z: &Patch, _| z.mapv(|_| 0.0));
        for n in [1, 5] {
            let cfg = DenoiseConfig {
                n_iterations: n,
                ..Default::default()
            };
            assert_eq!(denoise_patch(&zero, &x, &cfg).unwrap(), x);
        }
        let bad = DenoiseConfig {
            n_iterations: 0,
            ..Default::default()
        };
        assert!(denoise_patch(&zero, &x, &bad).is_err());
    }

    #[test]
    fn update_scales_with_map_squared() {
        let x = rand_patch(6, 6, 4);
        let lin = FnScore(|z: &Patch, _| z * -0.1);
        let step = |a: f64| {
            let cfg = DenoiseConfig {
                n_iterations: 1,
                noise_map: SpatialNoiseMap { a, b: 0.0 },
                ..Default::default()
            };
            denoise_patch(&lin, &x, &cfg).unwrap() - &x
        };
        let (d1, d2) = (step(0.5), step(1.0));
        assert!(d1.iter().zip(d2.iter()).all(|(a, b)| (b - 4.0 * a).abs() < 1e-12));
    }

    #[test]
    fn clamp_and_divergence() {
        let x = Array2::from_elem((4, 4), 1.0);
        let huge = FnScore(|z: &Patch, _| z * 1e6);
        let cfg = DenoiseConfig {
            n_iterations: 1,
            ..Default::default()
        };
        let out = denoise_patch(&huge, &x, &cfg).unwrap();
        assert!(out.iter().all(|&v| (v - 6.0).abs() < 1e-12));
        let nan = FnScore(|z: &Patch, _| z.mapv(|_| f64::NAN));
        assert!(matches!(denoise_patch(&nan, &x, &cfg), Err(Error::Divergence(0))));
        let neg = DenoiseConfig {
            noise_map: SpatialNoiseMap { a: -1.0, b: 0.0 },
            ..Default::default()
        };
        assert!(matches!(denoise_patch(&huge, &x, &neg), Err(Error::InvalidNoiseMap { .. })));
    }

    #[test]
    fn iteration_indexed_levels() {
        let x = rand_patch(4, 4, 5);
        let seen = std::cell::RefCell::new(Vec::new());
        let rec = FnScore(|z: &Patch, s: f64| {
            seen.borrow_mut().push(s);
            z.mapv(|_| 0.0)
        });
        let cfg = DenoiseConfig {
            n_iterations: 3,
            noise_map: SpatialNoiseMap { a: 0.5, b: 0.25 },
            iteration_indexed: true,
            ..Default::default()
        };
        denoise_patch(&rec, &x, &cfg).unwrap();
        assert_eq!(*seen.borrow(), vec![0.5, 0.75, 1.0]);
    }

    fn mic(data: Patch) -> Micrograph {
        Micrograph::new(data, 1.7).unwrap().with_provenance("test")
    }

    #[test]
    fn micrograph_identity_and_constant() {
        let m = mic(rand_patch(70, 90, 6));
        let zero = FnScore(|z: &Patch, _| z.mapv(|_| 0.0));
        let cfg = DenoiseConfig {
            tile_size: Some(32),
            ..Default::default()
        };
        let (out, stats) = denoise_micrograph(&zero, &m, &cfg).unwrap();
        assert!((&out.data - &m.data).iter().all(|v| v.abs() < 1e-5));
        assert_eq!((out.pixel_size_angstrom, out.provenance.as_str()), (1.7, "test"));
        assert!(stats.tiles > 1);
        let c = mic(Array2::from_elem((50, 50), 2.5));
        let shrink = FnScore(|z: &Patch, _| z * -1.0);
        let (out, _) = denoise_micrograph(&shrink, &c, &cfg).unwrap();
        assert!(out.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(denoise_micrograph(&zero, &m, &DenoiseConfig::default()).is_err());
    }

    #[test]
    fn pointwise_field_has_no_seams() {
        // a pixelwise field makes the tiled result equal the untiled one
        let f = FnScore(|z: &Patch, _| z.mapv(|v| -v.tanh()));
        let m = mic(rand_patch(96, 80, 7));
        let tiled = DenoiseConfig {
            tile_size: Some(32),
            overlap: Some(12),
            ..Default::default()
        };
        let whole = DenoiseConfig {
            tile_size: Some(80),
            overlap: Some(0),
            ..Default::default()
        };
        let (a, _) = denoise_micrograph(&f, &m, &tiled).unwrap();
        let (b, _) = denoise_micrograph(&f, &m, &whole).unwrap();
        let worst = (&a.data - &b.data).iter().fold(0.0f64, |w, v| w.max(v.abs()));
        assert!(worst < 1e-12, "{worst}");
    }
}
