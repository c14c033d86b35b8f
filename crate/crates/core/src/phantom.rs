//! Synthetic ground truth: Gaussian-blob volumes, particle placement on a
//! canvas with known centers, and corruption.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::evaluation::ParticleSet;
use crate::mrc_io::{write_micrograph, Micrograph, Volume};
use crate::noise_model::{
    corrupt_gaussian, corrupt_poisson_gaussian, normalize_intensity, rng, GaussianNoiseParams, IntensityNormalization,
    PoissonGaussianParams,
};
use crate::target_bank::{project_volume, Rotation};
use crate::trainer::derive_seed;

const SEED_ROTATIONS: u64 = 101;
const SEED_PLACEMENT: u64 = 102;
const SEED_POISSON: u64 = 103;
const SEED_GAUSSIAN: u64 = 104;

/// Isotropic 3-D Gaussian. `center` is `(x, y, z)` in voxels relative to the grid center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub std: f64,
    pub amplitude: f64,
}

impl Blob {
    /// Analytic integral over all space.
    pub fn mass(&self) -> f64 {
        self.amplitude * (2.0 * std::f64::consts::PI).powf(1.5) * self.std.powi(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub volume_blobs: Vec<Blob>,
    /// Side of the cubic volume grid.
    pub grid_size: usize,
    pub voxel_size: f64,
    /// `(height, width)`.
    pub canvas_size: (usize, usize),
    pub n_particles: usize,
    pub min_separation: f64,
    /// Side of each projected particle box; at least `grid_size`.
    pub particle_size: usize,
    pub rotation_seed: u64,
    pub noise: PoissonGaussianParams,
    /// Additive Gaussian noise applied after the Poisson-Gaussian stage.
    pub gaussian: GaussianNoiseParams,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            volume_blobs: vec![
                Blob {
                    center: [-4.0, -1.0, 0.0],
                    std: 2.6,
                    amplitude: 1.0,
                },
                Blob {
                    center: [4.0, 2.5, -1.5],
                    std: 2.0,
                    amplitude: 0.8,
                },
                Blob {
                    center: [0.5, -5.0, 2.0],
                    std: 1.6,
                    amplitude: 0.6,
                },
            ],
            grid_size: 32,
            voxel_size: 2.0,
            canvas_size: (256, 256),
            n_particles: 12,
            min_separation: 40.0,
            particle_size: 32,
            rotation_seed: 0,
            noise: PoissonGaussianParams::default(),
            gaussian: GaussianNoiseParams { sigma_a: 0.5 },
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.volume_blobs.len() < 2 {
            return Err(Error::Spec("at least two blobs are needed for an asymmetric volume".into()));
        }
        for (i, a) in self.volume_blobs.iter().enumerate() {
            if !(a.std > 0.0) || !a.amplitude.is_finite() || a.center.iter().any(|c| !c.is_finite()) {
                return Err(Error::Spec(format!("blob {i} has invalid parameters")));
            }
            if self.volume_blobs[..i].iter().any(|b| b.center == a.center) {
                return Err(Error::Spec(format!("blob {i} repeats an earlier center")));
            }
        }
        if self.grid_size == 0 || !(self.voxel_size > 0.0) {
            return Err(Error::Spec("grid size and voxel size must be positive".into()));
        }
        if self.particle_size < self.grid_size {
            return Err(Error::Spec(format!(
                "particle_size {} is smaller than the volume grid {}",
                self.particle_size, self.grid_size
            )));
        }
        if self.min_separation < self.particle_size as f64 {
            return Err(Error::Spec(format!(
                "min_separation {} must be at least particle_size {}",
                self.min_separation, self.particle_size
            )));
        }
        let (h, w) = self.canvas_size;
        if self.particle_size > h.min(w) {
            return Err(Error::Spec("particles do not fit on the canvas".into()));
        }
        self.noise.validate().map_err(|e| Error::Spec(e.to_string()))?;
        GaussianNoiseParams::new(self.gaussian.sigma_a).map_err(|e| Error::Spec(e.to_string()))?;
        Ok(())
    }

    /// Same spec with every random stream re-keyed for micrograph `index`.
    pub fn for_micrograph(&self, index: usize) -> PhantomSpec {
        PhantomSpec {
            rotation_seed: derive_seed(self.rotation_seed, 100, index as u64),
            ..self.clone()
        }
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let (h, w) = self.canvas_size;
        let _ = writeln!(s, "canvas_height = {h}");
        let _ = writeln!(s, "canvas_width = {w}");
        let _ = writeln!(s, "n_particles = {}", self.n_particles);
        let _ = writeln!(s, "min_separation = {}", self.min_separation);
        let _ = writeln!(s, "particle_size = {}", self.particle_size);
        let _ = writeln!(s, "rotation_seed = {}", self.rotation_seed);
        let _ = writeln!(s, "grid_size = {}", self.grid_size);
        let _ = writeln!(s, "voxel_size = {}", self.voxel_size);
        for b in &self.volume_blobs {
            let [x, y, z] = b.center;
            let _ = writeln!(s, "blob = {x}, {y}, {z}, {}, {}", b.std, b.amplitude);
        }
        let _ = writeln!(s, "noise_alpha = {}", self.noise.alpha);
        let _ = writeln!(s, "noise_offset = {}", self.noise.b);
        let _ = writeln!(s, "noise_sigma_det = {}", self.noise.sigma_det);
        let _ = writeln!(s, "gaussian_sigma = {}", self.gaussian.sigma_a);
        s
    }

    /// Parses `key = value` lines over the defaults. The first `blob` line
    /// replaces the default blob list; later ones append.
    pub fn parse(text: &str) -> Result<PhantomSpec> {
        let mut spec = PhantomSpec::default();
        let mut blobs = Vec::new();
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::Parse(format!("{k}: cannot parse {v:?}")))
        };
        let int = |k: &str, v: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|_| Error::Parse(format!("{k}: cannot parse {v:?}")))
        };
        for (k, v) in crate::trainer::parse_key_values(text)? {
            let v = v.as_str();
            match k.as_str() {
                "canvas_height" => spec.canvas_size.0 = int(&k, v)?,
                "canvas_width" => spec.canvas_size.1 = int(&k, v)?,
                "n_particles" => spec.n_particles = int(&k, v)?,
                "min_separation" => spec.min_separation = num(&k, v)?,
                "particle_size" => spec.particle_size = int(&k, v)?,
                "rotation_seed" | "seed" => {
                    spec.rotation_seed = v.parse().map_err(|_| Error::Parse(format!("{k}: cannot parse {v:?}")))?
                }
                "grid_size" => spec.grid_size = int(&k, v)?,
                "voxel_size" => spec.voxel_size = num(&k, v)?,
                "noise_alpha" => spec.noise.alpha = num(&k, v)?,
                "noise_offset" => spec.noise.b = num(&k, v)?,
                "noise_sigma_det" => spec.noise.sigma_det = num(&k, v)?,
                "gaussian_sigma" => spec.gaussian.sigma_a = num(&k, v)?,
                "blob" => {
                    let f: Vec<f64> = v.split(',').map(|x| num(&k, x.trim())).collect::<Result<_>>()?;
                    if f.len() != 5 {
                        return Err(Error::Parse(format!("blob needs x, y, z, std, amplitude; got {v:?}")));
                    }
                    blobs.push(Blob {
                        center: [f[0], f[1], f[2]],
                        std: f[3],
                        amplitude: f[4],
                    });
                }
                _ => return Err(Error::Parse(format!("unknown phantom key {k:?}"))),
            }
        }
        if !blobs.is_empty() {
            spec.volume_blobs = blobs;
        }
        Ok(spec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<PhantomSpec> {
        let path = path.as_ref();
        PhantomSpec::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Sum of the phantom's blobs sampled on its cubic grid. Blobs whose 4-std
/// support leaves the grid are rejected.
pub fn make_volume(spec: &PhantomSpec) -> Result<Volume> {
    let n = spec.grid_size;
    if n == 0 || !(spec.voxel_size > 0.0) {
        return Err(Error::Spec("grid size and voxel size must be positive".into()));
    }
    let c = (n as f64 - 1.0) / 2.0;
    for (i, b) in spec.volume_blobs.iter().enumerate() {
        if !(b.std > 0.0) {
            return Err(Error::Spec(format!("blob {i} has std {}", b.std)));
        }
        for &x in &b.center {
            let (lo, hi) = (c + x - 4.0 * b.std, c + x + 4.0 * b.std);
            if lo < -0.5 || hi > n as f64 - 0.5 {
                return Err(Error::Spec(format!(
                    "blob {i} extends past the {n}-voxel grid at 4 std; enlarge grid_size"
                )));
            }
        }
    }
    let data = Array3::from_shape_fn((n, n, n), |(k, j, i)| {
        let p = [i as f64 - c, j as f64 - c, k as f64 - c];
        spec.volume_blobs
            .iter()
            .map(|b| {
                let d2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
                b.amplitude * (-d2 / (2.0 * b.std * b.std)).exp()
            })
            .sum()
    });
    Volume::new(data, spec.voxel_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Noise-free superposition of projections.
    pub clean: Micrograph,
    pub noisy: Micrograph,
    /// Percentile normalization applied to `clean` before corruption;
    /// `noisy` is on the normalized scale.
    pub normalization: IntensityNormalization,
    pub coordinates: ParticleSet,
    pub rotations: Vec<Rotation>,
}

impl GroundTruth {
    /// `clean` on the scale of `noisy`.
    pub fn clean_normalized(&self) -> Array2<f64> {
        self.clean.data.mapv(|v| self.normalization.apply(v))
    }

    /// Writes `clean.mrc`, `noisy.mrc` and `coords.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_micrograph(&self.clean, dir.join("clean.mrc"))?;
        write_micrograph(&self.noisy, dir.join("noisy.mrc"))?;
        self.coordinates.write(dir.join("coords.txt"))
    }
}

/// Places `n_particles` randomly rotated projections at random positions at
/// least `min_separation` apart, then corrupts the normalized canvas with
/// Poisson-Gaussian and additive Gaussian noise.
pub fn make_micrograph(spec: &PhantomSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let volume = make_volume(spec)?;
    let (h, w) = spec.canvas_size;
    let p = spec.particle_size;
    let off = (p as f64 - 1.0) / 2.0;

    let mut place_rng = rng(derive_seed(spec.rotation_seed, SEED_PLACEMENT, 0));
    let budget = 10_000 * spec.n_particles;
    let mut tops: Vec<(usize, usize)> = Vec::with_capacity(spec.n_particles);
    let mut attempts = 0;
    let d2 = spec.min_separation * spec.min_separation;
    while tops.len() < spec.n_particles {
        if attempts >= budget {
            return Err(Error::Density { attempts });
        }
        attempts += 1;
        let y = place_rng.random_range(0..=h - p);
        let x = place_rng.random_range(0..=w - p);
        let ok = tops.iter().all(|&(a, b)| {
            let (dy, dx) = (a as f64 - y as f64, b as f64 - x as f64);
            dy * dy + dx * dx >= d2
        });
        if ok {
            tops.push((y, x));
        }
    }

    let mut rot_rng = rng(derive_seed(spec.rotation_seed, SEED_ROTATIONS, 0));
    let rotations: Vec<Rotation> = (0..spec.n_particles).map(|_| Rotation::random(&mut rot_rng)).collect();
    let mut canvas = Array2::<f64>::zeros((h, w));
    for (&(y, x), rot) in tops.iter().zip(&rotations) {
        let proj = project_volume(&volume, rot, p)?;
        canvas.slice_mut(s![y..y + p, x..x + p]).zip_mut_with(&proj, |a, b| *a += b);
    }
    let (normalized, normalization) = normalize_intensity(&canvas);
    let pg = corrupt_poisson_gaussian(&normalized, spec.noise, derive_seed(spec.rotation_seed, SEED_POISSON, 0))?;
    let noisy = if spec.gaussian.sigma_a > 0.0 {
        corrupt_gaussian(&pg, spec.gaussian, derive_seed(spec.rotation_seed, SEED_GAUSSIAN, 0))?.0
    } else {
        pg
    };
    let label = format!("phantom seed={}", spec.rotation_seed);
    let coordinates = ParticleSet::new(
        tops.iter().map(|&(y, x)| (x as f64 + off, y as f64 + off)).collect(),
        label.clone(),
    )?;
    Ok(GroundTruth {
        clean: Micrograph::new(canvas, spec.voxel_size)?.with_provenance(label.clone()),
        noisy: Micrograph::new(noisy, spec.voxel_size)?.with_provenance(label),
        normalization,
        coordinates,
        rotations,
    })
}

/// `n` micrographs with independent streams.
pub fn make_dataset(spec: &PhantomSpec, n: usize) -> Result<Vec<GroundTruth>> {
    (0..n).map(|i| make_micrograph(&spec.for_micrograph(i))).collect()
}
