//! Forward corruption models and the analytic conditional score of additive
//! Gaussian corruption.
//!
//! Every stochastic function takes an explicit seed and draws from its own
//! ChaCha stream, so results are reproducible and independent of call order.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::mrc_io::Patch;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianNoiseParams {
    pub sigma_a: f64,
}

impl GaussianNoiseParams {
    pub fn new(sigma_a: f64) -> Result<Self> {
        if !(sigma_a >= 0.0 && sigma_a.is_finite()) {
            return Err(Error::Parameter(format!("sigma_a must be >= 0, got {sigma_a}")));
        }
        Ok(GaussianNoiseParams { sigma_a })
    }
}

/// Shot-noise gain `alpha`, dark offset `b`, and detector read-noise std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonGaussianParams {
    pub alpha: f64,
    pub b: f64,
    pub sigma_det: f64,
}

impl Default for PoissonGaussianParams {
    fn default() -> Self {
        PoissonGaussianParams {
            alpha: 50.0,
            b: 0.0,
            sigma_det: 0.05,
        }
    }
}

impl PoissonGaussianParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.b >= 0.0) || !(self.sigma_det >= 0.0) {
            return Err(Error::Parameter(format!(
                "b and sigma_det must be >= 0, got {} and {}",
                self.b, self.sigma_det
            )));
        }
        Ok(())
    }
}

/// Per-pixel noise level `sigma(p) = a + b * value(p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialNoiseMap {
    pub a: f64,
    pub b: f64,
}

impl Default for SpatialNoiseMap {
    fn default() -> Self {
        SpatialNoiseMap { a: 0.5, b: 0.01 }
    }
}

fn check_finite(y: &Patch) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("input contains non-finite values".into()));
    }
    Ok(())
}

/// `x = y + sigma_a * u` with `u` i.i.d. standard normal. Returns `(x, u)`.
pub fn corrupt_gaussian(y: &Patch, p: GaussianNoiseParams, seed: u64) -> Result<(Patch, Patch)> {
    check_finite(y)?;
    let mut r = rng(seed);
    let u = Array2::from_shape_simple_fn(y.dim(), || r.sample::<f64, _>(StandardNormal));
    let x = y + &(&u * p.sigma_a);
    Ok((x, u))
}

/// `-(x - y) / sigma_a^2`, element-wise.
pub fn conditional_score(x: &Patch, y: &Patch, sigma_a: f64) -> Result<Patch> {
    if !(sigma_a > 0.0) {
        return Err(Error::SingularNoise);
    }
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    let inv = 1.0 / (sigma_a * sigma_a);
    Ok(Zip::from(x).and(y).map_collect(|&a, &b| -(a - b) * inv))
}

/// Affine map applied by [`normalize_intensity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityNormalization {
    pub low: f64,
    pub high: f64,
}

impl IntensityNormalization {
    pub fn apply(&self, v: f64) -> f64 {
        ((v - self.low) / (self.high - self.low)).clamp(0.0, 1.0)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Maps the 1st/99th percentiles to 0/1 and clamps outside. A flat image maps to zeros.
pub fn normalize_intensity(y: &Patch) -> (Patch, IntensityNormalization) {
    let mut sorted: Vec<f64> = y.iter().copied().collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let low = percentile(&sorted, 0.01);
    let mut high = percentile(&sorted, 0.99);
    if high <= low {
        high = low + 1.0;
    }
    let norm = IntensityNormalization { low, high };
    (y.mapv(|v| norm.apply(v)), norm)
}

/// Poisson shot noise plus Gaussian read noise on an intensity image
/// already normalized to `[0, 1]`; negative values are clamped to zero.
///
/// `x = Poisson(alpha*y + b)/alpha - b/alpha + N(0, sigma_det^2)` so that `E[x] = y`.
pub fn corrupt_poisson_gaussian(y: &Patch, p: PoissonGaussianParams, seed: u64) -> Result<Patch> {
    p.validate()?;
    check_finite(y)?;
    let mut r = rng(seed);
    let det = Normal::new(0.0, p.sigma_det).expect("sigma_det validated");
    let offset = p.b / p.alpha;
    Ok(y.mapv(|v| {
        let rate = p.alpha * v.max(0.0) + p.b;
        let counts = if rate > 0.0 {
            Poisson::new(rate).expect("positive rate").sample(&mut r)
        } else {
            0.0
        };
        counts / p.alpha - offset + det.sample(&mut r)
    }))
}

/// `sigma(p) = a + b * x(p)`; fails if any value is non-positive.
pub fn eval_noise_map(x: &Patch, m: SpatialNoiseMap) -> Result<Patch> {
    let sigma = x.mapv(|v| m.a + m.b * v);
    let mut bad: Option<(f64, f64)> = None;
    for (&s, &v) in sigma.iter().zip(x.iter()) {
        if !(s > 0.0) {
            bad = Some(match bad {
                None => (v, v),
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
            });
        }
    }
    match bad {
        Some((min, max)) => Err(Error::InvalidNoiseMap { min, max }),
        None => Ok(sigma),
    }
}

/// Summed per-coordinate empirical variance of the conditional score
/// `-(x - y)/sigma_a^2` over `n_samples` draws of `x = y + sigma_a u` for a fixed `y`.
pub fn dsm_target_total_variance(d: usize, sigma_a: f64, n_samples: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let y = Array2::from_shape_simple_fn((1, d), || r.sample::<f64, _>(StandardNormal));
    let mut mean = Array2::<f64>::zeros((1, d));
    let mut m2 = Array2::<f64>::zeros((1, d));
    for k in 0..n_samples {
        let (x, _) = corrupt_gaussian(&y, GaussianNoiseParams::new(sigma_a)?, seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        let s = conditional_score(&x, &y, sigma_a)?;
        // Welford update
        let n = (k + 1) as f64;
        Zip::from(&mut mean).and(&mut m2).and(&s).for_each(|mu, q, &v| {
            let delta = v - *mu;
            *mu += delta / n;
            *q += delta * (v - *mu);
        });
    }
    Ok(m2.sum() / (n_samples as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(v: impl Iterator<Item = f64>) -> (f64, f64) {
        let xs: Vec<f64> = v.collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn zero_sigma_is_identity() {
        let y = Array2::from_shape_fn((5, 7), |(i, j)| (i + j) as f64);
        let (x, u) = corrupt_gaussian(&y, GaussianNoiseParams::new(0.0).unwrap(), 3).unwrap();
        assert_eq!(x, y);
        assert!(u.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn seeded_draws_repeat() {
        let y = Array2::zeros((8, 8));
        let p = GaussianNoiseParams::new(0.3).unwrap();
        assert_eq!(corrupt_gaussian(&y, p, 11).unwrap(), corrupt_gaussian(&y, p, 11).unwrap());
        assert_ne!(corrupt_gaussian(&y, p, 11).unwrap().1, corrupt_gaussian(&y, p, 12).unwrap().1);
    }

    #[test]
    fn gaussian_variance_monte_carlo() {
        let y = Array2::zeros((1000, 1000));
        let (x, _) = corrupt_gaussian(&y, GaussianNoiseParams::new(0.1).unwrap(), 5).unwrap();
        let (m, v) = mean_var(x.iter().copied());
        assert!((0.0099..=0.0101).contains(&v), "variance {v}");
        // mean-preserving at rate sigma/sqrt(N)
        assert!(m.abs() < 4.0 * 0.1 / 1000.0);
    }

    #[test]
    fn conditional_score_cases() {
        let y = Array2::from_elem((3, 3), 2.0);
        assert!(conditional_score(&y, &y, 0.5).unwrap().iter().all(|&v| v == 0.0));
        let x = &y + 0.01;
        let s = conditional_score(&x, &y, 0.1).unwrap();
        assert!(s.iter().all(|&v| (v + 1.0).abs() < 1e-9));
        let s2 = conditional_score(&x, &y, 0.05).unwrap();
        assert!(Zip::from(&s).and(&s2).all(|&a, &b| b == 4.0 * a));
        assert!(matches!(conditional_score(&x, &y, 0.0), Err(Error::SingularNoise)));
    }

    #[test]
    fn conditional_score_equals_scaled_draw() {
        let y = Array2::from_shape_fn((16, 16), |(i, j)| (i as f64 * 0.3).cos() + j as f64);
        let sigma = 0.25;
        let (x, u) = corrupt_gaussian(&y, GaussianNoiseParams::new(sigma).unwrap(), 9).unwrap();
        let s = conditional_score(&x, &y, sigma).unwrap();
        let err = Zip::from(&s).and(&u).fold(0.0f64, |a, &s, &u| a.max((s + u / sigma).abs()));
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn poisson_mean_and_variance() {
        let y = Array2::from_elem((1000, 1000), 0.5);
        let p = PoissonGaussianParams {
            alpha: 50.0,
            b: 0.0,
            sigma_det: 0.0,
        };
        let x = corrupt_poisson_gaussian(&y, p, 21).unwrap();
        let (m, v) = mean_var(x.iter().copied());
        assert!((m - 0.5).abs() < 0.002, "mean {m}");
        assert!((v - 0.01).abs() < 0.001, "variance {v}");
    }

    #[test]
    fn large_gain_limit() {
        let y = Array2::from_shape_fn((300, 300), |(i, j)| ((i * 300 + j) % 97) as f64 / 96.0);
        let p = PoissonGaussianParams {
            alpha: 1e6,
            b: 0.0,
            sigma_det: 0.05,
        };
        let x = corrupt_poisson_gaussian(&y, p, 4).unwrap();
        let (m, v) = mean_var((&x - &y).iter().copied());
        let mean_y = y.mean().unwrap();
        assert!(m.abs() < 1e-3);
        // shot variance (total minus detector) is below 1e-6 * mean
        assert!((v - 0.0025).abs() < 2e-4 + 1e-6 * mean_y, "variance {v}");
        let noiseless = PoissonGaussianParams { sigma_det: 0.0, ..p };
        let x0 = corrupt_poisson_gaussian(&y, noiseless, 4).unwrap();
        let (_, shot) = mean_var((&x0 - &y).iter().copied());
        assert!(shot < 1e-6 * mean_y, "shot variance {shot}");
    }

    #[test]
    fn poisson_params() {
        assert_eq!(
            PoissonGaussianParams::default(),
            PoissonGaussianParams {
                alpha: 50.0,
                b: 0.0,
                sigma_det: 0.05
            }
        );
        let y = Array2::zeros((2, 2));
        let bad = PoissonGaussianParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(matches!(corrupt_poisson_gaussian(&y, bad, 0), Err(Error::Parameter(_))));
        assert!(corrupt_poisson_gaussian(&y, PoissonGaussianParams::default(), 0).is_ok());
    }

    #[test]
    fn dark_offset_keeps_mean() {
        let y = Array2::from_elem((400, 400), 0.2);
        let p = PoissonGaussianParams {
            alpha: 50.0,
            b: 3.0,
            sigma_det: 0.0,
        };
        let x = corrupt_poisson_gaussian(&y, p, 8).unwrap();
        let (m, v) = mean_var(x.iter().copied());
        assert!((m - 0.2).abs() < 0.003);
        let expected = 0.2 / 50.0 + 3.0 / 2500.0;
        assert!((v / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn normalization_percentiles() {
        let y = Array2::from_shape_fn((10, 10), |(i, j)| (i * 10 + j) as f64);
        let (n, a) = normalize_intensity(&y);
        assert!((a.low - 0.99).abs() < 1e-12 && (a.high - 98.01).abs() < 1e-12);
        assert_eq!(n[[0, 0]], 0.0);
        assert_eq!(n[[9, 9]], 1.0);
        let (flat, _) = normalize_intensity(&Array2::from_elem((3, 3), 7.0));
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_map_cases() {
        let m = SpatialNoiseMap::default();
        let zero = Array2::zeros((4, 4));
        assert!(eval_noise_map(&zero, m).unwrap().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let ten = Array2::from_elem((4, 4), 10.0);
        assert!(eval_noise_map(&ten, m).unwrap().iter().all(|&v| (v - 0.6).abs() < 1e-12));
        let flat = SpatialNoiseMap { a: 0.3, b: 0.0 };
        assert!(eval_noise_map(&ten, flat).unwrap().iter().all(|&v| v == 0.3));
        let x = Array2::from_shape_fn((1, 5), |(_, j)| -(j as f64) * 20.0);
        match eval_noise_map(&x, m) {
            Err(Error::InvalidNoiseMap { min, max }) => assert_eq!((min, max), (-80.0, -60.0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn variance_pathology_ratio() {
        let lo = dsm_target_total_variance(16, 0.01, 20_000, 1).unwrap();
        let hi = dsm_target_total_variance(16, 0.1, 20_000, 2).unwrap();
        let ratio = lo / hi;
        assert!((90.0..=110.0).contains(&ratio), "ratio {ratio}");
        assert!((hi / (16.0 / 0.01) - 1.0).abs() < 0.05);
    }
}
