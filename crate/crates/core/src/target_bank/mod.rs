//! Bank of coarse structural targets: low-passed multi-view projections of a
//! reference volume, their feature subspace, and similarity matching of
//! noisy patches against it.

mod archive;
mod projection;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mrc_io::{standardize, Patch, Volume};

pub use archive::{read_bank, read_bank_from, write_bank, write_bank_to};
pub use projection::{
    fibonacci_views, lowpass_filter, project_volume, Rotation, DEFAULT_ROLLOFF_FRACTION,
};

/// Relative rank tolerance for the feature subspace.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// A bank whose RMS spread around its mean is below this fraction of the
/// projections' RMS is treated as a single target.
pub const DEGENERATE_SPREAD: f64 = 0.01;

/// Maps a patch to a feature vector (the `psi` used for matching).
pub trait FeatureMap {
    fn features(&self, patch: &Patch) -> Vec<f64>;
}

impl<F: FeatureMap + ?Sized> FeatureMap for &F {
    fn features(&self, patch: &Patch) -> Vec<f64> {
        (**self).features(patch)
    }
}

/// Network-free fallback feature map: block-average by `factor`, flatten, L2-normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownsampleFeatures {
    pub factor: usize,
}

impl Default for DownsampleFeatures {
    fn default() -> Self {
        DownsampleFeatures { factor: 8 }
    }
}

impl FeatureMap for DownsampleFeatures {
    fn features(&self, patch: &Patch) -> Vec<f64> {
        let f = self.factor.max(1);
        let (h, w) = patch.dim();
        let (bh, bw) = ((h / f).max(1), (w / f).max(1));
        let (fh, fw) = (h / bh, w / bw);
        let mut out = vec![0.0; bh * bw];
        for ((r, c), v) in patch.indexed_iter() {
            let (br, bc) = (r / fh, c / fw);
            if br < bh && bc < bw {
                out[br * bw + bc] += v;
            }
        }
        let scale = 1.0 / (fh * fw) as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        l2_normalize(&mut out);
        out
    }
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    pub n_views: usize,
    pub inplane_rotations: usize,
    /// Low-pass cutoff in 1/Å.
    pub cutoff: f64,
    pub rolloff_fraction: f64,
    pub temperature: f64,
    /// Side length of each projection; must equal the training patch size.
    pub out_size: usize,
    /// Subtract each aggregated target's own mean after matching.
    pub center_per_match: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            n_views: 64,
            inplane_rotations: 1,
            cutoff: 1.0 / 20.0,
            rolloff_fraction: DEFAULT_ROLLOFF_FRACTION,
            temperature: 0.1,
            out_size: 64,
            center_per_match: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetBank {
    /// Centered projections `y_j - center`.
    pub projections: Vec<Patch>,
    /// Feature vector of each projection, one row per target.
    pub features: Vec<Vec<f64>>,
    /// Orthonormal basis of the feature span, `q × r`.
    pub basis: DMatrix<f64>,
    pub sigma2_surrogate: f64,
    pub center: Patch,
    pub lowpass_cutoff: f64,
    pub n_views: usize,
    pub temperature: f64,
    pub center_per_match: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub weights: Vec<f64>,
    pub similarities: Vec<f64>,
    pub target: Patch,
    pub confidence: f64,
    pub temperature: f64,
    /// The projected feature vanished; weights are uniform.
    pub degenerate: bool,
}

impl TargetBank {
    /// Builds a bank from already-rendered projections (uncentered).
    pub fn from_projections(
        raw: Vec<Patch>,
        feature_map: &dyn FeatureMap,
        temperature: f64,
        lowpass_cutoff: f64,
        center_per_match: bool,
    ) -> Result<TargetBank> {
        if raw.is_empty() {
            return Err(Error::DegenerateBank("bank has no projections".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
        }
        let dim = raw[0].dim();
        if raw.iter().any(|p| p.dim() != dim) {
            return Err(Error::Shape("bank projections differ in shape".into()));
        }
        // Stored at f32 precision so the archive round-trips exactly.
        let raw: Vec<Patch> = raw.into_iter().map(|p| p.mapv(|v| v as f32 as f64)).collect();
        let m = raw.len();
        let d = (dim.0 * dim.1) as f64;
        let mut center = Patch::zeros(dim);
        for p in &raw {
            center += p;
        }
        center /= m as f64;
        let projections: Vec<Patch> = raw.iter().map(|p| p - &center).collect();
        let sigma2 = projections.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            / (m as f64 * d);
        let mean_sq = raw.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / (m as f64 * d);
        if !(sigma2 > DEGENERATE_SPREAD * DEGENERATE_SPREAD * mean_sq) || !(sigma2 > 0.0) {
            return Err(Error::DegenerateBank(format!(
                "projections are indistinguishable (surrogate variance {sigma2:.3e}, signal power {mean_sq:.3e})"
            )));
        }
        let mut bank = TargetBank {
            projections,
            features: Vec::new(),
            basis: DMatrix::zeros(0, 0),
            sigma2_surrogate: sigma2,
            center,
            lowpass_cutoff,
            n_views: m,
            temperature,
            center_per_match,
        };
        bank.refresh_features(feature_map)?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn patch_dim(&self) -> (usize, usize) {
        self.center.dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// The uncentered projection `j`.
    pub fn raw_projection(&self, j: usize) -> Patch {
        &self.projections[j] + &self.center
    }

    /// Recomputes features and subspace with `feature_map`; projections are untouched.
    pub fn refresh_features(&mut self, feature_map: &dyn FeatureMap) -> Result<()> {
        let features: Vec<Vec<f64>> = (0..self.len())
            .map(|j| feature_map.features(&standardize(&self.raw_projection(j)).0))
            .collect();
        let q = features[0].len();
        if q == 0 || features.iter().any(|f| f.len() != q) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        if features.iter().any(|f| f.iter().map(|v| v * v).sum::<f64>() == 0.0) {
            return Err(Error::DegenerateBank("a target has a zero feature vector".into()));
        }
        let basis = orthonormal_basis(&features)?;
        self.features = features;
        self.basis = basis;
        Ok(())
    }

    /// `B (Bᵀ x)`.
    pub fn project_to_subspace(&self, x_feat: &[f64]) -> Result<Vec<f64>> {
        if x_feat.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature has {} entries, bank expects {}",
                x_feat.len(),
                self.feature_dim()
            )));
        }
        let x = nalgebra::DVector::from_column_slice(x_feat);
        let coeffs = self.basis.transpose() * &x;
        Ok((&self.basis * coeffs).iter().copied().collect())
    }

    /// Matches a patch given its feature vector.
    pub fn match_features(&self, x_feat: &[f64]) -> Result<MatchResult> {
        let m = self.len();
        let proj = self.project_to_subspace(x_feat)?;
        let pn = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xn = x_feat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(pn > 1e-12 * xn.max(1e-300)) || !(xn > 0.0) {
            let w = vec![1.0 / m as f64; m];
            return Ok(MatchResult {
                target: self.aggregate(&w),
                confidence: 1.0 / m as f64,
                similarities: vec![0.0; m],
                weights: w,
                temperature: self.temperature,
                degenerate: true,
            });
        }
        let similarities: Vec<f64> = self
            .features
            .iter()
            .map(|z| {
                let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = z.iter().zip(&proj).map(|(a, b)| a * b).sum();
                (dot / (zn * pn)).clamp(-1.0, 1.0)
            })
            .collect();
        let weights = softmax(&similarities, self.temperature);
        let confidence = weights.iter().cloned().fold(0.0, f64::max);
        Ok(MatchResult {
            target: self.aggregate(&weights),
            similarities,
            weights,
            confidence,
            temperature: self.temperature,
            degenerate: false,
        })
    }

    /// Matches a patch using `feature_map` for its features.
    pub fn match_patch(&self, x: &Patch, feature_map: &dyn FeatureMap) -> Result<MatchResult> {
        if x.dim() != self.patch_dim() {
            return Err(Error::Shape(format!(
                "patch {:?} does not match bank {:?}",
                x.dim(),
                self.patch_dim()
            )));
        }
        self.match_features(&feature_map.features(x))
    }

    fn aggregate(&self, weights: &[f64]) -> Patch {
        let mut t = Patch::zeros(self.patch_dim());
        for (w, p) in weights.iter().zip(&self.projections) {
            if *w != 0.0 {
                t.scaled_add(*w, p);
            }
        }
        if self.center_per_match {
            let mean = t.mean().unwrap_or(0.0);
            t.mapv_inplace(|v| v - mean);
        }
        t
    }
}

/// Temperature-scaled softmax, shifted by the maximum for stability.
pub fn softmax(a: &[f64], temperature: f64) -> Vec<f64> {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn orthonormal_basis(features: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let q = features[0].len();
    let z = DMatrix::from_fn(q, features.len(), |i, j| features[j][i]);
    let svd = z.svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > RANK_TOLERANCE * smax && s > 0.0)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::DegenerateBank("feature subspace has rank 0".into()));
    }
    Ok(DMatrix::from_fn(q, keep.len(), |i, k| u[(i, keep[k])]))
}

/// Low-pass `v`, project it over quasi-uniform views, and build the bank.
pub fn build_bank(v: &Volume, cfg: &BankConfig, feature_map: &dyn FeatureMap) -> Result<TargetBank> {
    if cfg.n_views == 0 {
        return Err(Error::Parameter("n_views must be >= 1".into()));
    }
    let filtered = lowpass_filter(v, cfg.cutoff, cfg.rolloff_fraction)?;
    let raw = fibonacci_views(cfg.n_views, cfg.inplane_rotations)
        .iter()
        .map(|rot| project_volume(&filtered, rot, cfg.out_size))
        .collect::<Result<Vec<_>>>()?;
    TargetBank::from_projections(raw, feature_map, cfg.temperature, cfg.cutoff, cfg.center_per_match)
}
