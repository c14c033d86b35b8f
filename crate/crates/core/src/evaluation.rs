//! Particle-picking metrics, Fourier shell correlation, PSNR, and a
//! normalized cross-correlation template picker.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::mrc_io::{Patch, Volume};
use crate::spectral::{fftn, signed_index};

/// Default matching radius in pixels.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 32.0;
pub const FSC_THRESHOLD: f64 = 0.143;

/// Particle centers `(x, y)` in pixels for one micrograph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleSet {
    pub coordinates: Vec<(f64, f64)>,
    pub micrograph_id: String,
}

impl ParticleSet {
    pub fn new(coordinates: Vec<(f64, f64)>, micrograph_id: impl Into<String>) -> Result<Self> {
        if coordinates.iter().any(|(x, y)| !(x.is_finite() && y.is_finite())) {
            return Err(Error::Parameter("non-finite particle coordinate".into()));
        }
        Ok(ParticleSet {
            coordinates,
            micrograph_id: micrograph_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    /// Checks every coordinate against a `width × height` image.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for &(x, y) in &self.coordinates {
            if x < 0.0 || y < 0.0 || x > (width - 1) as f64 || y > (height - 1) as f64 {
                return Err(Error::Dimension(format!(
                    "particle ({x}, {y}) lies outside a {width}x{height} image"
                )));
            }
        }
        Ok(())
    }

    /// One `x y` pair per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, micrograph_id: impl Into<String>) -> Result<Self> {
        let mut coords = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => coords.push((x, y)),
                _ => return Err(Error::Parse(format!("line {}: expected \"x y\", got {raw:?}", n + 1))),
            }
        }
        ParticleSet::new(coords, micrograph_id)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (x, y) in &self.coordinates {
            let _ = writeln!(s, "{x} {y}");
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        ParticleSet::parse(&text, id)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Output of [`match_particles`]; indices refer to the input sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    /// `(pred, gt, distance)`.
    pub true_positives: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

impl Matching {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.true_positives.len(),
            fp: self.false_positives.len(),
            fn_: self.false_negatives.len(),
        }
    }
}

/// Greedy nearest-first one-to-one matching. Pairs within `threshold`
/// (inclusive) are accepted in order of increasing distance when both ends
/// are still free; ties break on prediction then ground-truth index.
pub fn match_particles(pred: &ParticleSet, gt: &ParticleSet, threshold: f64) -> Result<Matching> {
    if !(threshold > 0.0) {
        return Err(Error::Parameter(format!("threshold must be positive, got {threshold}")));
    }
    let mut pairs = Vec::new();
    for (i, &(px, py)) in pred.coordinates.iter().enumerate() {
        for (j, &(gx, gy)) in gt.coordinates.iter().enumerate() {
            let d = (px - gx).hypot(py - gy);
            if d <= threshold {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut out = Matching::default();
    for (d, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            out.true_positives.push((i, j, d));
        }
    }
    out.false_positives = (0..pred.len()).filter(|&i| !pred_used[i]).collect();
    out.false_negatives = (0..gt.len()).filter(|&j| !gt_used[j]).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Counts {
    /// Empty denominators give 0.
    pub fn prf(&self) -> Prf {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PickingMetrics {
    pub micro: Prf,
    pub macro_mean: Prf,
    /// Population standard deviation across micrographs.
    pub macro_std: Prf,
    pub n_micrographs: usize,
}

pub const PICKING_CSV_HEADER: &str =
    "method,micro_P,micro_R,micro_F1,macro_P_mean,macro_P_std,macro_R_mean,macro_R_std,macro_F1_mean,macro_F1_std";

impl PickingMetrics {
    pub fn csv_row(&self, method: &str) -> String {
        let (m, a, s) = (self.micro, self.macro_mean, self.macro_std);
        format!(
            "{method},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.precision, m.recall, m.f1, a.precision, s.precision, a.recall, s.recall, a.f1, s.f1
        )
    }
}

/// Micro scores pool counts over micrographs; macro scores average the
/// per-micrograph scores.
pub fn picking_metrics(per_micrograph: &[Counts]) -> Result<PickingMetrics> {
    if per_micrograph.is_empty() {
        return Err(Error::Parameter("picking metrics need at least one micrograph".into()));
    }
    let total = per_micrograph.iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let per: Vec<Prf> = per_micrograph.iter().map(Counts::prf).collect();
    let n = per.len() as f64;
    let stat = |f: fn(&Prf) -> f64| {
        let mean = per.iter().map(f).sum::<f64>() / n;
        let var = per.iter().map(|p| (f(p) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (pm, ps) = stat(|p| p.precision);
    let (rm, rs) = stat(|p| p.recall);
    let (fm, fs) = stat(|p| p.f1);
    Ok(PickingMetrics {
        micro: total.prf(),
        macro_mean: Prf {
            precision: pm,
            recall: rm,
            f1: fm,
        },
        macro_std: Prf {
            precision: ps,
            recall: rs,
            f1: fs,
        },
        n_micrographs: per_micrograph.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FscCurve {
    /// Shell frequencies in 1/Å.
    pub shell_centers: Vec<f64>,
    pub correlations: Vec<f64>,
    pub voxel_size: f64,
    /// Fourier voxels per shell.
    pub shell_counts: Vec<usize>,
}

impl FscCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("freq_per_angstrom,fsc\n");
        for (f, c) in self.shell_centers.iter().zip(&self.correlations) {
            let _ = writeln!(s, "{f:.8},{c:.8}");
        }
        s
    }
}

fn spectrum(v: &Array3<f64>) -> Array3<Complex64> {
    let mut c = v.mapv(|x| Complex64::new(x, 0.0));
    fftn(&mut c, false);
    c
}

/// Fourier shell correlation over integer-radius shells `1..=n/2`, where
/// `n` is the shortest side. The DC term is excluded.
pub fn fsc(v1: &Volume, v2: &Volume) -> Result<FscCurve> {
    if v1.data.dim() != v2.data.dim() {
        return Err(Error::Shape(format!("volumes are {:?} and {:?}", v1.data.dim(), v2.data.dim())));
    }
    if v1.voxel_size_angstrom != v2.voxel_size_angstrom {
        return Err(Error::Shape(format!(
            "voxel sizes differ: {} vs {}",
            v1.voxel_size_angstrom, v2.voxel_size_angstrom
        )));
    }
    let (d, h, w) = v1.data.dim();
    let n = d.min(h).min(w);
    let n_shells = n / 2;
    let (f1, f2) = (spectrum(&v1.data), spectrum(&v2.data));
    let mut cross = vec![0.0; n_shells + 1];
    let mut p1 = vec![0.0; n_shells + 1];
    let mut p2 = vec![0.0; n_shells + 1];
    let mut counts = vec![0usize; n_shells + 1];
    for ((k, j, i), a) in f1.indexed_iter() {
        let fz = signed_index(k, d) / d as f64;
        let fy = signed_index(j, h) / h as f64;
        let fx = signed_index(i, w) / w as f64;
        let r = (n as f64 * (fx * fx + fy * fy + fz * fz).sqrt()).round() as usize;
        if r == 0 || r > n_shells {
            continue;
        }
        let b = f2[[k, j, i]];
        cross[r] += (a * b.conj()).re;
        p1[r] += a.norm_sqr();
        p2[r] += b.norm_sqr();
        counts[r] += 1;
    }
    let correlations = (1..=n_shells)
        .map(|r| {
            let den = (p1[r] * p2[r]).sqrt();
            if den > 0.0 {
                (cross[r] / den).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(FscCurve {
        shell_centers: (1..=n_shells).map(|r| r as f64 / (n as f64 * v1.voxel_size_angstrom)).collect(),
        correlations,
        voxel_size: v1.voxel_size_angstrom,
        shell_counts: counts[1..].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    pub angstrom: f64,
    /// Crossing frequency in 1/Å.
    pub frequency: f64,
    /// The curve never fell below the threshold; the value is `2 * voxel_size`.
    pub nyquist_limited: bool,
}

/// Resolution at the first downward crossing of `threshold`, linearly
/// interpolated between shells. A curve that starts below the threshold
/// crosses at its first shell.
pub fn resolution_at(curve: &FscCurve, threshold: f64) -> Result<Resolution> {
    let (f, c) = (&curve.shell_centers, &curve.correlations);
    if f.is_empty() || f.len() != c.len() {
        return Err(Error::Parameter("FSC curve is empty or malformed".into()));
    }
    let at = |freq: f64| Resolution {
        angstrom: 1.0 / freq,
        frequency: freq,
        nyquist_limited: false,
    };
    if c[0] < threshold {
        return Ok(at(f[0]));
    }
    for i in 1..c.len() {
        if c[i] < threshold {
            let t = (c[i - 1] - threshold) / (c[i - 1] - c[i]);
            return Ok(at(f[i - 1] + t * (f[i] - f[i - 1])));
        }
    }
    Ok(Resolution {
        angstrom: 2.0 * curve.voxel_size,
        frequency: 0.5 / curve.voxel_size,
        nyquist_limited: true,
    })
}

/// Peak signal-to-noise ratio in dB, with the peak taken as the dynamic
/// range of `reference`.
pub fn psnr(reference: &Patch, test: &Patch) -> Result<f64> {
    if reference.dim() != test.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", reference.dim(), test.dim())));
    }
    let (lo, hi) = reference.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mse = reference.iter().zip(test.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / reference.len() as f64;
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Parameter("reference image is flat".into()));
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// How many peaks the picker keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PickThreshold {
    /// Keep peaks whose correlation is at least this value.
    Absolute(f64),
    /// Keep peaks above `median + k * 1.4826 * MAD` of the score map.
    RobustSigma(f64),
    /// Keep the `n` best peaks.
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PickerConfig {
    pub threshold: PickThreshold,
    /// Minimum center-to-center distance between picks.
    pub min_distance: f64,
}

/// Normalized cross-correlation map, maximized over `templates`. Entry
/// `[y, x]` scores the window whose top-left corner is `(x, y)`.
pub fn ncc_map(image: &Patch, templates: &[Patch]) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    let p = templates
        .first()
        .ok_or_else(|| Error::Parameter("no templates".into()))?
        .nrows();
    if templates.iter().any(|t| t.dim() != (p, p)) || p > h.min(w) || p == 0 {
        return Err(Error::Dimension(format!("templates must be square and fit a {h}x{w} image")));
    }
    let (oh, ow) = (h - p + 1, w - p + 1);
    let n = (p * p) as f64;
    // windowed sums via an integral image
    let mut s1 = Array2::<f64>::zeros((h + 1, w + 1));
    let mut s2 = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            let v = image[[i, j]];
            s1[[i + 1, j + 1]] = v + s1[[i, j + 1]] + s1[[i + 1, j]] - s1[[i, j]];
            s2[[i + 1, j + 1]] = v * v + s2[[i, j + 1]] + s2[[i + 1, j]] - s2[[i, j]];
        }
    }
    let boxsum = |s: &Array2<f64>, i: usize, j: usize| s[[i + p, j + p]] - s[[i, j + p]] - s[[i + p, j]] + s[[i, j]];
    let mut norm = Array2::<f64>::zeros((oh, ow));
    for ((i, j), v) in norm.indexed_iter_mut() {
        let a = boxsum(&s1, i, j);
        let var = boxsum(&s2, i, j) - a * a / n;
        *v = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    }
    let mut img = image.mapv(|v| Complex64::new(v, 0.0));
    fftn(&mut img, false);
    let mut best = Array2::from_elem((oh, ow), f64::NEG_INFINITY);
    for t in templates {
        let mean = t.mean().unwrap_or(0.0);
        let tn = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        if !(tn > 0.0) {
            continue;
        }
        let mut tp = Array2::from_elem((h, w), Complex64::new(0.0, 0.0));
        for ((i, j), &v) in t.indexed_iter() {
            tp[[i, j]] = Complex64::new((v - mean) / tn, 0.0);
        }
        fftn(&mut tp, false);
        tp.zip_mut_with(&img, |a, b| *a = b * a.conj());
        fftn(&mut tp, true);
        for ((i, j), b) in best.indexed_iter_mut() {
            *b = b.max(tp[[i, j]].re * norm[[i, j]]);
        }
    }
    if best.iter().any(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::Parameter("all templates are flat".into()));
    }
    Ok(best)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Template-correlation picker: greedy non-maximum suppression on the NCC
/// map. Returns particle centers and their scores, best first.
pub fn pick_particles(image: &Patch, templates: &[Patch], cfg: &PickerConfig) -> Result<(ParticleSet, Vec<f64>)> {
    let map = ncc_map(image, templates)?;
    let p = templates[0].nrows();
    let off = (p as f64 - 1.0) / 2.0;
    let floor = match cfg.threshold {
        PickThreshold::Absolute(t) => t,
        PickThreshold::RobustSigma(k) => {
            let mut v: Vec<f64> = map.iter().copied().collect();
            let med = median(&mut v);
            let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
            med + k * 1.4826 * median(&mut dev)
        }
        PickThreshold::TopK(_) => f64::NEG_INFINITY,
    };
    let limit = match cfg.threshold {
        PickThreshold::TopK(k) => k,
        _ => usize::MAX,
    };
    let mut cand: Vec<(f64, usize, usize)> = map
        .indexed_iter()
        .filter(|(_, &s)| s >= floor)
        .map(|((i, j), &s)| (s, i, j))
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut scores = Vec::new();
    let d2 = cfg.min_distance * cfg.min_distance;
    for (s, i, j) in cand {
        if coords.len() >= limit {
            break;
        }
        let (x, y) = (j as f64 + off, i as f64 + off);
        if coords.iter().all(|&(a, b)| (a - x).powi(2) + (b - y).powi(2) >= d2) {
            coords.push((x, y));
            scores.push(s);
        }
    }
    Ok((ParticleSet::new(coords, "")?, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn set(c: &[(f64, f64)]) -> ParticleSet {
        ParticleSet::new(c.to_vec(), "m").unwrap()
    }

    #[test]
    fn matching_examples() {
        let gt = set(&[(100.0, 100.0)]);
        let m = match_particles(&set(&[(110.0, 100.0)]), &gt, 32.0).unwrap();
        assert_eq!(m.counts(), Counts { tp: 1, fp: 0, fn_: 0 });
        let m = match_particles(&set(&[(120.0, 100.0), (105.0, 100.0)]), &gt, 32.0).unwrap();
        assert_eq!(m.counts(), Counts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(m.true_positives[0].0, 1);
        let m = match_particles(&set(&[(132.0, 100.0)]), &gt, 32.0).unwrap();
        assert_eq!(m.counts().tp, 1);
        let m = match_particles(&set(&[(132.001, 100.0)]), &gt, 32.0).unwrap();
        assert_eq!(m.counts(), Counts { tp: 0, fp: 1, fn_: 1 });
        assert!(match_particles(&gt, &gt, 0.0).is_err());
    }

    #[test]
    fn greedy_is_not_maximum_in_general() {
        // A-X closest grabs X; B cannot reach Y, so greedy finds 1 pair where 2 exist
        let pred = set(&[(0.0, 0.0), (-2.0, 0.0)]);
        let gt = set(&[(1.0, 0.0), (3.0, 0.0)]);
        let m = match_particles(&pred, &gt, 3.5).unwrap();
        assert_eq!(m.counts().tp, 1);
    }

    #[test]
    fn metrics_examples() {
        let a = Counts { tp: 1, fp: 0, fn_: 0 };
        let b = Counts { tp: 0, fp: 1, fn_: 1 };
        let m = picking_metrics(&[a, b]).unwrap();
        assert_eq!(m.micro, Prf { precision: 0.5, recall: 0.5, f1: 0.5 });
        assert_eq!(m.macro_mean.f1, 0.5);
        assert_eq!(m.macro_std.f1, 0.5);
        let one = picking_metrics(&[Counts { tp: 3, fp: 1, fn_: 2 }]).unwrap();
        assert_eq!(one.micro, one.macro_mean);
        let none = picking_metrics(&[Counts { tp: 0, fp: 0, fn_: 4 }]).unwrap();
        assert_eq!(none.micro, Prf::default());
        assert!(picking_metrics(&[]).is_err());
        assert!(one.csv_row("x").starts_with("x,0.750000,0.600000,"));
    }

    #[test]
    fn coordinate_text_round_trip() {
        let s = set(&[(1.5, 2.0), (300.25, 7.0)]);
        let back = ParticleSet::parse(&format!("# header\n{}", s.to_text()), "m").unwrap();
        assert_eq!(back, s);
        assert!(ParticleSet::parse("1 2 3", "m").is_err());
        assert!(ParticleSet::parse("1 nan", "m").is_err());
        assert!(s.check_bounds(302, 8).is_ok());
        assert!(s.check_bounds(301, 8).is_err());
    }

    fn noise_volume(n: usize, seed: u64) -> Volume {
        let mut r = rng(seed);
        Volume::new(Array3::from_shape_simple_fn((n, n, n), || r.random::<f64>() - 0.5), 1.5).unwrap()
    }

    #[test]
    fn fsc_self_and_anti() {
        let v = noise_volume(16, 1);
        let c = fsc(&v, &v).unwrap();
        assert_eq!(c.correlations.len(), 8);
        assert!(c.correlations.iter().all(|r| (r - 1.0).abs() < 1e-10));
        let neg = Volume::new(v.data.mapv(|x| -x), 1.5).unwrap();
        assert!(fsc(&v, &neg).unwrap().correlations.iter().all(|r| (r + 1.0).abs() < 1e-10));
        assert!((c.shell_centers[7] - v.nyquist()).abs() < 1e-12);
        assert!(resolution_at(&c, FSC_THRESHOLD).unwrap().nyquist_limited);
        let other = Volume::new(Array3::zeros((16, 16, 8)), 1.5).unwrap();
        assert!(fsc(&v, &other).is_err());
    }

    #[test]
    fn resolution_line_crossing() {
        let n = 10;
        let curve = FscCurve {
            shell_centers: (1..=n).map(|r| r as f64 * 0.02).collect(),
            correlations: (1..=n).map(|r| 1.0 - (r - 1) as f64 / (n - 1) as f64).collect(),
            voxel_size: 2.5,
            shell_counts: vec![1; n],
        };
        // c(f) = 1 - (f/0.02 - 1)/9 hits t at f = 0.02 (1 + 9 (1 - t))
        let t = 0.143;
        let f = 0.02 * (1.0 + 9.0 * (1.0 - t));
        let res = resolution_at(&curve, t).unwrap();
        assert!((res.frequency - f).abs() < 1e-12);
        assert!((res.angstrom - 1.0 / f).abs() < 1e-9);
    }

    #[test]
    fn psnr_known_value() {
        let a = Array2::from_shape_fn((4, 4), |(i, _)| i as f64 / 3.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn picker_finds_planted_templates() {
        let p = 9;
        let t = Array2::from_shape_fn((p, p), |(i, j)| {
            let (y, x) = (i as f64 - 4.0, j as f64 - 4.0);
            (-(x * x + 2.0 * y * y) / 6.0).exp()
        });
        let mut img = Array2::<f64>::zeros((64, 80));
        let mut r = rng(3);
        img.mapv_inplace(|_| 0.05 * (r.random::<f64>() - 0.5));
        let tops = [(5usize, 7usize), (40, 50), (20, 30)];
        for &(y, x) in &tops {
            for ((i, j), v) in t.indexed_iter() {
                img[[y + i, x + j]] += v;
            }
        }
        let cfg = PickerConfig {
            threshold: PickThreshold::TopK(3),
            min_distance: 8.0,
        };
        let (picks, scores) = pick_particles(&img, &[t.clone()], &cfg).unwrap();
        let gt = set(&tops.iter().map(|&(y, x)| (x as f64 + 4.0, y as f64 + 4.0)).collect::<Vec<_>>());
        let m = match_particles(&picks, &gt, 0.5).unwrap();
        assert_eq!(m.counts().tp, 3);
        assert!(scores.iter().all(|&s| s > 0.95 && s <= 1.0 + 1e-9));
        let robust = PickerConfig {
            threshold: PickThreshold::RobustSigma(6.0),
            min_distance: 8.0,
        };
        assert_eq!(pick_particles(&img, &[t], &robust).unwrap().0.len(), 3);
    }

    proptest! {
        #[test]
        fn matching_counts_and_symmetry(
            a in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 0..8),
            b in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 0..8),
            thr in 1.0f64..40.0,
        ) {
            let (pa, pb) = (set(&a), set(&b));
            let m = match_particles(&pa, &pb, thr).unwrap();
            let c = m.counts();
            prop_assert_eq!(c.tp + c.fp, a.len());
            prop_assert_eq!(c.tp + c.fn_, b.len());
            prop_assert_eq!(match_particles(&pb, &pa, thr).unwrap().counts().tp, c.tp);
        }

        #[test]
        fn fsc_scale_invariant(seed in 0u64..1000, s1 in 0.1f64..10.0, s2 in 0.1f64..10.0) {
            let a = noise_volume(8, seed);
            let b = noise_volume(8, seed + 1);
            let base = fsc(&a, &b).unwrap().correlations;
            let a2 = Volume::new(a.data.mapv(|x| x * s1), 1.5).unwrap();
            let b2 = Volume::new(b.data.mapv(|x| x * s2), 1.5).unwrap();
            let scaled = fsc(&a2, &b2).unwrap().correlations;
            for (x, y) in base.iter().zip(&scaled) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn micro_f1_ignores_partitioning(
            pts in proptest::collection::vec((0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0), 1..12),
        ) {
            // micrographs far apart in x so no cross-partition pairs exist
            let place = |k: usize, x: f64| x + 1000.0 * k as f64;
            let mut whole_p = Vec::new();
            let mut whole_g = Vec::new();
            let mut per = Vec::new();
            for (k, chunk) in pts.chunks(3).enumerate() {
                let p: Vec<_> = chunk.iter().map(|t| (place(k, t.0), t.1)).collect();
                let g: Vec<_> = chunk.iter().map(|t| (place(k, t.2), t.3)).collect();
                per.push(match_particles(&set(&p), &set(&g), 32.0).unwrap().counts());
                whole_p.extend(p);
                whole_g.extend(g);
            }
            let whole = match_particles(&set(&whole_p), &set(&whole_g), 32.0).unwrap().counts();
            let split = picking_metrics(&per).unwrap().micro;
            prop_assert!((split.f1 - whole.prf().f1).abs() < 1e-12);
        }
    }
}
