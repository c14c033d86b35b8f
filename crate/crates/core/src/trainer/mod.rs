//! Training loop: patch sampling, σ_a and λ schedules, encoder-feature
//! refresh of the target bank, Adam updates, metrics and checkpoints.

mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mrc_io::{standardize, Micrograph, Patch};
use crate::noise_model::{corrupt_poisson_gaussian, normalize_intensity, rng, PoissonGaussianParams};
use crate::objectives::{adaptive_loss_eval, Batch, Guidance, LossBreakdown};
use crate::score_model::layers::Real;
use crate::score_model::{save_checkpoint, ScoreModel, ScoreModelConfig};
use crate::target_bank::{write_bank, DownsampleFeatures, FeatureMap, TargetBank};
pub use config::{parse_config, parse_key_values};

/// Where bank features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// The score network's own encoder, refreshed on schedule.
    Encoder,
    /// Fixed block-average features with the given factor.
    Downsample(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_steps: u64,
    pub adam_betas: (f64, f64),
    pub sigma_a_levels: Vec<f64>,
    pub warmup_epochs: usize,
    pub ramp_end_epochs: usize,
    pub patches_per_micrograph: usize,
    pub patch_size: usize,
    pub encoder_refresh_epochs: usize,
    pub seed: u64,
    /// Train with the DSM term only; no bank is consulted.
    pub dsm_only: bool,
    /// Fixed target weight in place of the match confidence.
    pub fixed_wt: Option<f64>,
    /// Scale from bank projection units to standardized patch units.
    pub target_gain: f64,
    /// Poisson–Gaussian augmentation of sampled patches before corruption.
    pub augment: Option<PoissonGaussianParams>,
    pub features: FeatureSource,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            epochs: 100,
            batch_size: 8,
            lr: 5e-5,
            lr_decay_factor: 0.1,
            lr_decay_steps: 4000,
            adam_betas: (0.9, 0.999),
            sigma_a_levels: vec![0.2, 0.1, 0.05, 0.01, 1e-6],
            warmup_epochs: 20,
            ramp_end_epochs: 60,
            patches_per_micrograph: 32,
            patch_size: 256,
            encoder_refresh_epochs: 10,
            seed: 0,
            dsm_only: false,
            fixed_wt: None,
            target_gain: 1.0,
            augment: None,
            features: FeatureSource::Encoder,
        }
    }
}

impl TrainingSchedule {
    /// Removes the λ warm-up and ramp: full guidance from the first epoch.
    pub fn without_annealing(mut self) -> Self {
        self.warmup_epochs = 0;
        self.ramp_end_epochs = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.epochs == 0 || self.batch_size == 0 || self.patch_size == 0 || self.patches_per_micrograph == 0 {
            return bad("epochs, batch_size, patch_size and patches_per_micrograph must be positive".into());
        }
        if !(self.warmup_epochs <= self.ramp_end_epochs && self.ramp_end_epochs <= self.epochs) {
            return bad(format!(
                "need 0 <= warmup ({}) <= ramp end ({}) <= epochs ({})",
                self.warmup_epochs, self.ramp_end_epochs, self.epochs
            ));
        }
        if self.sigma_a_levels.is_empty()
            || self.sigma_a_levels.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.sigma_a_levels.windows(2).any(|w| w[1] > w[0])
        {
            return bad("sigma_a levels must be positive and non-increasing".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive".into());
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.encoder_refresh_epochs == 0 {
            return bad("encoder_refresh_epochs must be positive".into());
        }
        if let Some(w) = self.fixed_wt {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("fixed_wt must lie in [0, 1], got {w}"));
            }
        }
        if !(self.target_gain > 0.0 && self.target_gain.is_finite()) {
            return bad("target_gain must be positive".into());
        }
        if let Some(p) = &self.augment {
            p.validate()?;
        }
        if self.features == FeatureSource::Downsample(0) {
            return bad("downsample factor must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in force at optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.lr_decay_steps {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

/// 0 during warm-up, linear up to the ramp end, 1 afterwards.
pub fn lambda_schedule(epoch: usize, sched: &TrainingSchedule) -> f64 {
    let (w, r) = (sched.warmup_epochs, sched.ramp_end_epochs);
    if epoch < w {
        0.0
    } else if epoch >= r {
        1.0
    } else {
        (epoch - w) as f64 / (r - w) as f64
    }
}

/// Level `floor(epoch·L/epochs)` of the descending list.
pub fn sigma_a_schedule(epoch: usize, sched: &TrainingSchedule) -> f64 {
    let l = sched.sigma_a_levels.len();
    let idx = (epoch * l / sched.epochs.max(1)).min(l - 1);
    sched.sigma_a_levels[idx]
}

/// A standardized training patch and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPatch {
    pub micrograph: usize,
    pub y: usize,
    pub x: usize,
    pub patch: Patch,
    pub mean: f64,
    pub std: f64,
}

fn label(m: &Micrograph, i: usize) -> String {
    let first = m.provenance.lines().next().unwrap_or("").trim();
    if first.is_empty() {
        format!("micrograph #{i}")
    } else {
        format!("micrograph #{i} ({first})")
    }
}

/// `n_per` uniformly placed `size × size` crops per micrograph, each
/// standardized to zero mean and unit std (std floored at 1e-6).
pub fn sample_patches(micrographs: &[Micrograph], n_per: usize, size: usize, seed: u64) -> Result<Vec<SampledPatch>> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(micrographs.len() * n_per);
    for (i, m) in micrographs.iter().enumerate() {
        let (h, w) = m.data.dim();
        if h < size || w < size || size == 0 {
            return Err(Error::Dimension(format!(
                "{} is {h}x{w}, smaller than the {size}x{size} patch size",
                label(m, i)
            )));
        }
        for _ in 0..n_per {
            let y = r.random_range(0..=h - size);
            let x = r.random_range(0..=w - size);
            let (patch, mean, std) = standardize(&m.data.slice(s![y..y + size, x..x + size]).to_owned());
            out.push(SampledPatch {
                micrograph: i,
                y,
                x,
                patch,
                mean,
                std,
            });
        }
    }
    Ok(out)
}

/// Supplies the clean patches of each epoch.
pub trait PatchSource {
    fn patch_size(&self) -> usize;
    fn epoch_patches(&mut self, epoch: usize, seed: u64) -> Result<Vec<Patch>>;
}

/// Random crops of a micrograph set, optionally Poisson–Gaussian augmented.
pub struct MicrographSource<'a> {
    pub micrographs: &'a [Micrograph],
    pub patches_per_micrograph: usize,
    pub size: usize,
    pub augment: Option<PoissonGaussianParams>,
}

impl PatchSource for MicrographSource<'_> {
    fn patch_size(&self) -> usize {
        self.size
    }

    fn epoch_patches(&mut self, _epoch: usize, seed: u64) -> Result<Vec<Patch>> {
        let sampled = sample_patches(self.micrographs, self.patches_per_micrograph, self.size, seed)?;
        let mut out = Vec::with_capacity(sampled.len());
        for (k, sp) in sampled.into_iter().enumerate() {
            let p = match &self.augment {
                None => sp.patch,
                Some(params) => {
                    let (norm, _) = normalize_intensity(&sp.patch);
                    let noisy = corrupt_poisson_gaussian(&norm, *params, derive_seed(seed, 11, k as u64))?;
                    standardize(&noisy).0
                }
            };
            out.push(p);
        }
        Ok(out)
    }
}

/// I.i.d. `𝒩(0, σ²)` pixels: data drawn from the Gaussian surrogate itself.
pub struct GaussianSource {
    pub size: usize,
    pub sigma: f64,
    pub per_epoch: usize,
}

impl PatchSource for GaussianSource {
    fn patch_size(&self) -> usize {
        self.size
    }

    fn epoch_patches(&mut self, _epoch: usize, seed: u64) -> Result<Vec<Patch>> {
        let mut r = rng(seed);
        Ok((0..self.per_epoch)
            .map(|_| Array2::from_shape_simple_fn((self.size, self.size), || self.sigma * r.sample::<f64, _>(StandardNormal)))
            .collect())
    }
}

/// SplitMix64-style mixing so each (purpose, index) gets its own stream.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One metrics-log row (per epoch).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub loss_total: f64,
    pub loss_dsm: f64,
    pub loss_tsm: f64,
    pub mean_confidence: f64,
    pub sigma_a: f64,
    pub lambda: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,loss_total,loss_dsm,loss_tsm,mean_confidence,sigma_a,lambda,lr";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.step,
            self.loss_total,
            self.loss_dsm,
            self.loss_tsm,
            self.mean_confidence,
            self.sigma_a,
            self.lambda,
            self.lr
        )
    }
}

/// Adam with bias correction; moments kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, betas: (f64, f64)) -> Self {
        Adam {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.to_f64().expect("finite");
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let upd = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = T::from_f64_lossy(p.to_f64().expect("finite") - upd);
        }
    }
}

/// Output locations; all optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Directory receiving `metrics.csv`, `model.ckpt` and `bank.tgb`.
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        TrainOutputs { dir: Some(dir.into()) }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: ScoreModel<f32>,
    pub bank: Option<TargetBank>,
    pub metrics: Vec<MetricsRow>,
    /// Probe-patch confidence at the end of every epoch (empty without a bank).
    pub probe_confidence: Vec<f64>,
    /// Per-batch loss breakdowns of the final epoch.
    pub last_epoch_losses: Vec<LossBreakdown>,
    pub checkpoints_written: usize,
}

/// Surrogate σ for the preconditioning: from the bank whenever one is given,
/// so a DSM-only run differs from a guided one only in its loss. Without a
/// bank, 1 (standardized patches have unit variance).
pub fn model_sigma(bank: Option<&TargetBank>, sched: &TrainingSchedule) -> f64 {
    match bank {
        Some(b) => sched.target_gain * b.sigma2_surrogate.sqrt(),
        None => 1.0,
    }
}

fn refresh_bank(bank: &TargetBank, model: &ScoreModel<f32>, source: FeatureSource) -> Result<TargetBank> {
    let mut next = bank.clone();
    match source {
        FeatureSource::Encoder => next.refresh_features(model)?,
        FeatureSource::Downsample(f) => next.refresh_features(&DownsampleFeatures { factor: f })?,
    }
    Ok(next)
}

fn feature_map<'a>(model: &'a ScoreModel<f32>, fallback: &'a DownsampleFeatures, source: FeatureSource) -> &'a dyn FeatureMap {
    match source {
        FeatureSource::Encoder => model,
        FeatureSource::Downsample(_) => fallback,
    }
}

/// Trains on micrograph crops. See [`train_with_source`].
pub fn train(
    data: &[Micrograph],
    bank: Option<&TargetBank>,
    sched: &TrainingSchedule,
    config: &ScoreModelConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    let mut source = MicrographSource {
        micrographs: data,
        patches_per_micrograph: sched.patches_per_micrograph,
        size: sched.patch_size,
        augment: sched.augment,
    };
    let probe = sample_patches(data, 1, sched.patch_size, derive_seed(sched.seed, 3, 0))?
        .into_iter()
        .next()
        .map(|p| p.patch);
    train_with_source(&mut source, probe, bank, sched, config, outputs)
}

/// The epoch loop. Per epoch: set σ_a and λ, refresh bank features on the
/// refresh cadence (writing a checkpoint), draw patches, then per batch corrupt,
/// match, evaluate the gated loss and take an Adam step. A non-finite loss
/// aborts with the last good checkpoint path.
pub fn train_with_source(
    source: &mut dyn PatchSource,
    probe: Option<Patch>,
    bank: Option<&TargetBank>,
    sched: &TrainingSchedule,
    config: &ScoreModelConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    sched.validate()?;
    if config.patch_size != sched.patch_size || source.patch_size() != sched.patch_size {
        return Err(Error::Parameter(format!(
            "patch size mismatch: schedule {}, model {}, data {}",
            sched.patch_size,
            config.patch_size,
            source.patch_size()
        )));
    }
    let guided = !sched.dsm_only && bank.is_some();
    if !sched.dsm_only && bank.is_none() && (0..sched.epochs).any(|e| lambda_schedule(e, sched) > 0.0) {
        return Err(Error::Parameter("guided training needs a target bank (or dsm_only)".into()));
    }
    if let Some(b) = bank.filter(|_| guided) {
        if b.patch_dim() != (sched.patch_size, sched.patch_size) {
            return Err(Error::Shape(format!(
                "bank projections are {:?}, patches are {}",
                b.patch_dim(),
                sched.patch_size
            )));
        }
    }
    let mut model = ScoreModel::<f32>::new(config.clone(), model_sigma(bank, sched), sched.seed)?;
    let mut adam = Adam::new(model.n_params(), sched.adam_betas);
    let mut bank: Option<TargetBank> = if guided { bank.cloned() } else { None };
    let fallback = DownsampleFeatures {
        factor: match sched.features {
            FeatureSource::Downsample(f) => f,
            FeatureSource::Encoder => 8,
        },
    };

    let metrics_path = outputs.path("metrics.csv");
    let ckpt_path = outputs.path("model.ckpt");
    let bank_path = outputs.path("bank.tgb");
    if let Some(dir) = &outputs.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut metrics_file = match &metrics_path {
        Some(p) => {
            let mut f = File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(p, e))?;
            drop(f);
            Some(OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?)
        }
        None => None,
    };
    let mut last_good: Option<PathBuf> = None;
    let mut checkpoints = 0;
    let mut metrics = Vec::with_capacity(sched.epochs);
    let mut probe_trace = Vec::new();
    let mut last_losses = Vec::new();

    for epoch in 0..sched.epochs {
        let sigma_a = sigma_a_schedule(epoch, sched);
        let lambda = if guided { lambda_schedule(epoch, sched) } else { 0.0 };
        if epoch % sched.encoder_refresh_epochs == 0 {
            if let Some(b) = &bank {
                let next = refresh_bank(b, &model, sched.features)?;
                bank = Some(next);
            }
            if let Some(p) = &ckpt_path {
                save_checkpoint(&model, epoch as u64, p)?;
                if let (Some(bp), Some(b)) = (&bank_path, &bank) {
                    write_bank(b, bp)?;
                }
                last_good = Some(p.clone());
                checkpoints += 1;
            }
        }
        let mut patches = source.epoch_patches(epoch, derive_seed(sched.seed, 1, epoch as u64))?;
        patches.shuffle(&mut rng(derive_seed(sched.seed, 2, epoch as u64)));
        let mut noise_rng = rng(derive_seed(sched.seed, 4, epoch as u64));
        let (mut sum_total, mut sum_dsm, mut sum_tsm, mut sum_conf) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_batches, mut n_samples) = (0usize, 0usize);
        last_losses.clear();
        for chunk in patches.chunks(sched.batch_size) {
            let batch = Batch {
                clean: chunk.to_vec(),
                noise: chunk
                    .iter()
                    .map(|p| Array2::from_shape_simple_fn(p.dim(), || noise_rng.sample::<f64, _>(StandardNormal)))
                    .collect(),
            };
            let fmap = feature_map(&model, &fallback, sched.features);
            let guidance = bank.as_ref().map(|b| Guidance {
                bank: b,
                feature_map: fmap,
                fixed_wt: sched.fixed_wt,
                target_gain: sched.target_gain,
            });
            let ev = adaptive_loss_eval(&model, &batch, guidance.as_ref(), lambda, sigma_a)?;
            let b = &ev.breakdown;
            if !(b.total.is_finite() && b.dsm_term.is_finite() && b.tsm_term.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: model.step as usize,
                    checkpoint: last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string()),
                });
            }
            let (grads, _) = model.backward(&ev.trace, &ev.d_network)?;
            let lr = sched.lr_at(model.step);
            adam.step(model.params_mut(), &grads, lr);
            model.step += 1;
            sum_total += b.total;
            sum_dsm += b.dsm_term;
            sum_tsm += b.tsm_term;
            sum_conf += b.per_sample_confidence.iter().sum::<f64>();
            n_batches += 1;
            n_samples += chunk.len();
            last_losses.push(ev.breakdown);
        }
        let nb = n_batches.max(1) as f64;
        let row = MetricsRow {
            epoch,
            step: model.step,
            loss_total: sum_total / nb,
            loss_dsm: sum_dsm / nb,
            loss_tsm: sum_tsm / nb,
            mean_confidence: sum_conf / n_samples.max(1) as f64,
            sigma_a,
            lambda,
            lr: sched.lr_at(model.step.saturating_sub(1)),
        };
        if let (Some(f), Some(p)) = (metrics_file.as_mut(), &metrics_path) {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(p, e))?;
        }
        log::info!(
            "epoch {epoch}: loss {:.4e} (dsm {:.4e}, tsm {:.4e}) conf {:.3} sigma_a {sigma_a} lambda {lambda:.3}",
            row.loss_total,
            row.loss_dsm,
            row.loss_tsm,
            row.mean_confidence
        );
        metrics.push(row);
        if let (Some(b), Some(p)) = (&bank, &probe) {
            let fmap = feature_map(&model, &fallback, sched.features);
            probe_trace.push(b.match_patch(p, fmap)?.confidence);
        }
    }
    if let Some(p) = &ckpt_path {
        save_checkpoint(&model, sched.epochs as u64, p)?;
        if let (Some(bp), Some(b)) = (&bank_path, &bank) {
            write_bank(b, bp)?;
        }
        checkpoints += 1;
    }
    Ok(TrainResult {
        model,
        bank,
        metrics,
        probe_confidence: probe_trace,
        last_epoch_losses: last_losses,
        checkpoints_written: checkpoints,
    })
}

/// Mean over refresh windows of the within-window standard deviation of a
/// per-epoch trace. Windows start at each refresh epoch and span
/// `refresh_epochs` entries; windows with fewer than two entries are skipped.
pub fn post_refresh_std(trace: &[f64], refresh_epochs: usize) -> f64 {
    let stds: Vec<f64> = trace
        .chunks(refresh_epochs.max(1))
        .filter(|w| w.len() >= 2)
        .map(|w| {
            let m = w.iter().sum::<f64>() / w.len() as f64;
            (w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / w.len() as f64).sqrt()
        })
        .collect();
    if stds.is_empty() {
        0.0
    } else {
        stds.iter().sum::<f64>() / stds.len() as f64
    }
}

/// Writes `rows` (with header) to `path`.
pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target_bank::DownsampleFeatures;

    fn sched(epochs: usize) -> TrainingSchedule {
        TrainingSchedule {
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn lambda_phases() {
        let s = sched(100);
        assert_eq!(lambda_schedule(0, &s), 0.0);
        assert_eq!(lambda_schedule(19, &s), 0.0);
        assert_eq!(lambda_schedule(40, &s), 0.5);
        assert_eq!(lambda_schedule(60, &s), 1.0);
        assert_eq!(lambda_schedule(99, &s), 1.0);
        let vals: Vec<f64> = (0..100).map(|e| lambda_schedule(e, &s)).collect();
        assert!(vals.windows(2).all(|w| w[1] >= w[0]));
        let step = TrainingSchedule {
            warmup_epochs: 30,
            ramp_end_epochs: 30,
            ..sched(100)
        };
        assert_eq!(lambda_schedule(29, &step), 0.0);
        assert_eq!(lambda_schedule(30, &step), 1.0);
        let flat = sched(100).without_annealing();
        assert!((0..100).all(|e| lambda_schedule(e, &flat) == 1.0));
    }

    #[test]
    fn sigma_levels() {
        let s = sched(100);
        assert_eq!(sigma_a_schedule(0, &s), 0.2);
        assert_eq!(sigma_a_schedule(99, &s), 1e-6);
        for (k, &lvl) in s.sigma_a_levels.iter().enumerate() {
            assert!((20 * k..20 * (k + 1)).all(|e| sigma_a_schedule(e, &s) == lvl));
        }
    }

    #[test]
    fn validation() {
        assert!(sched(100).validate().is_ok());
        assert!(TrainingSchedule { warmup_epochs: 70, ..sched(100) }.validate().is_err());
        assert!(TrainingSchedule { ramp_end_epochs: 120, ..sched(100) }.validate().is_err());
        assert!(TrainingSchedule {
            sigma_a_levels: vec![0.1, 0.2],
            ..sched(100)
        }
        .validate()
        .is_err());
        assert!(TrainingSchedule {
            sigma_a_levels: vec![0.1, 0.0],
            ..sched(100)
        }
        .validate()
        .is_err());
    }

    fn mic(h: usize, w: usize, seed: u64) -> Micrograph {
        let mut r = rng(seed);
        Micrograph::new(Array2::from_shape_simple_fn((h, w), || r.random::<f64>()), 1.0).unwrap()
    }

    #[test]
    fn patch_sampling() {
        let ms = vec![mic(40, 50, 1)];
        let a = sample_patches(&ms, 32, 16, 7).unwrap();
        assert_eq!(a.len(), 32);
        let b = sample_patches(&ms, 32, 16, 7).unwrap();
        assert_eq!(
            a.iter().map(|p| (p.y, p.x)).collect::<Vec<_>>(),
            b.iter().map(|p| (p.y, p.x)).collect::<Vec<_>>()
        );
        for p in &a {
            assert!(p.y + 16 <= 40 && p.x + 16 <= 50);
            let orig = ms[0].data.slice(s![p.y..p.y + 16, p.x..p.x + 16]);
            let back = &p.patch * p.std + p.mean;
            assert!((&back - &orig).iter().all(|v| v.abs() < 1e-12));
            assert!(p.patch.mean().unwrap().abs() < 1e-12);
        }
        let flat = vec![Micrograph::new(Array2::from_elem((20, 20), 3.0), 1.0).unwrap()];
        assert!(sample_patches(&flat, 4, 8, 0).unwrap().iter().all(|p| p.patch.iter().all(|&v| v == 0.0)));
        let small = vec![mic(10, 40, 2).with_provenance("tiny.mrc")];
        match sample_patches(&small, 1, 16, 0) {
            Err(Error::Dimension(msg)) => assert!(msg.contains("tiny.mrc")),
            other => panic!("{other:?}"),
        }
    }

    fn tiny_config(p: usize) -> ScoreModelConfig {
        ScoreModelConfig {
            base_width: 4,
            channel_multipliers: vec![1, 2],
            patch_size: p,
            ..Default::default()
        }
    }

    fn tiny_bank(p: usize) -> TargetBank {
        let raw: Vec<Patch> = (0..5)
            .map(|k| {
                let a = k as f64 * 1.1;
                Array2::from_shape_fn((p, p), |(i, j)| {
                    let (cy, cx) = (p as f64 / 2.0 + 2.5 * a.sin(), p as f64 / 2.0 + 2.5 * a.cos());
                    (-((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)) / 6.0).exp()
                })
            })
            .collect();
        TargetBank::from_projections(raw, &DownsampleFeatures { factor: 2 }, 0.1, 0.1, false).unwrap()
    }

    fn small_sched() -> TrainingSchedule {
        TrainingSchedule {
            epochs: 6,
            batch_size: 4,
            lr: 1e-3,
            sigma_a_levels: vec![0.5, 0.3],
            warmup_epochs: 2,
            ramp_end_epochs: 4,
            patches_per_micrograph: 4,
            patch_size: 8,
            encoder_refresh_epochs: 3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_metrics_and_outputs() {
        let data = vec![mic(20, 24, 3), mic(20, 20, 4)];
        let bank = tiny_bank(8);
        let dir = tempfile::tempdir().unwrap();
        let s = small_sched();
        let a = train(&data, Some(&bank), &s, &tiny_config(8), &TrainOutputs::in_dir(dir.path())).unwrap();
        let b = train(&data, Some(&bank), &s, &tiny_config(8), &TrainOutputs::default()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics.len(), 6);
        assert_eq!(a.probe_confidence.len(), 6);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(csv.lines().count(), 7);
        assert!(dir.path().join("model.ckpt").exists() && dir.path().join("bank.tgb").exists());
        assert_eq!(a.checkpoints_written, 3);
        let lambdas: Vec<f64> = a.metrics.iter().map(|r| r.lambda).collect();
        assert_eq!(lambdas, vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.0]);
        for r in &a.metrics[..3] {
            assert_eq!(r.loss_tsm, 0.0);
            assert_eq!(r.loss_total, r.loss_dsm);
        }
        assert!(a.metrics[4].loss_tsm > 0.0);
        // refresh never touches projection pixels
        let after = a.bank.as_ref().unwrap();
        for j in 0..bank.len() {
            assert_eq!(after.projections[j], bank.projections[j]);
        }
        for lb in &a.last_epoch_losses {
            let n = lb.effective_weights.len() as f64;
            assert!(lb.effective_weights.iter().all(|w| (0.0..=1.0).contains(w)));
            assert!(lb.total.is_finite() && n > 0.0);
        }
    }

    #[test]
    fn dsm_only_has_zero_tsm_column() {
        let data = vec![mic(20, 24, 3)];
        let bank = tiny_bank(8);
        let s = TrainingSchedule {
            dsm_only: true,
            ..small_sched()
        };
        let out = train(&data, Some(&bank), &s, &tiny_config(8), &TrainOutputs::default()).unwrap();
        assert!(out.metrics.iter().all(|r| r.loss_tsm == 0.0 && r.lambda == 0.0));
        assert_eq!(out.model.sigma, model_sigma(Some(&bank), &s));
        assert_eq!(model_sigma(None, &s), 1.0);
        let forced = TrainingSchedule {
            warmup_epochs: 6,
            ramp_end_epochs: 6,
            ..small_sched()
        };
        let out = train(&data, Some(&bank), &forced, &tiny_config(8), &TrainOutputs::default()).unwrap();
        assert!(out.metrics.iter().all(|r| r.loss_tsm == 0.0 && r.loss_total == r.loss_dsm));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let data = vec![mic(20, 24, 3)];
        let bank = tiny_bank(8);
        let s = small_sched();
        assert!(train(&data, Some(&bank), &s, &tiny_config(16), &TrainOutputs::default()).is_err());
        assert!(train(&data, None, &s, &tiny_config(8), &TrainOutputs::default()).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, (0.9, 0.999));
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * (p[1] - 1.0)];
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p[0].abs() < 1e-2 && (p[1] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn window_std() {
        let t = [1.0, 1.0, 1.0, 0.0, 2.0, 0.0, 2.0];
        // windows of 2: [1,1] [1,0] [2,0] [2] -> stds 0, .5, 1 (last skipped)
        assert!((post_refresh_std(&t, 2) - 0.5).abs() < 1e-12);
    }
}
