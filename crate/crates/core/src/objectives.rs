//! Training losses (denoising and target score matching, confidence-gated
//! interpolation) and numerical checks of the identities they rely on.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::mrc_io::Patch;
use crate::noise_model::rng;
use crate::score_model::layers::Real;
use crate::score_model::{precondition_coeffs, ScoreModel, Trace};
use crate::target_bank::{FeatureMap, TargetBank};

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub dsm_term: f64,
    pub tsm_term: f64,
    pub per_sample_confidence: Vec<f64>,
    pub effective_weights: Vec<f64>,
    pub sigma_a_used: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive, got {v}")))
    }
}

fn same_shape(a: &Patch, b: &Patch, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `‖σ_a·s(x + σ_a·u; σ_a) + u‖²` summed over pixels. `model` is the full
/// score field.
pub fn dsm_loss(model: impl Fn(&Patch, f64) -> Patch, x: &Patch, u: &Patch, sigma_a: f64) -> Result<f64> {
    positive("sigma_a", sigma_a)?;
    same_shape(x, u, "noise draw")?;
    let s = model(&(x + &(u * sigma_a)), sigma_a);
    same_shape(&s, x, "model output")?;
    Ok((s * sigma_a + u).mapv(|v| v * v).sum())
}

/// Rescaled target score matching loss
/// `λ·‖(σ_a/(σ√S))·F(c_in·x; σ_a) + x/S − ỹ/σ²‖²`, with `S = σ²+σ_a²`,
/// `c_in = 1/√S` and `λ = (σ²σ_a²+σ⁴)/σ²`. `net` is the raw network `F`.
pub fn tsm_loss(net: impl Fn(&Patch, f64) -> Patch, x: &Patch, target: &Patch, sigma: f64, sigma_a: f64) -> Result<f64> {
    positive("sigma", sigma)?;
    positive("sigma_a", sigma_a)?;
    same_shape(x, target, "target")?;
    let c = precondition_coeffs(sigma, sigma_a)?;
    let f = net(&(x * c.c_in), sigma_a);
    same_shape(&f, x, "network output")?;
    Ok(c.loss_weight * tsm_residual(&f, x, target, sigma, sigma_a).mapv(|v| v * v).sum())
}

fn tsm_residual(f: &Patch, x: &Patch, target: &Patch, sigma: f64, sigma_a: f64) -> Patch {
    let s_total = sigma * sigma + sigma_a * sigma_a;
    let a = sigma_a / (sigma * s_total.sqrt());
    let mut r = f * a;
    r.zip_mut_with(x, |r, &x| *r += x / s_total);
    r.zip_mut_with(target, |r, &t| *r -= t / (sigma * sigma));
    r
}

/// `∂ dsm / ∂s` for the score value `s` at the corrupted input.
pub fn dsm_grad_wrt_score(s: &Patch, u: &Patch, sigma_a: f64) -> Patch {
    (s * sigma_a + u) * (2.0 * sigma_a)
}

/// `∂ tsm / ∂F` for network output `f`.
pub fn tsm_grad_wrt_network(f: &Patch, x: &Patch, target: &Patch, sigma: f64, sigma_a: f64) -> Patch {
    let s_total = sigma * sigma + sigma_a * sigma_a;
    let a = sigma_a / (sigma * s_total.sqrt());
    let lw = (sigma * sigma * sigma_a * sigma_a + sigma.powi(4)) / (sigma * sigma);
    tsm_residual(f, x, target, sigma, sigma_a) * (2.0 * lw * a)
}

/// Per-sample interpolation `w·tsm + (1−w)·dsm` with `w = λ_t·w_t`.
///
/// `w_t` is the match confidence clipped to `[1/m, 1]`, or `fixed_wt` when
/// given; degenerate matches get `w = 0`. With `λ_t = 0` the TSM terms are
/// expected to be zero (not evaluated).
pub fn combine_losses(
    dsm: &[f64],
    tsm: &[f64],
    confidence: &[f64],
    degenerate: &[bool],
    bank_size: usize,
    lambda_t: f64,
    fixed_wt: Option<f64>,
    sigma_a: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda_t) {
        return Err(Error::Parameter(format!("lambda_t must lie in [0, 1], got {lambda_t}")));
    }
    if let Some(w) = fixed_wt {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Parameter(format!("fixed target weight must lie in [0, 1], got {w}")));
        }
    }
    let n = dsm.len();
    if n == 0 || tsm.len() != n || confidence.len() != n || degenerate.len() != n {
        return Err(Error::Shape("loss component batches differ in length".into()));
    }
    let floor = 1.0 / bank_size.max(1) as f64;
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            if degenerate[i] {
                0.0
            } else {
                let wt = fixed_wt.unwrap_or_else(|| confidence[i].clamp(floor, 1.0));
                lambda_t * wt
            }
        })
        .collect();
    let nf = n as f64;
    let total = (0..n).map(|i| weights[i] * tsm[i] + (1.0 - weights[i]) * dsm[i]).sum::<f64>() / nf;
    Ok(LossBreakdown {
        total,
        dsm_term: dsm.iter().sum::<f64>() / nf,
        tsm_term: tsm.iter().sum::<f64>() / nf,
        per_sample_confidence: confidence.to_vec(),
        effective_weights: weights,
        sigma_a_used: sigma_a,
    })
}

/// Clean patches and the standard-normal draws that corrupt them.
#[derive(Debug, Clone)]
pub struct Batch {
    pub clean: Vec<Patch>,
    pub noise: Vec<Patch>,
}

/// Guidance source for [`adaptive_loss`].
pub struct Guidance<'a> {
    pub bank: &'a TargetBank,
    pub feature_map: &'a dyn FeatureMap,
    /// Replaces the similarity-derived confidence when set.
    pub fixed_wt: Option<f64>,
    /// Multiplies bank projections to put them in patch units. The model's σ
    /// is expected to carry the same factor.
    pub target_gain: f64,
}

/// Loss, gradient with respect to each network output, and the forward trace.
pub struct LossEval<T: Real> {
    pub breakdown: LossBreakdown,
    pub d_network: Vec<Patch>,
    pub trace: Trace<T>,
}

/// Confidence-gated loss on one batch. The network runs once on
/// `c_in·(y + σ_a u)`; both branches share that forward pass. Matching is done
/// on the corrupted patch and carries no gradient. Without guidance (or with
/// `λ_t = 0`) the TSM branch is skipped and reported as zero.
pub fn adaptive_loss_eval<T: Real>(
    model: &ScoreModel<T>,
    batch: &Batch,
    guidance: Option<&Guidance>,
    lambda_t: f64,
    sigma_a: f64,
) -> Result<LossEval<T>> {
    positive("sigma_a", sigma_a)?;
    if !(0.0..=1.0).contains(&lambda_t) {
        return Err(Error::Parameter(format!("lambda_t must lie in [0, 1], got {lambda_t}")));
    }
    if batch.clean.len() != batch.noise.len() || batch.clean.is_empty() {
        return Err(Error::Shape("batch needs matching, nonempty clean and noise lists".into()));
    }
    let n = batch.clean.len();
    let c = model.coeffs(sigma_a)?;
    let xs: Vec<Patch> = batch
        .clean
        .iter()
        .zip(&batch.noise)
        .map(|(y, u)| {
            same_shape(y, u, "noise draw")?;
            Ok(y + &(u * sigma_a))
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<Patch> = xs.iter().map(|x| x * c.c_in).collect();
    let (fs, trace) = model.network_train(&inputs, &vec![sigma_a; n])?;

    let mut dsm = Vec::with_capacity(n);
    let mut d_dsm = Vec::with_capacity(n);
    for i in 0..n {
        let s = &fs[i] * c.c_out + &(&xs[i] * c.c_skip);
        let r = &s * sigma_a + &batch.noise[i];
        dsm.push(r.mapv(|v| v * v).sum());
        d_dsm.push(dsm_grad_wrt_score(&s, &batch.noise[i], sigma_a) * c.c_out);
    }

    let mut tsm = vec![0.0; n];
    let mut d_tsm: Vec<Option<Patch>> = vec![None; n];
    let mut confidence = vec![0.0; n];
    let mut degenerate = vec![true; n];
    let mut bank_size = 1;
    if let Some(g) = guidance {
        positive("target gain", g.target_gain)?;
        bank_size = g.bank.len();
        let sigma = model.sigma;
        for i in 0..n {
            let m = g.bank.match_patch(&xs[i], g.feature_map)?;
            confidence[i] = m.confidence;
            degenerate[i] = m.degenerate;
            if lambda_t > 0.0 && !m.degenerate {
                let target = m.target * g.target_gain;
                same_shape(&target, &xs[i], "bank target")?;
                let r = tsm_residual(&fs[i], &xs[i], &target, sigma, sigma_a);
                tsm[i] = c.loss_weight * r.mapv(|v| v * v).sum();
                d_tsm[i] = Some(tsm_grad_wrt_network(&fs[i], &xs[i], &target, sigma, sigma_a));
            }
        }
    }
    let fixed = guidance.and_then(|g| g.fixed_wt);
    let breakdown = combine_losses(&dsm, &tsm, &confidence, &degenerate, bank_size, lambda_t, fixed, sigma_a)?;
    let nf = n as f64;
    let d_network = (0..n)
        .map(|i| {
            let w = breakdown.effective_weights[i];
            let mut d = &d_dsm[i] * ((1.0 - w) / nf);
            if let Some(dt) = &d_tsm[i] {
                d.scaled_add(w / nf, dt);
            }
            d
        })
        .collect();
    Ok(LossEval {
        breakdown,
        d_network,
        trace,
    })
}

/// [`adaptive_loss_eval`] without the gradient.
pub fn adaptive_loss<T: Real>(
    model: &ScoreModel<T>,
    batch: &Batch,
    guidance: Option<&Guidance>,
    lambda_t: f64,
    sigma_a: f64,
) -> Result<LossBreakdown> {
    Ok(adaptive_loss_eval(model, batch, guidance, lambda_t, sigma_a)?.breakdown)
}

/// One component `(weight, mean, std)` of a 1-D Gaussian mixture.
pub type MixtureComponent = (f64, f64, f64);

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// Closed-form score of the mixture convolved with `𝒩(0, σ_a²)`.
pub fn mixture_score(mixture: &[MixtureComponent], sigma_a: f64, x: f64) -> f64 {
    let logs: Vec<f64> = mixture
        .iter()
        .map(|&(w, m, s)| w.ln() + log_normal(x, m, s * s + sigma_a * sigma_a))
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (&(_, m, s), &l) in mixture.iter().zip(&logs) {
        let p = (l - top).exp();
        num += p * (-(x - m) / (s * s + sigma_a * sigma_a));
        den += p;
    }
    num / den
}

const QUAD_TOL: f64 = 1e-12;
const QUAD_MAX_LEVEL: u32 = 20;

/// Posterior-weighted conditional score `∫ p(y|x)·(−(x−y)/σ_a²) dy` by
/// composite Simpson quadrature, refined by interval doubling.
pub fn posterior_expected_score(mixture: &[MixtureComponent], sigma_a: f64, x: f64) -> Result<f64> {
    let sa2 = sigma_a * sigma_a;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut scale = f64::NEG_INFINITY;
    for &(w, m, s) in mixture {
        let v = s * s;
        let post_mean = (m * sa2 + x * v) / (v + sa2);
        let post_sd = (v * sa2 / (v + sa2)).sqrt();
        lo = lo.min(post_mean - 8.0 * post_sd);
        hi = hi.max(post_mean + 8.0 * post_sd);
        scale = scale.max(w.ln() + log_normal(x, m, v + sa2));
    }
    let joint = |y: f64| -> f64 {
        let prior: f64 = mixture.iter().map(|&(w, m, s)| (w.ln() + log_normal(y, m, s * s)).exp()).sum();
        if prior <= 0.0 {
            return 0.0;
        }
        (prior.ln() + log_normal(x, y, sa2) - scale).exp()
    };
    let simpson = |n: usize| -> (f64, f64) {
        let h = (hi - lo) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..=n {
            let y = lo + k as f64 * h;
            let c = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let p = joint(y);
            den += c * p;
            num += c * p * (-(x - y) / sa2);
        }
        (num * h / 3.0, den * h / 3.0)
    };
    let mut n = 64;
    let mut prev = simpson(n);
    let mut est = f64::INFINITY;
    for _ in 0..QUAD_MAX_LEVEL {
        n *= 2;
        let cur = simpson(n);
        let scale_num = cur.0.abs().max(cur.1 / sa2.sqrt());
        est = ((cur.0 - prev.0).abs() / scale_num).max((cur.1 - prev.1).abs() / cur.1);
        prev = cur;
        if est < QUAD_TOL {
            return Ok(cur.0 / cur.1);
        }
    }
    Err(Error::Integration {
        estimate: est,
        tolerance: QUAD_TOL,
    })
}

/// Largest absolute gap between the closed-form marginal score and the
/// posterior-averaged conditional score over `grid`.
pub fn verify_posterior_identity(mixture: &[MixtureComponent], sigma_a: f64, grid: &[f64]) -> Result<f64> {
    positive("sigma_a", sigma_a)?;
    if mixture.is_empty() || mixture.iter().any(|&(w, _, s)| !(w > 0.0 && s > 0.0)) {
        return Err(Error::Parameter("mixture needs positive weights and stds".into()));
    }
    let total: f64 = mixture.iter().map(|c| c.0).sum();
    let mix: Vec<MixtureComponent> = mixture.iter().map(|&(w, m, s)| (w / total, m, s)).collect();
    let mut worst = 0.0f64;
    for &x in grid {
        let lhs = mixture_score(&mix, sigma_a, x);
        let rhs = posterior_expected_score(&mix, sigma_a, x)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Monte-Carlo stationarity of DSM and TSM at the analytic score.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub dsm_derivative: f64,
    pub dsm_standard_error: f64,
    pub tsm_derivative: f64,
    pub tsm_standard_error: f64,
    pub dsm_at_optimum: f64,
    pub dsm_perturbed: f64,
    pub tsm_at_optimum: f64,
    pub tsm_perturbed: f64,
}

/// Rounding-level slack added to the 3-SE test: the TSM derivative at the
/// optimum is zero per sample, so its standard error is zero as well.
pub const STATIONARITY_FLOOR: f64 = 1e-9;

impl ConsistencyReport {
    pub fn dsm_stationary(&self) -> bool {
        self.dsm_derivative.abs() <= 3.0 * self.dsm_standard_error + STATIONARITY_FLOOR
    }

    pub fn tsm_stationary(&self) -> bool {
        self.tsm_derivative.abs() <= 3.0 * self.tsm_standard_error + STATIONARITY_FLOOR
    }

    pub fn strict_minimum(&self) -> bool {
        self.dsm_perturbed > self.dsm_at_optimum && self.tsm_perturbed > self.tsm_at_optimum
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Draws `Y ~ 𝒩(0, σ²)`, `X = Y + σ_a·U`, sets `ỹ = E[Y|X]`, and evaluates both
/// losses along `s_ε(x) = (1+ε)·s*(x)`, `s*(x) = −x/(σ²+σ_a²)`, using central
/// differences in ε. The losses go through [`dsm_loss`] and [`tsm_loss`].
pub fn dsm_tsm_consistency_check(sigma: f64, sigma_a: f64, n_samples: usize, seed: u64) -> Result<ConsistencyReport> {
    positive("sigma", sigma)?;
    positive("sigma_a", sigma_a)?;
    if n_samples < 2 {
        return Err(Error::Parameter("need at least two samples".into()));
    }
    let c = precondition_coeffs(sigma, sigma_a)?;
    let s_total = sigma * sigma + sigma_a * sigma_a;
    let score = |eps: f64| move |x: f64| -(1.0 + eps) * x / s_total;
    let mut r = rng(seed);
    let h = 1e-3;
    let (mut d_dsm, mut d_tsm) = (Vec::with_capacity(n_samples), Vec::with_capacity(n_samples));
    let (mut dsm0, mut dsm1, mut tsm0, mut tsm1) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n_samples {
        let y: f64 = sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r);
        let u: f64 = StandardNormal.sample(&mut r);
        let x = y + sigma_a * u;
        let yp = Array2::from_elem((1, 1), y);
        let up = Array2::from_elem((1, 1), u);
        let xp = Array2::from_elem((1, 1), x);
        let target = Array2::from_elem((1, 1), x * sigma * sigma / s_total);
        let dsm_at = |eps: f64| dsm_loss(|z: &Patch, _| z.mapv(score(eps)), &yp, &up, sigma_a);
        // network output realizing s_ε on the scaled input z = c_in·x
        let tsm_at = |eps: f64| {
            tsm_loss(
                |z: &Patch, _| z.mapv(|zz| (score(eps)(zz / c.c_in) - c.c_skip * zz / c.c_in) / c.c_out),
                &xp,
                &target,
                sigma,
                sigma_a,
            )
        };
        d_dsm.push((dsm_at(h)? - dsm_at(-h)?) / (2.0 * h));
        d_tsm.push((tsm_at(h)? - tsm_at(-h)?) / (2.0 * h));
        dsm0 += dsm_at(0.0)?;
        dsm1 += dsm_at(0.1)?;
        tsm0 += tsm_at(0.0)?;
        tsm1 += tsm_at(0.1)?;
    }
    let n = n_samples as f64;
    let (dm, dse) = mean_se(&d_dsm);
    let (tm, tse) = mean_se(&d_tsm);
    Ok(ConsistencyReport {
        dsm_derivative: dm,
        dsm_standard_error: dse,
        tsm_derivative: tm,
        tsm_standard_error: tse,
        dsm_at_optimum: dsm0 / n,
        dsm_perturbed: dsm1 / n,
        tsm_at_optimum: tsm0 / n,
        tsm_perturbed: tsm1 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_model::ScoreModelConfig;
    use crate::target_bank::DownsampleFeatures;
    use rand::Rng;

    fn randn(shape: (usize, usize), seed: u64) -> Patch {
        let mut r = rng(seed);
        Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut r))
    }

    #[test]
    fn dsm_examples() {
        let x = randn((10, 10), 1);
        let u = randn((10, 10), 2);
        let sa = 0.3;
        let oracle = |_: &Patch, _: f64| &u * (-1.0 / sa);
        assert!(dsm_loss(oracle, &x, &u, sa).unwrap().abs() < 1e-20);
        let zero = |z: &Patch, _: f64| z.mapv(|_| 0.0);
        let big = randn((100, 100), 3);
        let l = dsm_loss(zero, &Array2::zeros((100, 100)), &big, sa).unwrap();
        assert!((l / 1e4 - 1.0).abs() < 0.05);
        let l2 = dsm_loss(zero, &Array2::zeros((100, 100)), &(&big * 2.0), sa).unwrap();
        assert!((l2 / l - 4.0).abs() < 1e-12);
        assert!(matches!(dsm_loss(zero, &x, &u, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn dsm_residual_forms_agree() {
        // ‖s + u/σ_a‖² == σ_a⁻²·dsm
        let x = randn((4, 4), 5);
        let u = randn((4, 4), 6);
        let sa = 0.07;
        let model = |z: &Patch, _: f64| z.mapv(|v| 0.3 * v.sin() - v);
        let dsm = dsm_loss(model, &x, &u, sa).unwrap();
        let s = model(&(&x + &(&u * sa)), sa);
        let alt = (&s + &(&u / sa)).mapv(|v| v * v).sum();
        assert!((alt - dsm / (sa * sa)).abs() < 1e-9 * alt);
    }

    #[test]
    fn tsm_examples() {
        let (sigma, sa) = (1.3, 0.4);
        let x = randn((5, 5), 7);
        let t = randn((5, 5), 8);
        let st = sigma * sigma + sa * sa;
        let oracle = |_: &Patch, _: f64| (&t / (sigma * sigma) - &x / st) * (sigma * st.sqrt() / sa);
        assert!(tsm_loss(oracle, &x, &t, sigma, sa).unwrap() < 1e-20);
        let zero = |z: &Patch, _: f64| z.mapv(|_| 0.0);
        let z = Array2::zeros((3, 3));
        assert_eq!(tsm_loss(zero, &z, &z, sigma, sa).unwrap(), 0.0);
        let one = Array2::from_elem((1, 1), 1.0);
        let zz = Array2::zeros((1, 1));
        assert!((tsm_loss(zero, &one, &zz, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(tsm_loss(zero, &x, &z, sigma, sa), Err(Error::Shape(_))));
        assert!(tsm_loss(zero, &x, &t, 0.0, sa).is_err());
        assert!(tsm_loss(zero, &x, &t, sigma, 0.0).is_err());
    }

    #[test]
    fn tsm_prefactor_scaling() {
        // a network that makes the bracket a constant 1 everywhere
        let x = randn((3, 3), 9);
        let t = randn((3, 3), 10);
        for (sigma, sa) in [(1.0, 0.5), (0.3, 2.0), (2.0, 0.01)] {
            let st: f64 = sigma * sigma + sa * sa;
            let a = sa / (sigma * st.sqrt());
            let net = |_: &Patch, _: f64| (&t / (sigma * sigma) - &x / st + 1.0) / a;
            let l = tsm_loss(net, &x, &t, sigma, sa).unwrap();
            let lw = (sigma * sigma * sa * sa + sigma.powi(4)) / (sigma * sigma);
            assert!((l - 9.0 * lw).abs() < 1e-9 * l);
        }
    }

    #[test]
    fn combine_examples() {
        let b = combine_losses(&[2.0, 4.0], &[0.0, 0.0], &[0.7, 0.2], &[false, false], 4, 0.0, None, 0.1).unwrap();
        assert_eq!(b.total, b.dsm_term);
        let b = combine_losses(&[2.0, 4.0], &[1.0, 3.0], &[1.0, 1.0], &[false, false], 4, 1.0, None, 0.1).unwrap();
        assert_eq!(b.total, b.tsm_term);
        // confidence (1, 0): the second sample is a degenerate match
        let b = combine_losses(&[2.0, 4.0], &[1.0, 3.0], &[1.0, 0.0], &[false, true], 4, 0.5, None, 0.1).unwrap();
        assert_eq!(b.effective_weights, vec![0.5, 0.0]);
        assert!((b.total - (0.5 * 1.0 + 0.5 * 2.0 + 4.0) / 2.0).abs() < 1e-15);
        // clipping to [1/m, 1]
        let b = combine_losses(&[1.0], &[1.0], &[0.01], &[false], 4, 1.0, None, 0.1).unwrap();
        assert_eq!(b.effective_weights, vec![0.25]);
        let b = combine_losses(&[1.0], &[1.0], &[0.9], &[false], 4, 0.5, Some(0.1), 0.1).unwrap();
        assert_eq!(b.effective_weights, vec![0.05]);
        assert!(combine_losses(&[1.0], &[1.0], &[0.5], &[false], 4, 1.5, None, 0.1).is_err());
    }

    #[test]
    fn combine_is_affine_in_lambda() {
        let mut r = rng(4);
        let d: Vec<f64> = (0..6).map(|_| r.random::<f64>() * 3.0).collect();
        let t: Vec<f64> = (0..6).map(|_| r.random::<f64>() * 3.0).collect();
        let c: Vec<f64> = (0..6).map(|_| r.random::<f64>()).collect();
        let g = vec![false; 6];
        let f = |l: f64| combine_losses(&d, &t, &c, &g, 3, l, None, 0.1).unwrap().total;
        assert!((f(0.5) - 0.5 * (f(0.0) + f(1.0))).abs() < 1e-12);
        assert!((f(0.2) - (0.8 * f(0.0) + 0.2 * f(1.0))).abs() < 1e-12);
    }

    fn two_blob_bank(n: usize) -> TargetBank {
        let raw: Vec<Patch> = (0..6)
            .map(|k| {
                let a = k as f64 * 0.9;
                let (cx, cy) = (n as f64 / 2.0 + 2.0 * a.cos(), n as f64 / 2.0 + 2.0 * a.sin());
                Array2::from_shape_fn((n, n), |(i, j)| {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    (-d2 / 4.0).exp() + 0.5 * (-((i as f64 - n as f64 / 2.0).powi(2) + (j as f64 - 2.0).powi(2)) / 2.0).exp()
                })
            })
            .collect();
        TargetBank::from_projections(raw, &DownsampleFeatures { factor: 2 }, 0.1, 0.05, false).unwrap()
    }

    fn small_model(seed: u64) -> ScoreModel<f64> {
        let cfg = ScoreModelConfig {
            base_width: 4,
            channel_multipliers: vec![1, 2],
            patch_size: 8,
            ..Default::default()
        };
        let mut m = ScoreModel::<f64>::new(cfg, 0.8, seed).unwrap();
        let mut r = rng(seed);
        let range = m.output_layer_range();
        for v in &mut m.params_mut()[range] {
            *v = 0.3 * (r.random::<f64>() - 0.5);
        }
        m
    }

    fn batch(seed: u64) -> Batch {
        Batch {
            clean: (0..3).map(|i| randn((8, 8), seed + i)).collect(),
            noise: (0..3).map(|i| randn((8, 8), seed + 10 + i)).collect(),
        }
    }

    #[test]
    fn adaptive_loss_matches_standalone_losses() {
        let m = small_model(1);
        let bank = two_blob_bank(8);
        let fm = DownsampleFeatures { factor: 2 };
        let g = Guidance {
            bank: &bank,
            feature_map: &fm,
            fixed_wt: None,
            target_gain: 1.0,
        };
        let b = batch(20);
        let sa = 0.3;
        let out = adaptive_loss(&m, &b, Some(&g), 0.7, sa).unwrap();
        let mut dsm = 0.0;
        let mut tsm = 0.0;
        let mut total = 0.0;
        for i in 0..3 {
            let score = |z: &Patch, s: f64| m.forward(&[z.clone()], &[s]).unwrap().remove(0);
            let d = dsm_loss(score, &b.clean[i], &b.noise[i], sa).unwrap();
            let x = &b.clean[i] + &(&b.noise[i] * sa);
            let mr = bank.match_patch(&x, &fm).unwrap();
            let net = |z: &Patch, s: f64| m.network(&[z.clone()], &[s]).unwrap().remove(0);
            let t = tsm_loss(net, &x, &mr.target, m.sigma, sa).unwrap();
            let w = 0.7 * mr.confidence.max(1.0 / 6.0);
            dsm += d / 3.0;
            tsm += t / 3.0;
            total += (w * t + (1.0 - w) * d) / 3.0;
            assert!((out.per_sample_confidence[i] - mr.confidence).abs() < 1e-15);
        }
        assert!((out.dsm_term - dsm).abs() < 1e-9 * dsm);
        assert!((out.tsm_term - tsm).abs() < 1e-9 * tsm);
        assert!((out.total - total).abs() < 1e-9 * total);
        let warm = adaptive_loss(&m, &b, Some(&g), 0.0, sa).unwrap();
        assert_eq!(warm.tsm_term, 0.0);
        assert_eq!(warm.total, warm.dsm_term);
        assert!(adaptive_loss(&m, &b, Some(&g), -0.1, sa).is_err());
    }

    #[test]
    fn adaptive_gradient_matches_finite_differences() {
        let mut m = small_model(2);
        let bank = two_blob_bank(8);
        let fm = DownsampleFeatures { factor: 2 };
        let g = Guidance {
            bank: &bank,
            feature_map: &fm,
            fixed_wt: None,
            target_gain: 1.0,
        };
        let b = batch(40);
        let sa = 0.2;
        let ev = adaptive_loss_eval(&m, &b, Some(&g), 0.6, sa).unwrap();
        let (grads, _) = m.backward(&ev.trace, &ev.d_network).unwrap();
        let mut r = rng(9);
        let h = 1e-5;
        for _ in 0..25 {
            let i = r.random_range(0..m.n_params());
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = adaptive_loss(&m, &b, Some(&g), 0.6, sa).unwrap().total;
            m.params_mut()[i] = orig - h;
            let dn = adaptive_loss(&m, &b, Some(&g), 0.6, sa).unwrap().total;
            m.params_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-7);
            assert!(rel < 1e-3, "param {i}: {fd} vs {}", grads[i]);
        }
    }

    /// 100-parameter linear score `s(x) = A·vec(x)` on a 10-pixel patch.
    #[test]
    fn loss_gradients_on_linear_toy() {
        let mut r = rng(12);
        let a: Vec<f64> = (0..100).map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)).collect();
        let apply = |a: &[f64], z: &Patch| -> Patch {
            let v: Vec<f64> = z.iter().cloned().collect();
            Array2::from_shape_fn((2, 5), |(i, j)| (0..10).map(|k| a[(i * 5 + j) * 10 + k] * v[k]).sum())
        };
        let x = randn((2, 5), 13);
        let u = randn((2, 5), 14);
        let t = randn((2, 5), 15);
        let (sigma, sa) = (0.9, 0.35);
        let xt = &x + &(&u * sa);
        let xv: Vec<f64> = xt.iter().cloned().collect();
        // dsm: dℓ/dA_ij = g_i·x̃_j
        let s = apply(&a, &xt);
        let gs: Vec<f64> = dsm_grad_wrt_score(&s, &u, sa).iter().cloned().collect();
        // tsm: network sees z = c_in·x
        let c = precondition_coeffs(sigma, sa).unwrap();
        let z = &x * c.c_in;
        let zv: Vec<f64> = z.iter().cloned().collect();
        let f = apply(&a, &z);
        let gt: Vec<f64> = tsm_grad_wrt_network(&f, &x, &t, sigma, sa).iter().cloned().collect();
        let h = 1e-6;
        for p in 0..100 {
            let (i, j) = (p / 10, p % 10);
            let mut ap = a.clone();
            ap[p] += h;
            let mut am = a.clone();
            am[p] -= h;
            let fd = (dsm_loss(|q: &Patch, _| apply(&ap, q), &x, &u, sa).unwrap()
                - dsm_loss(|q: &Patch, _| apply(&am, q), &x, &u, sa).unwrap())
                / (2.0 * h);
            let an = gs[i] * xv[j];
            assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-3);
            let fd = (tsm_loss(|q: &Patch, _| apply(&ap, q), &x, &t, sigma, sa).unwrap()
                - tsm_loss(|q: &Patch, _| apply(&am, q), &x, &t, sigma, sa).unwrap())
                / (2.0 * h);
            let an = gt[i] * zv[j];
            assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-3);
        }
    }

    #[test]
    fn posterior_identity_single_gaussian() {
        let grid: Vec<f64> = (0..41).map(|i| -4.0 + 0.2 * i as f64).collect();
        let err = verify_posterior_identity(&[(1.0, 0.0, 1.5)], 0.7, &grid).unwrap();
        assert!(err < 1e-10, "{err}");
        // closed form −x/(σ²+σ_a²)
        assert!((mixture_score(&[(1.0, 0.0, 1.5)], 0.7, 2.0) + 2.0 / (2.25 + 0.49)).abs() < 1e-14);
    }

    #[test]
    fn posterior_identity_mixture() {
        let grid: Vec<f64> = (0..81).map(|i| -4.0 + 0.1 * i as f64).collect();
        let mix = [(0.5, -2.0, 0.5), (0.5, 2.0, 0.5)];
        for sa in [0.3, 3.0] {
            let err = verify_posterior_identity(&mix, sa, &grid).unwrap();
            assert!(err < 1e-6, "sigma_a {sa}: {err}");
        }
    }

    #[test]
    fn consistency_check_small() {
        let r = dsm_tsm_consistency_check(1.0, 0.5, 20_000, 3).unwrap();
        assert!(r.dsm_stationary() && r.tsm_stationary(), "{r:?}");
        assert!(r.strict_minimum());
        assert!(r.tsm_at_optimum < 1e-20);
    }
}
