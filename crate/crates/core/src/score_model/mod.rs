//! Preconditioned score network `s(x; σ_a) = c_out·F(c_in·x, σ_a) + c_skip·x`.
//!
//! `F` is a small residual U-Net. The noise level enters as a constant
//! second input channel holding `ln(σ_a)/4`. The last convolution starts at
//! zero, so a fresh model returns the analytic skip term `−x/(σ²+σ_a²)`.

mod checkpoint;
pub mod layers;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mrc_io::{standardize, Patch};
use crate::noise_model::rng;
use crate::target_bank::{l2_normalize, FeatureMap};
pub use checkpoint::{load_checkpoint, read_checkpoint_from, save_checkpoint, write_checkpoint_to, Checkpoint};
use layers::{avg_pool2, avg_pool2_backward, silu, silu_backward, upsample2, upsample2_backward, Conv, Real, ResBlock, ResCache, Tensor};

/// Smallest σ_a fed to the log-level channel.
const MIN_LEVEL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModelConfig {
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub in_channels: usize,
    pub patch_size: usize,
    /// Noise level fed to the network when computing encoder features.
    pub encode_level: f64,
}

impl Default for ScoreModelConfig {
    fn default() -> Self {
        ScoreModelConfig {
            base_width: 128,
            channel_multipliers: vec![1, 2, 2, 4],
            in_channels: 1,
            patch_size: 256,
            encode_level: 0.1,
        }
    }
}

impl ScoreModelConfig {
    /// CPU-sized configuration: width 32, multipliers (1, 2), 64-pixel patches.
    pub fn desk() -> Self {
        ScoreModelConfig {
            base_width: 32,
            channel_multipliers: vec![1, 2],
            patch_size: 64,
            ..Default::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_width).collect()
    }

    /// Dimension q of [`ScoreModel::encode`] features.
    pub fn feature_dim(&self) -> usize {
        *self.widths().last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(Error::Parameter(format!("base_width must be >= 4, got {}", self.base_width)));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Parameter("channel multipliers must be nonempty and positive".into()));
        }
        if self.in_channels != 1 {
            return Err(Error::Parameter("only single-channel input is supported".into()));
        }
        let div = 1usize << (self.levels() - 1);
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return Err(Error::Parameter(format!(
                "patch size {} must be a positive multiple of {div}",
                self.patch_size
            )));
        }
        if !(self.encode_level > 0.0 && self.encode_level.is_finite()) {
            return Err(Error::Parameter("encode_level must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecondCoeffs {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub loss_weight: f64,
}

pub fn precondition_coeffs(sigma: f64, sigma_a: f64) -> Result<PrecondCoeffs> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    if !(sigma_a >= 0.0 && sigma_a.is_finite()) {
        return Err(Error::Parameter(format!("sigma_a must be non-negative, got {sigma_a}")));
    }
    let s2 = sigma * sigma;
    let total = s2 + sigma_a * sigma_a;
    Ok(PrecondCoeffs {
        c_in: 1.0 / total.sqrt(),
        c_skip: -1.0 / total,
        c_out: -sigma_a / (sigma * total.sqrt()),
        loss_weight: (s2 * sigma_a * sigma_a + s2 * s2) / s2,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Arch {
    conv_in: Conv,
    enc: Vec<ResBlock>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    conv_out: Conv,
    n_params: usize,
}

impl Arch {
    fn new(cfg: &ScoreModelConfig) -> Self {
        let w = cfg.widths();
        let l = w.len();
        let mut off = 0;
        let conv_in = Conv::new(cfg.in_channels + 1, w[0], 3, &mut off);
        let enc = (0..l)
            .map(|i| ResBlock::new(if i == 0 { w[0] } else { w[i - 1] }, w[i], &mut off))
            .collect();
        let mid = ResBlock::new(w[l - 1], w[l - 1], &mut off);
        let dec = (0..l)
            .map(|i| {
                let below = if i == l - 1 { w[l - 1] } else { w[i + 1] };
                ResBlock::new(below + w[i], w[i], &mut off)
            })
            .collect();
        let conv_out = Conv::new(w[0], cfg.in_channels, 3, &mut off);
        Arch {
            conv_in,
            enc,
            mid,
            dec,
            conv_out,
            n_params: off,
        }
    }

    fn convs(&self) -> Vec<Conv> {
        let mut v = vec![self.conv_in];
        for b in self.enc.iter().chain(std::iter::once(&self.mid)).chain(self.dec.iter()) {
            v.extend(b.convs().copied());
        }
        v.push(self.conv_out);
        v
    }
}

/// Intermediate activations of one sample, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleTrace<T> {
    x0: Tensor<T>,
    enc: Vec<ResCache<T>>,
    mid: ResCache<T>,
    dec: Vec<ResCache<T>>,
    g0: Tensor<T>,
    features: Tensor<T>,
}

/// Batch trace returned by [`ScoreModel::network_train`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    samples: Vec<SampleTrace<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel<T: Real = f32> {
    pub config: ScoreModelConfig,
    /// Surrogate standard deviation σ used by the preconditioning.
    pub sigma: f64,
    /// Optimizer steps taken so far.
    pub step: u64,
    params: Vec<T>,
    arch: Arch,
}

impl<T: Real> ScoreModel<T> {
    /// Fan-in scaled Gaussian init (std `1/√fan_in`), zero biases, zero final layer.
    pub fn new(config: ScoreModelConfig, sigma: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        precondition_coeffs(sigma, 0.0)?;
        let arch = Arch::new(&config);
        let mut params = vec![T::zero(); arch.n_params];
        let mut r = rng(seed);
        for conv in arch.convs() {
            if conv == arch.conv_out {
                continue;
            }
            let n = Normal::new(0.0, 1.0 / (conv.fan_in() as f64).sqrt()).expect("std > 0");
            for v in &mut params[conv.w..conv.w + conv.weight_len()] {
                *v = T::from_f64_lossy(n.sample(&mut r));
            }
        }
        Ok(ScoreModel {
            config,
            sigma,
            step: 0,
            params,
            arch,
        })
    }

    pub(crate) fn from_parts(config: ScoreModelConfig, sigma: f64, step: u64, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        precondition_coeffs(sigma, 0.0)?;
        let arch = Arch::new(&config);
        if params.len() != arch.n_params {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                arch.n_params
            )));
        }
        Ok(ScoreModel {
            config,
            sigma,
            step,
            params,
            arch,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Parameter offsets of the final convolution (weights then bias).
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        self.arch.conv_out.w..self.arch.conv_out.b + self.arch.conv_out.cout
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> ScoreModel<U> {
        ScoreModel {
            config: self.config.clone(),
            sigma: self.sigma,
            step: self.step,
            params: self.params.iter().map(|v| U::from_f64_lossy(v.to_f64().expect("finite"))).collect(),
            arch: self.arch.clone(),
        }
    }

    pub fn coeffs(&self, sigma_a: f64) -> Result<PrecondCoeffs> {
        precondition_coeffs(self.sigma, sigma_a)
    }

    /// The network is fully convolutional: any input whose sides are positive
    /// multiples of `2^(levels-1)` is accepted, not only `patch_size`.
    fn check_shape(&self, x: &Patch) -> Result<()> {
        let div = 1usize << (self.config.levels() - 1);
        let (h, w) = x.dim();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input sides must be positive multiples of {div}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn input_tensor(&self, x: &Patch, sigma_a: f64) -> Tensor<T> {
        let (h, w) = x.dim();
        let level = T::from_f64_lossy(sigma_a.max(MIN_LEVEL).ln() / 4.0);
        let mut t = Tensor::zeros(2, h, w);
        for (d, v) in t.data.iter_mut().zip(x.iter()) {
            *d = T::from_f64_lossy(*v);
        }
        t.data[h * w..].fill(level);
        t
    }

    fn sample_forward(&self, x0: Tensor<T>) -> (Tensor<T>, SampleTrace<T>) {
        let p = &self.params;
        let a = &self.arch;
        let l = a.enc.len();
        let mut h = a.conv_in.forward(p, &x0);
        let mut enc = Vec::with_capacity(l);
        let mut skips = Vec::with_capacity(l);
        for (i, block) in a.enc.iter().enumerate() {
            if i > 0 {
                h = avg_pool2(&h);
            }
            let (y, c) = block.forward(p, h);
            skips.push(y.clone());
            enc.push(c);
            h = y;
        }
        let features = h.clone();
        let (mut g, mid) = a.mid.forward(p, h);
        let mut dec: Vec<Option<ResCache<T>>> = vec![None; l];
        for i in (0..l).rev() {
            if i < l - 1 {
                g = upsample2(&g);
            }
            let cat = Tensor::concat(&g, &skips[i]);
            let (y, c) = a.dec[i].forward(p, cat);
            dec[i] = Some(c);
            g = y;
        }
        let out = a.conv_out.forward(p, &silu(&g));
        let trace = SampleTrace {
            x0,
            enc,
            mid,
            dec: dec.into_iter().map(|c| c.expect("filled")).collect(),
            g0: g,
            features,
        };
        (out, trace)
    }

    fn sample_backward(&self, t: &SampleTrace<T>, dout: &Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let p = &self.params;
        let a = &self.arch;
        let l = a.enc.len();
        let da = a.conv_out.backward(p, grads, &silu(&t.g0), dout, true).expect("dx");
        let mut dg = silu_backward(&t.g0, &da);
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; l];
        let mut dmid = None;
        for i in 0..l {
            let dcat = a.dec[i].backward(p, grads, &t.dec[i], &dg);
            let below = dcat.c - a.dec[i].conv2.cout;
            let (dbelow, dskip) = dcat.split(below);
            dskips[i] = Some(dskip);
            if i < l - 1 {
                dg = upsample2_backward(&dbelow);
            } else {
                dmid = Some(dbelow);
            }
        }
        let mut dh = a.mid.backward(p, grads, &t.mid, &dmid.expect("set"));
        for i in (0..l).rev() {
            dh.add_assign(dskips[i].as_ref().expect("set"));
            let din = a.enc[i].backward(p, grads, &t.enc[i], &dh);
            dh = if i > 0 { avg_pool2_backward(&din) } else { din };
        }
        a.conv_in.backward(p, grads, &t.x0, &dh, true).expect("dx")
    }

    fn to_patch(t: &Tensor<T>) -> Patch {
        Array2::from_shape_fn((t.h, t.w), |(i, j)| t.data[i * t.w + j].to_f64().expect("finite"))
    }

    fn to_tensor(x: &Patch) -> Tensor<T> {
        let (h, w) = x.dim();
        Tensor {
            c: 1,
            h,
            w,
            data: x.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        }
    }

    /// Raw network `F(input, σ_a)`: no preconditioning is applied to `input`.
    pub fn network(&self, inputs: &[Patch], sigma_a: &[f64]) -> Result<Vec<Patch>> {
        Ok(self.network_train(inputs, sigma_a)?.0)
    }

    /// [`ScoreModel::network`] that also returns the trace for [`ScoreModel::backward`].
    pub fn network_train(&self, inputs: &[Patch], sigma_a: &[f64]) -> Result<(Vec<Patch>, Trace<T>)> {
        if inputs.len() != sigma_a.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} noise levels",
                inputs.len(),
                sigma_a.len()
            )));
        }
        let mut outs = Vec::with_capacity(inputs.len());
        let mut samples = Vec::with_capacity(inputs.len());
        for (x, &s) in inputs.iter().zip(sigma_a) {
            self.check_shape(x)?;
            let (o, t) = self.sample_forward(self.input_tensor(x, s));
            outs.push(Self::to_patch(&o));
            samples.push(t);
        }
        Ok((outs, Trace { samples }))
    }

    /// Back-propagates `d_out[i] = ∂L/∂F_i`. Returns parameter gradients and
    /// gradients with respect to the network input pixels.
    pub fn backward(&self, trace: &Trace<T>, d_out: &[Patch]) -> Result<(Vec<T>, Vec<Patch>)> {
        if d_out.len() != trace.samples.len() {
            return Err(Error::Shape("gradient batch does not match trace".into()));
        }
        let mut grads = vec![T::zero(); self.params.len()];
        let mut dx = Vec::with_capacity(d_out.len());
        for (t, d) in trace.samples.iter().zip(d_out) {
            self.check_shape(d)?;
            let din = self.sample_backward(t, &Self::to_tensor(d), &mut grads);
            let (img, _) = din.split(1);
            dx.push(Self::to_patch(&img));
        }
        Ok((grads, dx))
    }

    /// Score field `c_out·F(c_in·x, σ_a) + c_skip·x` for each item.
    pub fn forward(&self, xs: &[Patch], sigma_a: &[f64]) -> Result<Vec<Patch>> {
        if xs.len() != sigma_a.len() {
            return Err(Error::Shape(format!("{} inputs but {} noise levels", xs.len(), sigma_a.len())));
        }
        xs.iter()
            .zip(sigma_a)
            .map(|(x, &s)| {
                self.check_shape(x)?;
                let c = self.coeffs(s)?;
                let skip = x * c.c_skip;
                if c.c_out == 0.0 {
                    return Ok(skip);
                }
                let f = &self.network(&[x * c.c_in], &[s])?[0];
                Ok(f * c.c_out + skip)
            })
            .collect()
    }

    /// Deepest encoder activation, spatially averaged and L2-normalized.
    /// The patch is standardized first and the level channel is fixed at
    /// `config.encode_level`.
    pub fn encode(&self, x: &Patch) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        let (z, _, _) = standardize(x);
        let (_, t) = self.sample_forward(self.input_tensor(&z, self.config.encode_level));
        let f = &t.features;
        let hw = f.hw() as f64;
        let mut v: Vec<f64> = f
            .data
            .chunks(f.hw())
            .map(|c| c.iter().map(|v| v.to_f64().expect("finite")).sum::<f64>() / hw)
            .collect();
        l2_normalize(&mut v);
        Ok(v)
    }
}

impl<T: Real> FeatureMap for ScoreModel<T> {
    fn features(&self, patch: &Patch) -> Vec<f64> {
        self.encode(patch).expect("patch shape matches model")
    }
}
