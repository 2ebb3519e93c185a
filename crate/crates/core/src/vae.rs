//! Convolutional VAE with an image decoder and a mask decoder, trained by
//! explicit backpropagation.
//!
//! ```text
//! x -> [conv3x3/2 + ELU] x3 -> flatten -> dense mu, dense logvar
//! z = mu + exp(logvar / 2) * noise
//! z -> dense + ELU -> reshape -> [upsample x2 + conv3x3 + ELU] x3 -> conv3x3 + sigmoid
//! ```
//!
//! The mask decoder mirrors the image decoder with a single output channel.
//! During training the reconstruction loss sees the prediction composited
//! onto the input through the ground-truth mask; at prediction time the
//! decoded mask takes that role.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{binarize_mask, composite, FaceMask, ImageTensor, DEFAULT_MASK_THRESHOLD};
use crate::losses::{
    bce_loss, composite_loss, dice_loss, kl_diag_gaussian, GaussianPosterior, LossWeights, SsimConfig,
};
use crate::nn::{elu_backward, elu_forward, sigmoid_backward, sigmoid_forward, BufferPool, Conv2d, ConvShape, Dense};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::scalar::Scalar;

/// Image channels consumed and produced by the model.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub enc_channels: [usize; 3],
    /// Channels of the reshaped dense output followed by the three
    /// upsampling blocks.
    pub dec_channels: [usize; 4],
    /// The same for the mask decoder, which only has to draw a silhouette.
    pub mask_channels: [usize; 4],
}

impl ArchConfig {
    pub fn new(resolution: usize, latent_dim: usize) -> Result<Self> {
        let arch = Self { resolution, latent_dim, ..Self::default() };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "resolution must be a positive multiple of 8, got {}",
                self.resolution
            )));
        }
        if self.latent_dim == 0
            || self.enc_channels.contains(&0)
            || self.dec_channels.contains(&0)
            || self.mask_channels.contains(&0)
        {
            return Err(Error::InvalidArgument("latent and channel sizes must be positive".into()));
        }
        Ok(())
    }

    /// Side of the encoder's final feature map.
    pub fn bottleneck(&self) -> usize {
        self.resolution / 8
    }

    pub fn flat_dim(&self) -> usize {
        self.bottleneck() * self.bottleneck() * self.enc_channels[2]
    }

    fn enc_convs(&self) -> [Conv2d; 3] {
        let c = self.enc_channels;
        [Conv2d::new(IMAGE_CHANNELS, c[0], 2), Conv2d::new(c[0], c[1], 2), Conv2d::new(c[1], c[2], 2)]
    }

    fn head_dense(&self) -> Dense {
        Dense::new(self.flat_dim(), self.latent_dim)
    }

    fn head_channels(&self, head: usize) -> [usize; 4] {
        if head == MASK_HEAD {
            self.mask_channels
        } else {
            self.dec_channels
        }
    }

    fn dec_dense(&self, head: usize) -> Dense {
        let b = self.bottleneck();
        Dense::new(self.latent_dim, b * b * self.head_channels(head)[0])
    }

    fn dec_convs(&self, head: usize) -> [Conv2d; 3] {
        let c = self.head_channels(head);
        [Conv2d::upsampling(c[0], c[1]), Conv2d::upsampling(c[1], c[2]), Conv2d::upsampling(c[2], c[3])]
    }

    fn out_conv(&self, head: usize, channels: usize) -> Conv2d {
        Conv2d::new(self.head_channels(head)[3], channels, 1)
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, name: &str, c: Conv2d, fan_in_scale: InitScale| {
            specs.push(ParamSpec::new(format!("{name}.weight"), vec![3, 3, c.cin, c.cout], c.fan_in(), fan_in_scale));
            specs.push(ParamSpec::new(format!("{name}.bias"), vec![c.cout], 0, InitScale::Zero));
        };
        let dense = |specs: &mut Vec<ParamSpec>, name: &str, d: Dense, scale: InitScale| {
            specs.push(ParamSpec::new(format!("{name}.weight"), vec![d.nin, d.nout], d.nin, scale));
            specs.push(ParamSpec::new(format!("{name}.bias"), vec![d.nout], 0, InitScale::Zero));
        };
        for (i, c) in self.enc_convs().into_iter().enumerate() {
            conv(&mut specs, &format!("enc.conv{}", i + 1), c, InitScale::He);
        }
        dense(&mut specs, "enc.mu", self.head_dense(), InitScale::LeCun);
        dense(&mut specs, "enc.logvar", self.head_dense(), InitScale::LeCun);
        for (name, head, out) in [("img", IMG_HEAD, IMAGE_CHANNELS), ("mask", MASK_HEAD, 1)] {
            dense(&mut specs, &format!("{name}.dense"), self.dec_dense(head), InitScale::He);
            for (i, c) in self.dec_convs(head).into_iter().enumerate() {
                conv(&mut specs, &format!("{name}.conv{}", i + 1), c, InitScale::He);
            }
            conv(&mut specs, &format!("{name}.out"), self.out_conv(head, out), InitScale::LeCun);
        }
        specs
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            resolution: 48,
            latent_dim: 32,
            enc_channels: [16, 32, 64],
            dec_channels: [32, 16, 8, 8],
            mask_channels: [16, 8, 4, 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScale {
    Zero,
    /// Uniform with variance `2 / fan_in`, for layers followed by ELU.
    He,
    /// Uniform with variance `1 / fan_in`, for linear heads.
    LeCun,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub init: InitScale,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, fan_in: usize, init: InitScale) -> Self {
        Self { name, shape, fan_in, init }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Tensor indices in `ArchConfig::param_specs` order.
const ENC_CONV: usize = 0;
const ENC_MU: usize = 6;
const ENC_LOGVAR: usize = 8;
const IMG_HEAD: usize = 10;
const MASK_HEAD: usize = 20;

/// All named weight tensors of encoder, image decoder and mask decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams<T> {
    arch: ArchConfig,
    specs: Vec<ParamSpec>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> VaeParams<T> {
    /// Deterministic initialization: fan-in-scaled uniform kernels, zero biases.
    /// Values are drawn in 64-bit so both precisions start from the same point.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|s| {
                let var = match s.init {
                    InitScale::Zero => return vec![T::zero(); s.len()],
                    InitScale::He => 2.0 / s.fan_in as f64,
                    InitScale::LeCun => 1.0 / s.fan_in as f64,
                };
                let limit = libm::sqrt(3.0 * var);
                (0..s.len()).map(|_| T::lit(rng.gen_range(-limit..limit))).collect()
            })
            .collect();
        Ok(Self { arch, specs, values })
    }

    /// Rebuilds parameters from stored tensors, validating every shape.
    pub fn from_tensors(arch: ArchConfig, tensors: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if tensors.len() != specs.len() {
            return Err(Error::shape("VaeParams tensor count", specs.len(), tensors.len()));
        }
        let mut values = Vec::with_capacity(specs.len());
        for (spec, (name, shape, data)) in specs.iter().zip(tensors) {
            if spec.name != name || spec.shape != shape || data.len() != spec.len() {
                return Err(Error::shape("VaeParams tensor", (&spec.name, &spec.shape), (name, shape)));
            }
            values.push(data);
        }
        Ok(Self { arch, specs, values })
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.values.iter().map(|v| vec![T::zero(); v.len()]).collect()
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Vec<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> VaeParams<U> {
        VaeParams {
            arch: self.arch,
            specs: self.specs.clone(),
            values: self.values.iter().map(|v| crate::scalar::convert(v)).collect(),
        }
    }
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HypothesisConfig {
    pub id: u8,
    pub use_mask: bool,
    pub use_ssim: bool,
    pub use_l1: bool,
    pub use_l2: bool,
}

impl HypothesisConfig {
    const fn row(id: u8, use_mask: bool, use_ssim: bool, use_l1: bool, use_l2: bool) -> Self {
        Self { id, use_mask, use_ssim, use_l1, use_l2 }
    }

    /// The ten hypotheses: every loss set with and without face masks.
    pub const ALL: [HypothesisConfig; 10] = [
        Self::row(1, true, true, true, false),
        Self::row(2, false, true, true, false),
        Self::row(3, true, false, true, false),
        Self::row(4, false, false, true, false),
        Self::row(5, true, true, false, false),
        Self::row(6, false, true, false, false),
        Self::row(7, true, false, false, true),
        Self::row(8, false, false, false, true),
        Self::row(9, true, true, false, true),
        Self::row(10, false, true, false, true),
    ];

    pub fn by_id(id: u8) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|h| h.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown hypothesis H{id}")))
    }

    /// Parses `H1`..`H10` (case-insensitive).
    pub fn parse(name: &str) -> Result<Self> {
        let digits = name.strip_prefix('H').or_else(|| name.strip_prefix('h'));
        match digits.and_then(|d| d.parse::<u8>().ok()) {
            Some(id) => Self::by_id(id),
            None => Err(Error::InvalidArgument(format!("unknown hypothesis '{name}'"))),
        }
    }

    pub fn name(&self) -> String {
        format!("H{}", self.id)
    }

    /// The hypothesis with the same losses and the opposite mask flag.
    pub fn counterpart(&self) -> Self {
        let id = if self.id % 2 == 1 { self.id + 1 } else { self.id - 1 };
        Self::ALL[id as usize - 1]
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::unit(self.use_ssim, self.use_l1, self.use_l2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub kl_weight: f64,
    pub hypothesis: u8,
    pub seed: u64,
    pub resolution: usize,
    pub latent_dim: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 200,
            batch_size: 32,
            learning_rate: 1e-4,
            clip_norm: 1e-3,
            kl_weight: 1e-3,
            hypothesis: 9,
            seed: 0,
            resolution: 48,
            latent_dim: 32,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 50 epochs of 4000 steps.
    pub fn full_schedule() -> Self {
        Self { epochs: 50, steps_per_epoch: 4000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.epochs, self.steps_per_epoch, self.batch_size, self.resolution, self.latent_dim];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("epochs, steps, batch, resolution and latent must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.clip_norm > 0.0 && self.kl_weight >= 0.0) {
            return Err(Error::InvalidArgument("learning rate, clip norm and KL weight must be non-negative".into()));
        }
        HypothesisConfig::by_id(self.hypothesis)?;
        self.arch()?;
        Ok(())
    }

    pub fn hypothesis(&self) -> Result<HypothesisConfig> {
        HypothesisConfig::by_id(self.hypothesis)
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        ArchConfig::new(self.resolution, self.latent_dim)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

/// A latent draw together with the posterior and noise it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample<T> {
    pub posterior: GaussianPosterior<T>,
    pub noise: Vec<T>,
    pub z: Vec<T>,
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize<T: Scalar>(posterior: &GaussianPosterior<T>, noise: &[T]) -> Result<LatentSample<T>> {
    if noise.len() != posterior.dim() {
        return Err(Error::shape("reparameterize", posterior.dim(), noise.len()));
    }
    let half = T::lit(0.5);
    let z = posterior
        .mu
        .iter()
        .zip(&posterior.logvar)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect();
    Ok(LatentSample { posterior: posterior.clone(), noise: noise.to_vec(), z })
}

/// Draws standard-normal noise in 64-bit and converts it.
pub fn standard_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

struct EncoderPass<T> {
    input: Vec<T>,
    shapes: Vec<ConvShape>,
    acts: Vec<Vec<T>>,
    mu: Vec<T>,
    logvar: Vec<T>,
}

impl<T: Scalar> EncoderPass<T> {
    fn recycle(self, pool: &mut BufferPool<T>) {
        pool.put(self.input);
        pool.put_all(self.acts);
    }
}

struct DecoderPass<T> {
    hidden: Vec<T>,
    shapes: Vec<ConvShape>,
    acts: Vec<Vec<T>>,
    out_shape: ConvShape,
    out: Vec<T>,
}

impl<T: Scalar> DecoderPass<T> {
    fn recycle(self, pool: &mut BufferPool<T>) {
        pool.put_all(self.acts);
        pool.put(self.out);
    }
}

fn img_len(arch: &ArchConfig) -> usize {
    arch.resolution * arch.resolution * IMAGE_CHANNELS
}

fn param<T>(p: &VaeParams<T>, i: usize) -> &[T] {
    &p.values[i]
}

fn check_images<T: Scalar>(arch: &ArchConfig, images: &[ImageTensor<T>], context: &'static str) -> Result<()> {
    if images.is_empty() {
        return Err(Error::EmptyInput(context));
    }
    let want = (arch.resolution, arch.resolution, IMAGE_CHANNELS);
    for img in images {
        if img.shape() != want {
            return Err(Error::shape(context, want, img.shape()));
        }
    }
    Ok(())
}

fn flatten<T: Scalar>(images: &[ImageTensor<T>]) -> Vec<T> {
    images.iter().flat_map(|i| i.data().iter().copied()).collect()
}

fn encoder_forward<T: Scalar>(
    params: &VaeParams<T>,
    x: Vec<T>,
    batch: usize,
    pool: &mut BufferPool<T>,
) -> EncoderPass<T> {
    let arch = params.arch;
    let mut shapes = Vec::with_capacity(3);
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(3);
    let mut side = arch.resolution;
    for (i, conv) in arch.enc_convs().into_iter().enumerate() {
        let input = if i == 0 { &x } else { &acts[i - 1] };
        let shape = conv.shape(batch, side, side);
        let mut y = conv.forward_pooled(
            input,
            &shape,
            param(params, ENC_CONV + 2 * i),
            param(params, ENC_CONV + 2 * i + 1),
            pool,
        );
        elu_forward(&mut y);
        side = shape.out_h;
        shapes.push(shape);
        acts.push(y);
    }
    let head = arch.head_dense();
    let flat = &acts[2];
    let mu = head.forward(flat, batch, param(params, ENC_MU), param(params, ENC_MU + 1));
    let logvar = head.forward(flat, batch, param(params, ENC_LOGVAR), param(params, ENC_LOGVAR + 1));
    EncoderPass { input: x, shapes, acts, mu, logvar }
}

fn decoder_forward<T: Scalar>(
    params: &VaeParams<T>,
    head: usize,
    out_channels: usize,
    z: &[T],
    batch: usize,
    pool: &mut BufferPool<T>,
) -> DecoderPass<T> {
    let arch = params.arch;
    let mut hidden = arch.dec_dense(head).forward(z, batch, param(params, head), param(params, head + 1));
    elu_forward(&mut hidden);
    let mut side = arch.bottleneck();
    let mut shapes = Vec::with_capacity(3);
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(3);
    for (i, conv) in arch.dec_convs(head).into_iter().enumerate() {
        let input = if i == 0 { &hidden } else { &acts[i - 1] };
        let shape = conv.shape(batch, side, side);
        let mut y =
            conv.forward_pooled(input, &shape, param(params, head + 2 + 2 * i), param(params, head + 3 + 2 * i), pool);
        elu_forward(&mut y);
        side = shape.out_h;
        shapes.push(shape);
        acts.push(y);
    }
    let out_conv = arch.out_conv(head, out_channels);
    let out_shape = out_conv.shape(batch, side, side);
    let mut out = out_conv.forward_pooled(&acts[2], &out_shape, param(params, head + 8), param(params, head + 9), pool);
    sigmoid_forward(&mut out);
    DecoderPass { hidden, shapes, acts, out_shape, out }
}

/// Backpropagates `d_out` (gradient w.r.t. the sigmoid outputs) through a
/// decoder head, accumulating parameter gradients, and returns `dL/dz`.
#[allow(clippy::too_many_arguments)]
fn decoder_backward<T: Scalar>(
    params: &VaeParams<T>,
    grads: &mut [Vec<T>],
    head: usize,
    out_channels: usize,
    pass: &DecoderPass<T>,
    z: &[T],
    mut d_out: Vec<T>,
    batch: usize,
    pool: &mut BufferPool<T>,
) -> Vec<T> {
    let arch = params.arch;
    sigmoid_backward(&mut d_out, &pass.out);
    let (gw, rest) = grads[head + 8..].split_at_mut(1);
    let mut d = arch
        .out_conv(head, out_channels)
        .backward_pooled(
            &d_out,
            &pass.acts[2],
            &pass.out_shape,
            param(params, head + 8),
            &mut gw[0],
            &mut rest[0],
            true,
            pool,
        )
        .expect("input gradient requested");
    pool.put(d_out);
    for (i, conv) in arch.dec_convs(head).into_iter().enumerate().rev() {
        elu_backward(&mut d, &pass.acts[i]);
        let (gw, rest) = grads[head + 2 + 2 * i..].split_at_mut(1);
        let input = if i == 0 { &pass.hidden } else { &pass.acts[i - 1] };
        let next = conv
            .backward_pooled(
                &d,
                input,
                &pass.shapes[i],
                param(params, head + 2 + 2 * i),
                &mut gw[0],
                &mut rest[0],
                true,
                pool,
            )
            .expect("input gradient requested");
        pool.put(core::mem::replace(&mut d, next));
    }
    elu_backward(&mut d, &pass.hidden);
    let (gw, rest) = grads[head..].split_at_mut(1);
    arch.dec_dense(head)
        .backward(&d, z, batch, param(params, head), &mut gw[0], &mut rest[0], true)
        .expect("input gradient requested")
}

fn encoder_backward<T: Scalar>(
    params: &VaeParams<T>,
    grads: &mut [Vec<T>],
    pass: &EncoderPass<T>,
    d_mu: &[T],
    d_logvar: &[T],
    batch: usize,
    pool: &mut BufferPool<T>,
) {
    let arch = params.arch;
    let head = arch.head_dense();
    let flat = &pass.acts[2];
    let (gw, rest) = grads[ENC_MU..].split_at_mut(1);
    let mut d = head.backward(d_mu, flat, batch, param(params, ENC_MU), &mut gw[0], &mut rest[0], true).unwrap();
    let (gw, rest) = grads[ENC_LOGVAR..].split_at_mut(1);
    let d_lv = head.backward(d_logvar, flat, batch, param(params, ENC_LOGVAR), &mut gw[0], &mut rest[0], true).unwrap();
    for (a, b) in d.iter_mut().zip(&d_lv) {
        *a += *b;
    }
    for (i, conv) in arch.enc_convs().into_iter().enumerate().rev() {
        elu_backward(&mut d, &pass.acts[i]);
        let (gw, rest) = grads[ENC_CONV + 2 * i..].split_at_mut(1);
        let input = if i == 0 { &pass.input } else { &pass.acts[i - 1] };
        let w = param(params, ENC_CONV + 2 * i);
        let next = conv.backward_pooled(&d, input, &pass.shapes[i], w, &mut gw[0], &mut rest[0], i > 0, pool);
        match next {
            Some(n) => pool.put(core::mem::replace(&mut d, n)),
            None => break,
        }
    }
}

/// Posterior parameters for every image of the batch.
pub fn encode<T: Scalar>(params: &VaeParams<T>, images: &[ImageTensor<T>]) -> Result<Vec<GaussianPosterior<T>>> {
    check_images(&params.arch, images, "encode")?;
    let pass = encoder_forward(params, flatten(images), images.len(), &mut BufferPool::new());
    let l = params.arch.latent_dim;
    (0..images.len())
        .map(|i| GaussianPosterior::new(pass.mu[i * l..(i + 1) * l].to_vec(), pass.logvar[i * l..(i + 1) * l].to_vec()))
        .collect()
}

fn decode_head<T: Scalar>(
    params: &VaeParams<T>,
    z: &[Vec<T>],
    head: usize,
    channels: usize,
) -> Result<Vec<ImageTensor<T>>> {
    let arch = params.arch;
    if z.is_empty() {
        return Err(Error::EmptyInput("decode"));
    }
    if let Some(bad) = z.iter().find(|v| v.len() != arch.latent_dim) {
        return Err(Error::shape("decode", arch.latent_dim, bad.len()));
    }
    let flat: Vec<T> = z.iter().flatten().copied().collect();
    let pass = decoder_forward(params, head, channels, &flat, z.len(), &mut BufferPool::new());
    let r = arch.resolution;
    Ok(pass.out.chunks_exact(r * r * channels).map(|c| ImageTensor::raw(r, r, channels, c.to_vec())).collect())
}

/// Decoded images in (0, 1), one per latent vector.
pub fn decode_image<T: Scalar>(params: &VaeParams<T>, z: &[Vec<T>]) -> Result<Vec<ImageTensor<T>>> {
    decode_head(params, z, IMG_HEAD, IMAGE_CHANNELS)
}

/// Decoded soft masks in (0, 1), one per latent vector.
pub fn decode_mask<T: Scalar>(params: &VaeParams<T>, z: &[Vec<T>]) -> Result<Vec<ImageTensor<T>>> {
    decode_head(params, z, MASK_HEAD, 1)
}

/// Per-term losses of one step. `kl` is the raw divergence; `kl_term` is
/// its weighted contribution to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub bce: f64,
    pub dice: f64,
    pub kl: f64,
    pub kl_term: f64,
}

impl LossBreakdown {
    pub fn terms_sum(&self) -> f64 {
        self.recon + self.bce + self.dice + self.kl_term
    }
}

/// Everything a loss evaluation needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub hypothesis: HypothesisConfig,
    pub kl_weight: f64,
    pub ssim: SsimConfig,
}

impl Objective {
    pub fn new(hypothesis: HypothesisConfig, kl_weight: f64) -> Self {
        Self { hypothesis, kl_weight, ssim: SsimConfig::default() }
    }
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, value: v })
    }
}

/// Batch-mean objective and its gradient with respect to every parameter,
/// for fixed reparameterization noise (`batch x latent_dim`, row-major).
///
/// Masks are required when the hypothesis uses them; the reconstruction loss
/// then sees the prediction composited onto the input, and the mask decoder
/// is trained with BCE + Dice.
pub fn loss_and_grad<T: Scalar>(
    params: &VaeParams<T>,
    images: &[ImageTensor<T>],
    masks: Option<&[FaceMask<T>]>,
    noise: &[T],
    objective: &Objective,
) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
    loss_and_grad_pooled(params, images, masks, noise, objective, &mut BufferPool::new())
}

/// [`loss_and_grad`] drawing its work buffers from `pool`. The gradient
/// tensors come from the pool too and can be handed back after use.
pub fn loss_and_grad_pooled<T: Scalar>(
    params: &VaeParams<T>,
    images: &[ImageTensor<T>],
    masks: Option<&[FaceMask<T>]>,
    noise: &[T],
    objective: &Objective,
    pool: &mut BufferPool<T>,
) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
    let arch = params.arch;
    check_images(&arch, images, "loss_and_grad")?;
    let batch = images.len();
    let l = arch.latent_dim;
    if noise.len() != batch * l {
        return Err(Error::shape("loss_and_grad noise", batch * l, noise.len()));
    }
    let hyp = objective.hypothesis;
    let masks = if hyp.use_mask {
        let m = masks.ok_or_else(|| Error::InvalidArgument(format!("{} needs face masks", hyp.name())))?;
        if m.len() != batch {
            return Err(Error::shape("loss_and_grad masks", batch, m.len()));
        }
        Some(m)
    } else {
        None
    };

    let mut input = pool.take(batch * img_len(&arch));
    for (dst, img) in input.chunks_exact_mut(img_len(&arch)).zip(images) {
        dst.copy_from_slice(img.data());
    }
    let enc = encoder_forward(params, input, batch, pool);
    let half = T::lit(0.5);
    let z: Vec<T> = (0..batch * l).map(|i| enc.mu[i] + (half * enc.logvar[i]).exp() * noise[i]).collect();

    let inv_b = T::lit(1.0 / batch as f64);
    let r = arch.resolution;
    let px = r * r * IMAGE_CHANNELS;
    let weights = hyp.loss_weights();
    let mut breakdown = LossBreakdown::default();
    let mut grads: Vec<Vec<T>> = params.values.iter().map(|v| pool.take(v.len())).collect();

    let img_pass = decoder_forward(params, IMG_HEAD, IMAGE_CHANNELS, &z, batch, pool);
    let mut d_img = pool.take(img_pass.out.len());
    for (i, target) in images.iter().enumerate() {
        let pred = ImageTensor::raw(r, r, IMAGE_CHANNELS, img_pass.out[i * px..(i + 1) * px].to_vec());
        let mask = masks.map(|m| &m[i]);
        let lv = composite_loss(&pred, target, mask, &weights, &objective.ssim)?;
        breakdown.recon += lv.value.as_f64();
        for (d, g) in d_img[i * px..(i + 1) * px].iter_mut().zip(&lv.gradient) {
            *d = *g * inv_b;
        }
    }
    breakdown.recon = finite("reconstruction", breakdown.recon / batch as f64)?;
    let mut d_z = decoder_backward(params, &mut grads, IMG_HEAD, IMAGE_CHANNELS, &img_pass, &z, d_img, batch, pool);
    img_pass.recycle(pool);

    if let Some(masks) = masks {
        let mask_pass = decoder_forward(params, MASK_HEAD, 1, &z, batch, pool);
        let mpx = r * r;
        let mut d_mask = pool.take(mask_pass.out.len());
        for (i, target) in masks.iter().enumerate() {
            let pred = ImageTensor::raw(r, r, 1, mask_pass.out[i * mpx..(i + 1) * mpx].to_vec());
            let bce = bce_loss(&pred, target)?;
            let dice = dice_loss(&pred, target)?;
            breakdown.bce += bce.value.as_f64();
            breakdown.dice += dice.value.as_f64();
            for ((d, a), b) in d_mask[i * mpx..(i + 1) * mpx].iter_mut().zip(&bce.gradient).zip(&dice.gradient) {
                *d = (*a + *b) * inv_b;
            }
        }
        breakdown.bce = finite("bce", breakdown.bce / batch as f64)?;
        breakdown.dice = finite("dice", breakdown.dice / batch as f64)?;
        let d_zm = decoder_backward(params, &mut grads, MASK_HEAD, 1, &mask_pass, &z, d_mask, batch, pool);
        mask_pass.recycle(pool);
        for (a, b) in d_z.iter_mut().zip(&d_zm) {
            *a += *b;
        }
    }

    let kl_w = T::lit(objective.kl_weight) * inv_b;
    let mut d_mu = vec![T::zero(); batch * l];
    let mut d_lv = vec![T::zero(); batch * l];
    for i in 0..batch {
        let rows = i * l..(i + 1) * l;
        let post = GaussianPosterior::new(enc.mu[rows.clone()].to_vec(), enc.logvar[rows.clone()].to_vec())
            .map_err(|_| Error::NonFinite { term: "kl", value: f64::NAN })?;
        let kl = kl_diag_gaussian(&post);
        breakdown.kl += kl.value.as_f64();
        for (j, k) in rows.enumerate() {
            let sigma_half = half * (half * enc.logvar[k]).exp();
            d_mu[k] = d_z[k] + kl_w * kl.grad_mu[j];
            d_lv[k] = d_z[k] * sigma_half * noise[k] + kl_w * kl.grad_logvar[j];
        }
    }
    breakdown.kl = finite("kl", breakdown.kl / batch as f64)?;
    breakdown.kl_term = objective.kl_weight * breakdown.kl;
    breakdown.total = finite("total", breakdown.terms_sum())?;

    encoder_backward(params, &mut grads, &enc, &d_mu, &d_lv, batch, pool);
    enc.recycle(pool);
    Ok((breakdown, grads))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One full update: forward, backward, global-norm clipping and Adam.
#[allow(clippy::too_many_arguments)]
pub fn training_step<T: Scalar>(
    params: &mut VaeParams<T>,
    optimizer: &mut Adam<T>,
    images: &[ImageTensor<T>],
    masks: Option<&[FaceMask<T>]>,
    noise: &[T],
    objective: &Objective,
    clip_norm: f64,
    pool: &mut BufferPool<T>,
) -> Result<StepReport> {
    let (losses, mut grads) = loss_and_grad_pooled(params, images, masks, noise, objective, pool)?;
    let grad_norm = finite("gradient norm", clip_global_norm(&mut grads, clip_norm))?;
    optimizer.update(&mut params.values, &grads);
    pool.put_all(grads);
    if !params.all_finite() {
        return Err(Error::NonFinite { term: "parameter update", value: f64::NAN });
    }
    Ok(StepReport { losses, grad_norm })
}

/// Deterministic training driver: owns the parameters, the optimizer and the
/// two random streams (batch shuffling and reparameterization noise), all
/// derived from the configured seed. Data access stays with the caller.
pub struct Trainer<T> {
    pub params: VaeParams<T>,
    pub optimizer: Adam<T>,
    config: TrainConfig,
    objective: Objective,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    pool: BufferPool<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        if train_len == 0 {
            return Err(Error::EmptyInput("training split"));
        }
        let params = VaeParams::init(config.arch()?, config.seed)?;
        let optimizer = Adam::new(config.adam(), params.values.iter().map(Vec::len));
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(2);
        let objective = Objective::new(config.hypothesis()?, config.kl_weight);
        Ok(Self {
            params,
            optimizer,
            config,
            objective,
            shuffle_rng,
            noise_rng,
            order: (0..train_len).collect(),
            cursor: train_len,
            step: 0,
            pool: BufferPool::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Indices of the next batch; the order is reshuffled every pass over
    /// the training split.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.shuffle_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn step(&mut self, images: &[ImageTensor<T>], masks: Option<&[FaceMask<T>]>) -> Result<StepReport> {
        let noise = standard_normal(&mut self.noise_rng, images.len() * self.config.latent_dim);
        let report = training_step(
            &mut self.params,
            &mut self.optimizer,
            images,
            masks,
            &noise,
            &self.objective,
            self.config.clip_norm,
            &mut self.pool,
        )?;
        self.step += 1;
        Ok(report)
    }
}

/// Output of [`reconstruct`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction<T> {
    pub raw: ImageTensor<T>,
    pub soft_mask: Option<ImageTensor<T>>,
    pub composited: ImageTensor<T>,
}

/// Deterministic reconstruction through the posterior mean. With a mask
/// decoder the raw prediction is composited onto the input through the
/// binarized predicted mask; otherwise the raw prediction is returned.
pub fn reconstruct<T: Scalar>(params: &VaeParams<T>, x: &ImageTensor<T>, use_mask: bool) -> Result<Reconstruction<T>> {
    let post = encode(params, core::slice::from_ref(x))?.remove(0);
    let z = [post.mu];
    let raw = decode_image(params, &z)?.remove(0);
    if !use_mask {
        return Ok(Reconstruction { composited: raw.clone(), raw, soft_mask: None });
    }
    let soft = decode_mask(params, &z)?.remove(0);
    composite_with_soft_mask(raw, soft, x)
}

/// Composites `raw` onto `x` through `soft` thresholded at the default mask
/// threshold.
pub fn composite_with_soft_mask<T: Scalar>(
    raw: ImageTensor<T>,
    soft: ImageTensor<T>,
    x: &ImageTensor<T>,
) -> Result<Reconstruction<T>> {
    let mask = binarize_mask(&soft, T::lit(DEFAULT_MASK_THRESHOLD))?;
    let composited = composite(&raw, x, &mask)?;
    Ok(Reconstruction { raw, soft_mask: Some(soft), composited })
}
