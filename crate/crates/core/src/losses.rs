//! Differentiable losses. Every function returns the loss value together with
//! its analytic gradient with respect to the prediction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::filter::{filter_valid, filter_valid_adjoint, gaussian_taps};
use crate::image::{composite, mask_gradient, FaceMask, ImageTensor};
use crate::scalar::Scalar;

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;
/// Additive smoothing of the Dice coefficient.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    /// Same layout and length as the prediction.
    pub gradient: Vec<T>,
}

impl<T: Scalar> LossValue<T> {
    fn zero(len: usize) -> Self {
        Self { value: T::zero(), gradient: vec![T::zero(); len] }
    }

    fn accumulate(&mut self, other: &LossValue<T>, weight: T) {
        self.value += weight * other.value;
        for (g, &o) in self.gradient.iter_mut().zip(&other.gradient) {
            *g += weight * o;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window_size: 11, window_sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(alloc::format!(
                "SSIM window must be odd and at least 3, got {}",
                self.window_size
            )));
        }
        if !(self.window_sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::InvalidArgument("SSIM sigma, k1, k2 and range must be positive".into()));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        let v = self.k1 * self.dynamic_range;
        v * v
    }

    pub fn c2(&self) -> f64 {
        let v = self.k2 * self.dynamic_range;
        v * v
    }

    pub(crate) fn taps<T: Scalar>(&self) -> Result<Vec<T>> {
        self.validate()?;
        Ok(gaussian_taps(self.window_size, self.window_sigma)?.into_iter().map(T::lit).collect())
    }
}

/// Diagonal Gaussian approximate posterior `N(mu, exp(logvar))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn new(mu: Vec<T>, logvar: Vec<T>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::shape("GaussianPosterior", mu.len(), logvar.len()));
        }
        if logvar.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("posterior log-variance must be finite".into()));
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// KL divergence value with its gradients for both posterior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KlValue<T> {
    pub value: T,
    pub grad_mu: Vec<T>,
    pub grad_logvar: Vec<T>,
}

pub fn l1_loss<T: Scalar>(pred: &ImageTensor<T>, target: &ImageTensor<T>) -> Result<LossValue<T>> {
    pred.same_shape(target, "l1_loss")?;
    let inv_n = T::one() / T::lit(pred.len() as f64);
    let mut value = T::zero();
    let gradient = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            value += d.abs();
            if d > T::zero() {
                inv_n
            } else if d < T::zero() {
                -inv_n
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(LossValue { value: value * inv_n, gradient })
}

pub fn l2_loss<T: Scalar>(pred: &ImageTensor<T>, target: &ImageTensor<T>) -> Result<LossValue<T>> {
    pred.same_shape(target, "l2_loss")?;
    let inv_n = T::one() / T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let mut value = T::zero();
    let gradient = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            value += d * d;
            two * d * inv_n
        })
        .collect();
    Ok(LossValue { value: value * inv_n, gradient })
}

/// Gaussian-weighted local statistics of one channel pair.
struct LocalStats<T> {
    mu_a: Vec<T>,
    mu_b: Vec<T>,
    var_a: Vec<T>,
    var_b: Vec<T>,
    cov: Vec<T>,
    height: usize,
    width: usize,
}

fn local_stats<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, taps: &[T]) -> LocalStats<T> {
    let k = taps.len();
    let aa: Vec<T> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<T> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let mut var_a = filter_valid(&aa, h, w, taps);
    let mut var_b = filter_valid(&bb, h, w, taps);
    let mut cov = filter_valid(&ab, h, w, taps);
    for i in 0..mu_a.len() {
        var_a[i] -= mu_a[i] * mu_a[i];
        var_b[i] -= mu_b[i] * mu_b[i];
        cov[i] -= mu_a[i] * mu_b[i];
    }
    LocalStats { mu_a, mu_b, var_a, var_b, cov, height: h - k + 1, width: w - k + 1 }
}

fn split_channels<T: Scalar>(img: &ImageTensor<T>) -> Vec<Vec<T>> {
    (0..img.channels()).map(|c| img.channel(c).into_data()).collect()
}

fn check_ssim_inputs<T: Scalar>(
    a: &ImageTensor<T>,
    b: &ImageTensor<T>,
    cfg: &SsimConfig,
    context: &'static str,
) -> Result<()> {
    a.same_shape(b, context)?;
    cfg.validate()?;
    let side = a.height().min(a.width());
    if side < cfg.window_size {
        return Err(Error::ImageTooSmall { context, min: cfg.window_size, found: side });
    }
    Ok(())
}

/// Per-pixel SSIM over the valid extent, channels computed independently.
/// The result has shape `(h - k + 1, w - k + 1, channels)`.
pub fn ssim_map<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>, cfg: &SsimConfig) -> Result<ImageTensor<T>> {
    check_ssim_inputs(a, b, cfg, "ssim_map")?;
    let taps = cfg.taps::<T>()?;
    let (c1, c2) = (T::lit(cfg.c1()), T::lit(cfg.c2()));
    let two = T::lit(2.0);
    let (h, w, ch) = a.shape();
    let (pa, pb) = (split_channels(a), split_channels(b));
    let k = cfg.window_size;
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut out = vec![T::zero(); ho * wo * ch];
    for c in 0..ch {
        let s = local_stats(&pa[c], &pb[c], h, w, &taps);
        for i in 0..ho * wo {
            let num = (two * s.mu_a[i] * s.mu_b[i] + c1) * (two * s.cov[i] + c2);
            let den = (s.mu_a[i] * s.mu_a[i] + s.mu_b[i] * s.mu_b[i] + c1) * (s.var_a[i] + s.var_b[i] + c2);
            out[i * ch + c] = num / den;
        }
    }
    Ok(ImageTensor::raw(ho, wo, ch, out))
}

/// `1 - mean(ssim_map(pred, target))` with the gradient with respect to `pred`.
pub fn ssim_loss<T: Scalar>(pred: &ImageTensor<T>, target: &ImageTensor<T>, cfg: &SsimConfig) -> Result<LossValue<T>> {
    check_ssim_inputs(pred, target, cfg, "ssim_loss")?;
    let taps = cfg.taps::<T>()?;
    let (c1, c2) = (T::lit(cfg.c1()), T::lit(cfg.c2()));
    let two = T::lit(2.0);
    let (h, w, ch) = pred.shape();
    let (pa, pb) = (split_channels(pred), split_channels(target));
    let k = cfg.window_size;
    let count = (h - k + 1) * (w - k + 1) * ch;
    let upstream = -T::one() / T::lit(count as f64);

    let mut ssim_sum = T::zero();
    let mut gradient = vec![T::zero(); pred.len()];
    for c in 0..ch {
        let s = local_stats(&pa[c], &pb[c], h, w, &taps);
        let n = s.height * s.width;
        // Sensitivities of the loss to the three filtered inputs W*a, W*(a^2)
        // and W*(a b) at every window position.
        let mut d_mean = vec![T::zero(); n];
        let mut d_sq = vec![T::zero(); n];
        let mut d_cross = vec![T::zero(); n];
        for i in 0..n {
            let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
            let a1 = two * ma * mb + c1;
            let a2 = two * s.cov[i] + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = s.var_a[i] + s.var_b[i] + c2;
            let ssim = a1 * a2 / (b1 * b2);
            ssim_sum += ssim;
            let ds_dmu = two * mb * a2 / (b1 * b2) - two * ma * ssim / b1;
            let ds_dvar = -ssim / b2;
            let ds_dcov = two * a1 / (b1 * b2);
            d_mean[i] = upstream * (ds_dmu - two * ma * ds_dvar - mb * ds_dcov);
            d_sq[i] = upstream * ds_dvar;
            d_cross[i] = upstream * ds_dcov;
        }
        let g_mean = filter_valid_adjoint(&d_mean, s.height, s.width, &taps);
        let g_sq = filter_valid_adjoint(&d_sq, s.height, s.width, &taps);
        let g_cross = filter_valid_adjoint(&d_cross, s.height, s.width, &taps);
        for p in 0..h * w {
            gradient[p * ch + c] = g_mean[p] + two * pa[c][p] * g_sq[p] + pb[c][p] * g_cross[p];
        }
    }
    let mean = ssim_sum / T::lit(count as f64);
    Ok(LossValue { value: T::one() - mean, gradient })
}

fn check_mask_inputs<T: Scalar>(pred: &ImageTensor<T>, target: &FaceMask<T>, context: &'static str) -> Result<()> {
    if pred.channels() != 1 {
        return Err(Error::InvalidArgument(alloc::format!(
            "{context}: predicted mask must be single-channel, got {} channels",
            pred.channels()
        )));
    }
    pred.same_shape(target.tensor(), context)
}

/// Mean binary cross-entropy with probabilities clamped into `[eps, 1 - eps]`.
/// Clamped entries receive zero gradient, consistent with the clamped forward.
pub fn bce_loss<T: Scalar>(pred_probs: &ImageTensor<T>, target: &FaceMask<T>) -> Result<LossValue<T>> {
    check_mask_inputs(pred_probs, target, "bce_loss")?;
    let eps = T::lit(BCE_EPSILON);
    let hi = T::one() - eps;
    let inv_n = T::one() / T::lit(pred_probs.len() as f64);
    let mut value = T::zero();
    let gradient = pred_probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let pc = p.max(eps).min(hi);
            value -= t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
            if p < eps || p > hi {
                T::zero()
            } else {
                (-t / pc + (T::one() - t) / (T::one() - pc)) * inv_n
            }
        })
        .collect();
    Ok(LossValue { value: value * inv_n, gradient })
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`.
pub fn dice_loss<T: Scalar>(pred_probs: &ImageTensor<T>, target: &FaceMask<T>) -> Result<LossValue<T>> {
    check_mask_inputs(pred_probs, target, "dice_loss")?;
    let s = T::lit(DICE_SMOOTHING);
    let two = T::lit(2.0);
    let (mut inter, mut sum_p, mut sum_t) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in pred_probs.data().iter().zip(target.data()) {
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = two * inter + s;
    let den = sum_p + sum_t + s;
    let den2 = den * den;
    let gradient = target.data().iter().map(|&t| -(two * t * den - num) / den2).collect();
    Ok(LossValue { value: T::one() - num / den, gradient })
}

/// Closed-form KL divergence between the posterior and the standard normal.
pub fn kl_diag_gaussian<T: Scalar>(post: &GaussianPosterior<T>) -> KlValue<T> {
    let half = T::lit(0.5);
    let mut value = T::zero();
    let mut grad_logvar = Vec::with_capacity(post.dim());
    for (&m, &lv) in post.mu.iter().zip(&post.logvar) {
        let e = lv.exp();
        value += e + m * m - T::one() - lv;
        grad_logvar.push(half * (e - T::one()));
    }
    KlValue { value: half * value, grad_mu: post.mu.clone(), grad_logvar }
}

/// Which reconstruction losses are active and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ssim: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
}

impl LossWeights {
    pub fn unit(ssim: bool, l1: bool, l2: bool) -> Self {
        let on = |f: bool| if f { Some(1.0) } else { None };
        Self { ssim: on(ssim), l1: on(l1), l2: on(l2) }
    }

    pub fn any(&self) -> bool {
        self.ssim.is_some() || self.l1.is_some() || self.l2.is_some()
    }
}

/// Reconstruction loss of the masked-training scheme: when a mask is given,
/// the losses are evaluated on `composite(pred, reference, mask)` against
/// `reference`, so background pixels of `pred` never influence the value or
/// the gradient. The denominator of every mean stays the full pixel count.
pub fn composite_loss<T: Scalar>(
    pred: &ImageTensor<T>,
    reference: &ImageTensor<T>,
    mask: Option<&FaceMask<T>>,
    weights: &LossWeights,
    ssim_cfg: &SsimConfig,
) -> Result<LossValue<T>> {
    if !weights.any() {
        return Err(Error::InvalidArgument("composite_loss needs at least one enabled loss".into()));
    }
    pred.same_shape(reference, "composite_loss")?;
    let composed;
    let input = match mask {
        Some(m) => {
            composed = composite(pred, reference, m)?;
            &composed
        }
        None => pred,
    };
    let mut total = LossValue::zero(pred.len());
    if let Some(w) = weights.ssim {
        total.accumulate(&ssim_loss(input, reference, ssim_cfg)?, T::lit(w));
    }
    if let Some(w) = weights.l1 {
        total.accumulate(&l1_loss(input, reference)?, T::lit(w));
    }
    if let Some(w) = weights.l2 {
        total.accumulate(&l2_loss(input, reference)?, T::lit(w));
    }
    if let Some(m) = mask {
        mask_gradient(&mut total.gradient, m, pred.channels());
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.gen_range(0.05..0.95))
    }

    fn offset(img: &ImageTensor<f64>, d: f64) -> ImageTensor<f64> {
        let data = img.data().iter().map(|v| v + d).collect();
        ImageTensor::new(img.height(), img.width(), img.channels(), data).unwrap()
    }

    #[allow(clippy::needless_range_loop)]
    fn assert_fd<F: Fn(&ImageTensor<f64>) -> LossValue<f64>>(x: &ImageTensor<f64>, f: F, tol: f64) {
        let analytic = f(x).gradient;
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let numeric = (f(&plus).value - f(&minus).value) / (2.0 * h);
            let rel = crate::gradcheck::relative_error(analytic[i], numeric);
            worst = worst.max(rel);
        }
        assert!(worst < tol, "worst relative error {worst}");
    }

    #[test]
    fn l1_identity_and_offset() {
        let t = random(4, 4, 3, 1);
        let same = l1_loss(&t, &t).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.gradient.iter().all(|&g| g == 0.0));
        let v = l1_loss(&offset(&t, 0.1), &t).unwrap().value;
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn l2_identity_and_offset() {
        let t = random(4, 4, 3, 2);
        assert_eq!(l2_loss(&t, &t).unwrap().value, 0.0);
        let v = l2_loss(&offset(&t, 0.1), &t).unwrap().value;
        assert!((v - 0.01).abs() < 1e-12);
    }

    #[test]
    fn ln_gradients_match_finite_differences() {
        let target = random(8, 8, 3, 3);
        let pred = random(8, 8, 3, 4);
        assert_fd(&pred, |p| l1_loss(p, &target).unwrap(), 1e-6);
        assert_fd(&pred, |p| l2_loss(p, &target).unwrap(), 1e-6);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = random(4, 4, 3, 1);
        let b = random(4, 5, 3, 1);
        assert!(l1_loss(&a, &b).is_err());
        assert!(l2_loss(&a, &b).is_err());
        assert!(ssim_loss(&a, &b, &SsimConfig::default()).is_err());
    }

    #[test]
    fn ssim_identity_map_is_one() {
        let a = random(16, 16, 3, 5);
        let map = ssim_map(&a, &a, &SsimConfig::default()).unwrap();
        assert_eq!(map.shape(), (6, 6, 3));
        assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(ssim_loss(&a, &a, &SsimConfig::default()).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let cfg = SsimConfig::default();
        let (ma, mb) = (0.3, 0.7);
        let a = ImageTensor::filled(12, 12, 1, ma);
        let b = ImageTensor::filled(12, 12, 1, mb);
        let want = (2.0 * ma * mb + cfg.c1()) / (ma * ma + mb * mb + cfg.c1());
        for &v in ssim_map(&a, &b, &cfg).unwrap().data() {
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random(10, 16, 1, 1);
        assert!(matches!(
            ssim_map(&a, &a, &SsimConfig::default()),
            Err(Error::ImageTooSmall { min: 11, found: 10, .. })
        ));
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let target = random(16, 16, 3, 6);
        let pred = random(16, 16, 3, 7);
        assert_fd(&pred, |p| ssim_loss(p, &target, &SsimConfig::default()).unwrap(), 1e-4);
    }

    #[test]
    fn ssim_loss_grows_with_noise() {
        use rand_distr::{Distribution, StandardNormal};
        let target = random(24, 24, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..target.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut last = -1.0;
        for amp in [0.0, 0.01, 0.03, 0.06, 0.1, 0.2] {
            let data = target.data().iter().zip(&noise).map(|(t, n)| t + amp * n).collect();
            let pred = ImageTensor::new(24, 24, 3, data).unwrap();
            let v = ssim_loss(&pred, &target, &SsimConfig::default()).unwrap().value;
            assert!(v > last, "amp {amp}: {v} <= {last}");
            last = v;
        }
    }

    #[test]
    fn bce_cases() {
        let t = FaceMask::<f64>::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
        let exact = bce_loss(t.tensor(), &t).unwrap().value;
        assert!((exact + libm::log(1.0 - BCE_EPSILON)).abs() < 1e-15);
        let half = bce_loss(&ImageTensor::filled(4, 4, 1, 0.5), &t).unwrap().value;
        assert!((half - core::f64::consts::LN_2).abs() < 1e-12);
        let pred = random(6, 6, 1, 10);
        let t = FaceMask::from_fn(6, 6, |r, c| r > c);
        assert_fd(&pred, |p| bce_loss(p, &t).unwrap(), 1e-6);
    }

    #[test]
    fn dice_cases() {
        let t = FaceMask::<f64>::from_fn(4, 4, |r, _| r < 2);
        assert!(dice_loss(t.tensor(), &t).unwrap().value.abs() < 1e-15);
        let empty = FaceMask::<f64>::zeros(4, 4);
        assert_eq!(dice_loss(empty.tensor(), &empty).unwrap().value, 0.0);
        // p covers half of t's 8 pixels: 1 - (2*4 + 1) / (4 + 8 + 1) = 4/13
        let p = FaceMask::<f64>::from_fn(4, 4, |r, _| r < 1);
        let v = dice_loss(p.tensor(), &t).unwrap().value;
        assert!((v - 4.0 / 13.0).abs() < 1e-15);
        let pred = random(6, 6, 1, 11);
        let t = FaceMask::from_fn(6, 6, |r, c| r + c > 4);
        assert_fd(&pred, |p| dice_loss(p, &t).unwrap(), 1e-6);
    }

    #[test]
    fn mask_losses_reject_multichannel() {
        let t = FaceMask::<f64>::ones(4, 4);
        let rgb = random(4, 4, 3, 1);
        assert!(bce_loss(&rgb, &t).is_err());
        assert!(dice_loss(&rgb, &t).is_err());
    }

    #[test]
    fn kl_cases() {
        let zero = GaussianPosterior::new(vec![0.0f64; 4], vec![0.0; 4]).unwrap();
        assert_eq!(kl_diag_gaussian(&zero).value, 0.0);
        let one = GaussianPosterior::new(vec![1.0f64], vec![0.0]).unwrap();
        assert!((kl_diag_gaussian(&one).value - 0.5).abs() < 1e-15);
        assert!(GaussianPosterior::new(vec![0.0f64; 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mu: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let post = GaussianPosterior::new(mu.clone(), lv.clone()).unwrap();
        let kl = kl_diag_gaussian(&post);
        let h = 1e-5;
        for i in 0..6 {
            let eval =
                |m: &[f64], l: &[f64]| kl_diag_gaussian(&GaussianPosterior::new(m.to_vec(), l.to_vec()).unwrap()).value;
            let (mut mp, mut mm) = (mu.clone(), mu.clone());
            mp[i] += h;
            mm[i] -= h;
            let num = (eval(&mp, &lv) - eval(&mm, &lv)) / (2.0 * h);
            assert!((num - kl.grad_mu[i]).abs() / num.abs().max(1e-8) < 1e-6);
            let (mut lp, mut lm) = (lv.clone(), lv.clone());
            lp[i] += h;
            lm[i] -= h;
            let num = (eval(&mu, &lp) - eval(&mu, &lm)) / (2.0 * h);
            assert!((num - kl.grad_logvar[i]).abs() / num.abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn composite_loss_cases() {
        let cfg = SsimConfig::default();
        let reference = random(12, 12, 3, 13);
        let pred = random(12, 12, 3, 14);
        let ln = LossWeights::unit(false, true, true);

        let none = composite_loss(&pred, &reference, Some(&FaceMask::zeros(12, 12)), &ln, &cfg).unwrap();
        assert_eq!(none.value, 0.0);
        assert!(none.gradient.iter().all(|&g| g == 0.0));

        let all = LossWeights::unit(true, true, true);
        let full = composite_loss(&pred, &reference, Some(&FaceMask::ones(12, 12)), &all, &cfg).unwrap();
        let plain = composite_loss(&pred, &reference, None, &all, &cfg).unwrap();
        assert_eq!(full, plain);
        let sum = ssim_loss(&pred, &reference, &cfg).unwrap().value
            + l1_loss(&pred, &reference).unwrap().value
            + l2_loss(&pred, &reference).unwrap().value;
        assert!((plain.value - sum).abs() < 1e-12);

        // half the pixels carry a constant 0.2 error; mean runs over all pixels
        let half = FaceMask::from_fn(12, 12, |_, c| c < 6);
        let shifted = offset(&reference, 0.2);
        let l1 = LossWeights::unit(false, true, false);
        let v = composite_loss(&shifted, &reference, Some(&half), &l1, &cfg).unwrap().value;
        assert!((v - 0.1).abs() < 1e-12);

        let nothing = LossWeights::unit(false, false, false);
        assert!(composite_loss(&pred, &reference, None, &nothing, &cfg).is_err());
    }

    #[test]
    fn composite_loss_gradient_matches_finite_differences() {
        let cfg = SsimConfig::default();
        let reference = random(14, 14, 3, 15);
        let pred = random(14, 14, 3, 16);
        let mask = FaceMask::from_fn(14, 14, |r, c| (r as i32 - 7).pow(2) + (c as i32 - 7).pow(2) < 30);
        let all = LossWeights::unit(true, true, true);
        assert_fd(&pred, |p| composite_loss(p, &reference, Some(&mask), &all, &cfg).unwrap(), 1e-4);
    }
}
