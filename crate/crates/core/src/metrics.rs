//! Full-reference image quality metrics in the "lower is better" reporting
//! convention: SSIM-family scores are reported as `1 - score`, and the pixel
//! losses are measured on the 0-255 scale and multiplied by `10 / 255`.
//!
//! All metrics run in 64-bit.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::filter::{downsample2, filter_valid, gaussian_taps};
use crate::image::{composite, FaceMask, ImageTensor};
use crate::losses::{ssim_map, SsimConfig};

/// Canonical five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Number of VIF scales.
pub const VIF_SCALES: usize = 4;
/// VIF additive-noise variance on unit-interval data (2 on the 0-255 scale).
pub const VIF_NOISE_VAR: f64 = 2.0 / (255.0 * 255.0);
/// Variance floor used by VIF (1e-10 on the 0-255 scale).
const VIF_EPS: f64 = 1e-10 / (255.0 * 255.0);
/// BT.601 luma weights.
pub const BT601: [f64; 3] = [0.299, 0.587, 0.114];
/// Scale factor applied to 0-255 pixel errors.
pub const LN_REPORT_SCALE: f64 = 10.0 / 255.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub image_id: String,
    pub one_minus_ssim: f64,
    pub one_minus_msssim: f64,
    pub one_minus_vif: f64,
    pub l1_scaled: f64,
    pub l2_scaled: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 5] {
        [self.one_minus_ssim, self.one_minus_msssim, self.one_minus_vif, self.l1_scaled, self.l2_scaled]
    }
}

pub fn invert(v: f64) -> f64 {
    1.0 - v
}

/// Mean SSIM with the default configuration, averaged over channels.
pub fn ssim_index(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64> {
    let map = ssim_map(a, b, &SsimConfig::default())?;
    Ok(map.data().iter().sum::<f64>() / map.len() as f64)
}

/// Number of MS-SSIM scales an image of the given smallest side supports,
/// capped at five.
pub fn ms_ssim_scales(side: usize, window: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len()).take_while(|&s| side >= window << (s - 1)).last().unwrap_or(0)
}

/// Exponents for `scales` levels: the canonical weights truncated and
/// renormalized to sum to one.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let kept = &MS_SSIM_WEIGHTS[..scales.min(MS_SSIM_WEIGHTS.len())];
    let total: f64 = kept.iter().sum();
    kept.iter().map(|w| w / total).collect()
}

/// Mean luminance and contrast-structure terms of one channel at one scale.
fn lum_cs(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64], cfg: &SsimConfig) -> (f64, f64) {
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let saa = filter_valid(&aa, h, w, taps);
    let sbb = filter_valid(&bb, h, w, taps);
    let sab = filter_valid(&ab, h, w, taps);
    let (mut lum, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = saa[i] - ma * ma;
        let var_b = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (var_a + var_b + c2);
    }
    let n = mu_a.len() as f64;
    (lum / n, cs / n)
}

/// Multi-scale SSIM: contrast-structure at every scale, luminance at the
/// coarsest, combined as a weighted product. Negative terms are clamped to
/// zero before exponentiation. Color images are scored per channel and
/// averaged.
pub fn ms_ssim(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64> {
    a.same_shape(b, "ms_ssim")?;
    let cfg = SsimConfig::default();
    let side = a.height().min(a.width());
    let scales = ms_ssim_scales(side, cfg.window_size);
    if scales == 0 {
        return Err(Error::ImageTooSmall { context: "ms_ssim", min: cfg.window_size, found: side });
    }
    let weights = ms_ssim_weights(scales);
    let taps = gaussian_taps(cfg.window_size, cfg.window_sigma)?;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (mut pa, mut pb) = (a.channel(c).into_data(), b.channel(c).into_data());
        let (mut h, mut w) = (a.height(), a.width());
        let mut score = 1.0;
        for (s, &weight) in weights.iter().enumerate() {
            let (lum, cs) = lum_cs(&pa, &pb, h, w, &taps, &cfg);
            let term = if s + 1 == scales { lum.max(0.0) * cs.max(0.0) } else { cs.max(0.0) };
            score *= libm::pow(term, weight);
            if s + 1 < scales {
                let (da, h2, w2) = downsample2(&pa, h, w);
                let (db, _, _) = downsample2(&pb, h, w);
                pa = da;
                pb = db;
                h = h2;
                w = w2;
            }
        }
        total += score;
    }
    Ok(total / a.channels() as f64)
}

/// Single-channel luminance plane (BT.601 for color input).
pub fn luminance(img: &ImageTensor<f64>) -> Vec<f64> {
    match img.channels() {
        1 => img.data().to_vec(),
        _ => img
            .data()
            .chunks_exact(img.channels())
            .map(|px| BT601[0] * px[0] + BT601[1] * px[1] + BT601[2] * px[2])
            .collect(),
    }
}

fn vif_window(scale: usize) -> usize {
    (1 << (VIF_SCALES + 1 - scale)) + 1
}

/// Smallest square side supporting all VIF scales.
pub fn vif_min_side() -> usize {
    (1..).find(|&n| vif_fits(n)).unwrap_or(usize::MAX)
}

fn vif_fits(mut side: usize) -> bool {
    for scale in 1..=VIF_SCALES {
        let n = vif_window(scale);
        if scale > 1 {
            if side < n {
                return false;
            }
            side = (side - n + 1).div_ceil(2);
        }
        if side < n {
            return false;
        }
    }
    true
}

/// Pixel-domain multiscale VIF. The first argument is the reference; the
/// measure is not symmetric.
pub fn vif_p(reference: &ImageTensor<f64>, distorted: &ImageTensor<f64>) -> Result<f64> {
    reference.same_shape(distorted, "vif_p")?;
    let side = reference.height().min(reference.width());
    if !vif_fits(side) {
        return Err(Error::ImageTooSmall { context: "vif_p", min: vif_min_side(), found: side });
    }
    let mut r = luminance(reference);
    let mut d = luminance(distorted);
    let (mut h, mut w) = (reference.height(), reference.width());
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let n = vif_window(scale);
        let taps = gaussian_taps(n, n as f64 / 5.0)?;
        if scale > 1 {
            let rf = filter_valid(&r, h, w, &taps);
            let df = filter_valid(&d, h, w, &taps);
            let (fh, fw) = (h - n + 1, w - n + 1);
            let (nh, nw) = (fh.div_ceil(2), fw.div_ceil(2));
            r = decimate(&rf, fh, fw);
            d = decimate(&df, fh, fw);
            h = nh;
            w = nw;
        }
        let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
        let dd: Vec<f64> = d.iter().map(|v| v * v).collect();
        let rd: Vec<f64> = r.iter().zip(&d).map(|(x, y)| x * y).collect();
        let mu1 = filter_valid(&r, h, w, &taps);
        let mu2 = filter_valid(&d, h, w, &taps);
        let s11 = filter_valid(&rr, h, w, &taps);
        let s22 = filter_valid(&dd, h, w, &taps);
        let s12 = filter_valid(&rd, h, w, &taps);
        for i in 0..mu1.len() {
            let mut var1 = (s11[i] - mu1[i] * mu1[i]).max(0.0);
            let var2 = (s22[i] - mu2[i] * mu2[i]).max(0.0);
            let cov = s12[i] - mu1[i] * mu2[i];
            let mut g = cov / (var1 + VIF_EPS);
            let mut sv = var2 - g * cov;
            if var1 < VIF_EPS {
                g = 0.0;
                sv = var2;
                var1 = 0.0;
            }
            if var2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = var2;
                g = 0.0;
            }
            let sv = sv.max(VIF_EPS);
            num += libm::log2(1.0 + g * g * var1 / (sv + VIF_NOISE_VAR));
            den += libm::log2(1.0 + var1 / VIF_NOISE_VAR);
        }
    }
    // A flat reference carries no information, so nothing can be lost.
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

fn decimate(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.div_ceil(2) * w.div_ceil(2));
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            out.push(src[y * w + x]);
        }
    }
    out
}

fn abs_errors_255<'a>(a: &'a ImageTensor<f64>, b: &'a ImageTensor<f64>) -> impl Iterator<Item = f64> + 'a {
    a.data().iter().zip(b.data()).map(|(x, y)| (x * 255.0 - y * 255.0).abs())
}

/// Mean absolute error on the 0-255 scale, times `10 / 255`.
pub fn l1_scaled(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64> {
    a.same_shape(b, "l1_scaled")?;
    let mae = abs_errors_255(a, b).sum::<f64>() / a.len() as f64;
    Ok(mae * LN_REPORT_SCALE)
}

/// Root mean squared error on the 0-255 scale, times `10 / 255`.
pub fn l2_scaled(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Result<f64> {
    a.same_shape(b, "l2_scaled")?;
    let mse = abs_errors_255(a, b).map(|e| e * e).sum::<f64>() / a.len() as f64;
    Ok(libm::sqrt(mse) * LN_REPORT_SCALE)
}

/// Scores only the face pixels: the prediction's background is replaced by
/// the reference before any metric is computed.
pub fn evaluate_pair(
    image_id: impl Into<String>,
    predicted: &ImageTensor<f64>,
    reference: &ImageTensor<f64>,
    mask: &FaceMask<f64>,
) -> Result<MetricReport> {
    let merged = composite(predicted, reference, mask)?;
    Ok(MetricReport {
        image_id: image_id.into(),
        one_minus_ssim: invert(ssim_index(&merged, reference)?),
        one_minus_msssim: invert(ms_ssim(&merged, reference)?),
        one_minus_vif: invert(vif_p(reference, &merged)?),
        l1_scaled: l1_scaled(&merged, reference)?,
        l2_scaled: l2_scaled(&merged, reference)?,
    })
}

/// Column-wise arithmetic mean, summed in list order.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("aggregate"));
    }
    let mut sums = [0.0; 5];
    for r in reports {
        for (s, v) in sums.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    let n = reports.len() as f64;
    Ok(MetricReport {
        image_id: "MEAN".into(),
        one_minus_ssim: sums[0] / n,
        one_minus_msssim: sums[1] / n,
        one_minus_vif: sums[2] / n,
        l1_scaled: sums[3] / n,
        l2_scaled: sums[4] / n,
    })
}
