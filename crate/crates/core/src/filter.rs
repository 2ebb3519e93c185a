//! Gaussian windows and separable "valid" filtering used by the SSIM family
//! and VIF. Planes are single-channel, row-major slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(alloc::format!("window size must be odd, got {size}")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument("window sigma must be positive".into()));
    }
    let center = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            libm::exp(-(d * d) / (2.0 * sigma * sigma))
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

/// Full 2-D Gaussian window, `size x size`, entries summing to one.
pub fn gaussian_window(size: usize, sigma: f64) -> Result<Vec<Vec<f64>>> {
    let taps = gaussian_taps(size, sigma)?;
    Ok(taps.iter().map(|&a| taps.iter().map(|&b| a * b).collect()).collect())
}

/// Correlates `src` (`h x w`) with the separable window `taps x taps` over the
/// valid extent, producing `(h - k + 1) x (w - k + 1)` values.
pub fn filter_valid<T: Scalar>(src: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    debug_assert!(h >= k && w >= k && src.len() == h * w);
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![T::zero(); h * wo];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        let out = &mut rows[y * wo..(y + 1) * wo];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (t, &g) in taps.iter().enumerate() {
                acc += g * line[x + t];
            }
            *o = acc;
        }
    }
    let mut out = vec![T::zero(); ho * wo];
    for y in 0..ho {
        let dst = &mut out[y * wo..(y + 1) * wo];
        for (t, &g) in taps.iter().enumerate() {
            let line = &rows[(y + t) * wo..(y + t + 1) * wo];
            for (d, &v) in dst.iter_mut().zip(line) {
                *d += g * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a `ho x wo` map back onto the
/// `(ho + k - 1) x (wo + k - 1)` input grid.
pub fn filter_valid_adjoint<T: Scalar>(src: &[T], ho: usize, wo: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    debug_assert_eq!(src.len(), ho * wo);
    let (h, w) = (ho + k - 1, wo + k - 1);
    let mut rows = vec![T::zero(); h * wo];
    for y in 0..ho {
        let line = &src[y * wo..(y + 1) * wo];
        for (t, &g) in taps.iter().enumerate() {
            let dst = &mut rows[(y + t) * wo..(y + t + 1) * wo];
            for (d, &v) in dst.iter_mut().zip(line) {
                *d += g * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let line = &rows[y * wo..(y + 1) * wo];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, &v) in line.iter().enumerate() {
            for (t, &g) in taps.iter().enumerate() {
                dst[x + t] += g * v;
            }
        }
    }
    out
}

/// 2x2 box average followed by decimation by two; odd trailing rows and
/// columns are dropped.
pub fn downsample2<T: Scalar>(src: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(ho * wo);
    for y in 0..ho {
        for x in 0..wo {
            let a = src[2 * y * w + 2 * x];
            let b = src[2 * y * w + 2 * x + 1];
            let c = src[(2 * y + 1) * w + 2 * x];
            let d = src[(2 * y + 1) * w + 2 * x + 1];
            out.push((a + b + c + d) * quarter);
        }
    }
    (out, ho, wo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_one_window_is_unit() {
        assert_eq!(gaussian_window(1, 1.5).unwrap(), vec![vec![1.0]]);
    }

    #[test]
    fn window_sums_to_one_and_is_centro_symmetric() {
        let w = gaussian_window(11, 1.5).unwrap();
        let sum: f64 = w.iter().flatten().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..11 {
            for j in 0..11 {
                assert_eq!(w[i][j], w[10 - i][10 - j]);
            }
        }
    }

    #[test]
    fn even_or_degenerate_windows_rejected() {
        assert!(gaussian_window(4, 1.0).is_err());
        assert!(gaussian_window(0, 1.0).is_err());
        assert!(gaussian_window(3, 0.0).is_err());
    }

    #[test]
    fn valid_filter_matches_direct_sum() {
        let (h, w) = (9, 7);
        let src: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let taps = gaussian_taps(5, 1.1).unwrap();
        let win = gaussian_window(5, 1.1).unwrap();
        let out = filter_valid(&src, h, w, &taps);
        for y in 0..h - 4 {
            for x in 0..w - 4 {
                let mut acc = 0.0;
                for i in 0..5 {
                    for j in 0..5 {
                        acc += win[i][j] * src[(y + i) * w + x + j];
                    }
                }
                assert!((acc - out[y * (w - 4) + x]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let (h, w, k) = (10, 8, 3);
        let taps = gaussian_taps(k, 0.8).unwrap();
        let x: Vec<f64> = (0..h * w).map(|i| libm::sin(i as f64)).collect();
        let y: Vec<f64> = (0..(h - k + 1) * (w - k + 1)).map(|i| libm::cos(i as f64 * 0.7)).collect();
        let ax = filter_valid(&x, h, w, &taps);
        let aty = filter_valid_adjoint(&y, h - k + 1, w - k + 1, &taps);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn downsample_averages_blocks() {
        let src = [1.0, 2.0, 5.0, 3.0, 4.0, 6.0, 9.0, 9.0, 9.0f64];
        let (out, h, w) = downsample2(&src, 3, 3);
        assert_eq!((h, w), (1, 1));
        assert_eq!(out, vec![2.5]);
    }
}
