//! Image and mask tensors plus the compositing primitive.
//!
//! Intensities are unit-interval reals stored row-major by
//! `(row, column, channel)`. A [`FaceMask`] is a single-channel tensor whose
//! values are exactly `0` or `1`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default probability threshold used to turn a soft mask into a [`FaceMask`].
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T = f64> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(alloc::format!("channel count must be 1 or 3, got {channels}")));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::shape("ImageTensor::new", expected, data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds a tensor without validating the channel count. Used for
    /// intermediate maps (e.g. metric maps) that are not images.
    pub(crate) fn raw(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::raw(height, width, channels, vec![value; height * width * channels])
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::raw(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: T) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Copies one channel out as a single-channel tensor.
    pub fn channel(&self, ch: usize) -> ImageTensor<T> {
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        Self::raw(self.height, self.width, 1, data)
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor::raw(self.height, self.width, self.channels, crate::scalar::convert(&self.data))
    }

    pub(crate) fn same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(context, self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Binary single-channel mask selecting face pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMask<T = f64>(ImageTensor<T>);

impl<T: Scalar> FaceMask<T> {
    /// Wraps a tensor that is already strictly binary.
    pub fn new(tensor: ImageTensor<T>) -> Result<Self> {
        if tensor.channels() != 1 {
            return Err(Error::InvalidArgument(alloc::format!(
                "face mask must be single-channel, got {} channels",
                tensor.channels()
            )));
        }
        if !tensor.data().iter().all(|&v| v == T::zero() || v == T::one()) {
            return Err(Error::InvalidArgument("face mask values must be exactly 0 or 1".into()));
        }
        Ok(Self(tensor))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self(ImageTensor::filled(height, width, 1, T::one()))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(ImageTensor::zeros(height, width, 1))
    }

    pub fn from_fn(height: usize, width: usize, mut inside: impl FnMut(usize, usize) -> bool) -> Self {
        Self(ImageTensor::from_fn(height, width, 1, |r, c, _| if inside(r, c) { T::one() } else { T::zero() }))
    }

    pub fn tensor(&self) -> &ImageTensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> ImageTensor<T> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn data(&self) -> &[T] {
        self.0.data()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.0.get(row, col, 0) == T::one()
    }

    /// Number of face pixels.
    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == T::one()).count()
    }

    pub fn cast<U: Scalar>(&self) -> FaceMask<U> {
        FaceMask(self.0.cast())
    }

    fn check_covers(&self, img: &ImageTensor<T>, context: &'static str) -> Result<()> {
        if (self.height(), self.width()) != (img.height(), img.width()) {
            return Err(Error::shape(context, (img.height(), img.width()), (self.height(), self.width())));
        }
        Ok(())
    }
}

/// `out = mask * predicted + (1 - mask) * reference`, mask broadcast across
/// channels. The derivative of the output with respect to `predicted` is the
/// mask itself.
pub fn composite<T: Scalar>(
    predicted: &ImageTensor<T>,
    reference: &ImageTensor<T>,
    mask: &FaceMask<T>,
) -> Result<ImageTensor<T>> {
    predicted.same_shape(reference, "composite")?;
    mask.check_covers(predicted, "composite")?;
    let ch = predicted.channels();
    let data = predicted
        .data()
        .iter()
        .zip(reference.data())
        .enumerate()
        .map(|(i, (&p, &r))| if mask.data()[i / ch] == T::one() { p } else { r })
        .collect();
    Ok(ImageTensor::raw(predicted.height(), predicted.width(), ch, data))
}

/// Multiplies a gradient with respect to a composite by the mask, yielding
/// the gradient with respect to the prediction.
pub fn mask_gradient<T: Scalar>(grad: &mut [T], mask: &FaceMask<T>, channels: usize) {
    for (i, g) in grad.iter_mut().enumerate() {
        if mask.data()[i / channels] != T::one() {
            *g = T::zero();
        }
    }
}

/// Thresholds a soft single-channel map: `1` where `soft >= threshold`.
pub fn binarize_mask<T: Scalar>(soft: &ImageTensor<T>, threshold: T) -> Result<FaceMask<T>> {
    if soft.channels() != 1 {
        return Err(Error::InvalidArgument(alloc::format!(
            "binarize_mask expects a single-channel map, got {} channels",
            soft.channels()
        )));
    }
    if !(threshold > T::zero() && threshold < T::one()) {
        return Err(Error::InvalidArgument("mask threshold must lie strictly inside (0, 1)".into()));
    }
    Ok(FaceMask::from_fn(soft.height(), soft.width(), |r, c| soft.get(r, c, 0) >= threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ImageTensor::from_fn(h, w, c, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn composite_identity_masks() {
        let p = img(4, 5, 3, 1);
        let r = img(4, 5, 3, 2);
        assert_eq!(composite(&p, &r, &FaceMask::ones(4, 5)).unwrap(), p);
        assert_eq!(composite(&p, &r, &FaceMask::zeros(4, 5)).unwrap(), r);
    }

    #[test]
    fn composite_single_pixel() {
        let p = ImageTensor::filled(2, 2, 3, 0.8);
        let r = ImageTensor::filled(2, 2, 3, 0.1);
        let m = FaceMask::from_fn(2, 2, |row, col| row == 1 && col == 0);
        let out = composite(&p, &r, &m).unwrap();
        for row in 0..2 {
            for col in 0..2 {
                for ch in 0..3 {
                    let want = if (row, col) == (1, 0) { 0.8 } else { 0.1 };
                    assert_eq!(out.get(row, col, ch), want);
                }
            }
        }
    }

    #[test]
    fn composite_rejects_shape_mismatch() {
        let p = img(4, 4, 3, 1);
        let r = img(4, 4, 1, 2);
        assert!(matches!(composite(&p, &r, &FaceMask::ones(4, 4)), Err(Error::ShapeMismatch { .. })));
        let r = img(4, 4, 3, 2);
        assert!(composite(&p, &r, &FaceMask::ones(3, 4)).is_err());
    }

    #[test]
    fn binarize_cases() {
        let hi = ImageTensor::filled(3, 3, 1, 0.9);
        let lo = ImageTensor::filled(3, 3, 1, 0.1);
        let tie = ImageTensor::filled(3, 3, 1, 0.5);
        assert_eq!(binarize_mask(&hi, 0.5).unwrap().count(), 9);
        assert_eq!(binarize_mask(&lo, 0.5).unwrap().count(), 0);
        assert_eq!(binarize_mask(&tie, 0.5).unwrap().count(), 9);
        assert!(binarize_mask(&img(3, 3, 3, 0), 0.5).is_err());
    }

    #[test]
    fn face_mask_rejects_soft_values() {
        assert!(FaceMask::new(ImageTensor::filled(2, 2, 1, 0.5)).is_err());
        assert!(FaceMask::new(ImageTensor::<f64>::filled(2, 2, 3, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn composite_with_itself_is_identity(seed in any::<u64>(), mseed in any::<u64>()) {
            let a = img(5, 6, 3, seed);
            let m = binarize_mask(&img(5, 6, 1, mseed), 0.5).unwrap();
            prop_assert_eq!(composite(&a, &a, &m).unwrap(), a);
        }

        #[test]
        fn composite_idempotent(s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>()) {
            let p = img(5, 6, 3, s1);
            let r = img(5, 6, 3, s2);
            let m = binarize_mask(&img(5, 6, 1, s3), 0.5).unwrap();
            let once = composite(&p, &r, &m).unwrap();
            prop_assert_eq!(composite(&once, &r, &m).unwrap(), once.clone());
            prop_assert!(once.in_unit_range());
        }

        #[test]
        fn binarize_is_a_fixed_point(seed in any::<u64>(), t in 0.05f64..0.95) {
            let m = binarize_mask(&img(4, 7, 1, seed), t).unwrap();
            let again = binarize_mask(m.tensor(), t).unwrap();
            prop_assert_eq!(again, m);
        }
    }
}
