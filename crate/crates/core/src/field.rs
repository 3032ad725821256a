//! Image, mask and per-pixel probability field types, and the elementary
//! operations on them (softmax, simplex smoothing, one-hot, argmax).
//!
//! Multi-class fields are stored class-major: value of class `c` at pixel
//! `i = y * width + x` lives at `c * height * width + i`. That is the layout
//! the network produces, so no transposition happens between the network
//! head and the losses.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Label value marking a pixel without supervision in a [`PartialMask`].
pub const UNLABELED: u8 = 255;

/// Floor applied to probabilities before every logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

/// Tolerance on the per-pixel sum of a [`SimplexField`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

/// Smallest image side accepted by [`ImageGrid::new`].
pub const MIN_IMAGE_SIDE: usize = 8;

/// `ln(max(p, LOG_FLOOR))`.
#[inline]
pub fn floored_ln<T: Scalar>(p: T) -> T {
    p.max(T::of(LOG_FLOOR)).ln()
}

/// Derivative of [`floored_ln`]; zero below the floor.
#[inline]
pub(crate) fn floored_ln_grad<T: Scalar>(p: T) -> T {
    if p > T::of(LOG_FLOOR) {
        p.recip()
    } else {
        T::zero()
    }
}

fn check_dims(height: usize, width: usize, len: usize, per_pixel: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidShape(format!("{height}x{width} has no pixels")));
    }
    if len != height * width * per_pixel {
        return Err(Error::InvalidShape(format!(
            "{height}x{width}x{per_pixel} needs {} values, got {len}",
            height * width * per_pixel
        )));
    }
    Ok(())
}

fn check_classes(num_classes: usize) -> Result<()> {
    if !(2..UNLABELED as usize).contains(&num_classes) {
        return Err(Error::InvalidShape(format!(
            "class count {num_classes} outside 2..{UNLABELED}"
        )));
    }
    Ok(())
}

fn first_non_finite<T: Scalar>(values: &[T]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

/// Grayscale image with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> ImageGrid<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::InvalidShape(format!(
                "image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        check_dims(height, width, values.len(), 1)?;
        if let Some(index) = first_non_finite(&values) {
            return Err(Error::NonFinite { what: "image", index });
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn cast<U: Scalar>(&self) -> ImageGrid<U> {
        ImageGrid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

/// Dense per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DenseMask {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl DenseMask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        check_classes(num_classes)?;
        check_dims(height, width, labels.len(), 1)?;
        if let Some(pixel) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::ClassOutOfRange {
                id: labels[pixel],
                pixel,
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Indicator of pixels carrying `class`.
    pub fn indicator(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Sparse supervision: class ids on a handful of pixels, [`UNLABELED`] elsewhere.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialMask {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl PartialMask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        check_classes(num_classes)?;
        check_dims(height, width, labels.len(), 1)?;
        if let Some(pixel) = labels.iter().position(|&l| l != UNLABELED && l as usize >= num_classes) {
            return Err(Error::ClassOutOfRange {
                id: labels[pixel],
                pixel,
                num_classes,
            });
        }
        if labels.iter().all(|&l| l == UNLABELED) {
            return Err(Error::NoLabeledPixels);
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    /// Every pixel labeled, copied from a dense mask.
    pub fn from_dense(mask: &DenseMask) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            num_classes: mask.num_classes,
            labels: mask.labels.clone(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, pixel: usize) -> Option<u8> {
        match self.labels[pixel] {
            UNLABELED => None,
            l => Some(l),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELED).count()
    }
}

/// Per-pixel probability vectors on the unit simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexField<T> {
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<T>,
}

impl<T: Scalar> SimplexField<T> {
    /// Validates shape, range and per-pixel normalization.
    pub fn new(height: usize, width: usize, num_classes: usize, probs: Vec<T>) -> Result<Self> {
        check_classes(num_classes)?;
        check_dims(height, width, probs.len(), num_classes)?;
        if let Some(index) = first_non_finite(&probs) {
            return Err(Error::NonFinite {
                what: "simplex field",
                index,
            });
        }
        let tol = T::of(SIMPLEX_TOLERANCE);
        if let Some(index) = probs.iter().position(|&p| p < T::zero() || p > T::one() + tol) {
            return Err(Error::InvalidShape(format!(
                "probability {} at index {index} outside [0, 1]",
                probs[index]
            )));
        }
        let field = Self {
            height,
            width,
            num_classes,
            probs,
        };
        for i in 0..field.pixels() {
            let s: T = (0..num_classes).map(|c| field.prob(c, i)).sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::InvalidShape(format!("pixel {i} sums to {s}, not 1")));
            }
        }
        Ok(field)
    }

    pub(crate) fn from_raw(height: usize, width: usize, num_classes: usize, probs: Vec<T>) -> Self {
        debug_assert_eq!(probs.len(), height * width * num_classes);
        Self {
            height,
            width,
            num_classes,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, class: usize, pixel: usize) -> T {
        self.probs[class * self.pixels() + pixel]
    }

    /// Probability vector of one pixel.
    pub fn pixel(&self, pixel: usize) -> Vec<T> {
        (0..self.num_classes).map(|c| self.prob(c, pixel)).collect()
    }

    /// Probability map of a single class.
    pub fn channel(&self, class: usize) -> &[T] {
        let n = self.pixels();
        &self.probs[class * n..(class + 1) * n]
    }

    pub fn same_shape<U>(&self, other: &SimplexField<U>) -> bool {
        self.height == other.height && self.width == other.width && self.num_classes == other.num_classes
    }
}

/// Unconstrained pre-softmax network scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitField<T> {
    height: usize,
    width: usize,
    num_classes: usize,
    scores: Vec<T>,
}

impl<T: Scalar> LogitField<T> {
    pub fn new(height: usize, width: usize, num_classes: usize, scores: Vec<T>) -> Result<Self> {
        check_classes(num_classes)?;
        check_dims(height, width, scores.len(), num_classes)?;
        if let Some(index) = first_non_finite(&scores) {
            return Err(Error::NonFinite { what: "logits", index });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn into_scores(self) -> Vec<T> {
        self.scores
    }
}

/// Teacher (top) and student (bottom) predictions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DualOutput<T> {
    pub top: SimplexField<T>,
    pub bottom: SimplexField<T>,
}

impl<T: Scalar> DualOutput<T> {
    pub fn new(top: SimplexField<T>, bottom: SimplexField<T>) -> Result<Self> {
        if !top.same_shape(&bottom) {
            return Err(Error::ShapeMismatch(format!(
                "top {}x{}x{} vs bottom {}x{}x{}",
                top.height, top.width, top.num_classes, bottom.height, bottom.width, bottom.num_classes
            )));
        }
        Ok(Self { top, bottom })
    }
}

/// Softmax over the class axis of a class-major buffer, in place.
pub(crate) fn softmax_classes<T: Scalar>(values: &mut [T], num_classes: usize, pixels: usize) {
    for i in 0..pixels {
        let max = (0..num_classes)
            .map(|c| values[c * pixels + i])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for c in 0..num_classes {
            let e = (values[c * pixels + i] - max).exp();
            values[c * pixels + i] = e;
            total += e;
        }
        for c in 0..num_classes {
            values[c * pixels + i] /= total;
        }
    }
}

/// Per-pixel softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &LogitField<T>) -> SimplexField<T> {
    let mut probs = logits.scores.clone();
    let pixels = logits.height * logits.width;
    softmax_classes(&mut probs, logits.num_classes, pixels);
    SimplexField::from_raw(logits.height, logits.width, logits.num_classes, probs)
}

/// Softmax applied to probability vectors treated as scores.
///
/// Pulls every pixel toward the uniform distribution; with two classes the
/// output never leaves `[1/(e+1), e/(e+1)]`.
pub fn smooth_simplex<T: Scalar>(p: &SimplexField<T>) -> SimplexField<T> {
    let mut probs = p.probs.clone();
    softmax_classes(&mut probs, p.num_classes, p.pixels());
    SimplexField::from_raw(p.height, p.width, p.num_classes, probs)
}

/// Vector-Jacobian product of the per-pixel softmax.
///
/// Given `p = softmax(z)` and `g = dL/dp`, returns `dL/dz`.
pub fn softmax_backward<T: Scalar>(p: &SimplexField<T>, grad_p: &[T]) -> Vec<T> {
    assert_eq!(grad_p.len(), p.probs.len(), "gradient length must match field");
    let n = p.pixels();
    let k = p.num_classes;
    let mut out = vec![T::zero(); grad_p.len()];
    for i in 0..n {
        let dot: T = (0..k).map(|c| p.probs[c * n + i] * grad_p[c * n + i]).sum();
        for c in 0..k {
            let idx = c * n + i;
            out[idx] = p.probs[idx] * (grad_p[idx] - dot);
        }
    }
    out
}

pub fn one_hot<T: Scalar>(mask: &DenseMask) -> SimplexField<T> {
    let n = mask.labels.len();
    let mut probs = vec![T::zero(); n * mask.num_classes];
    for (i, &l) in mask.labels.iter().enumerate() {
        probs[l as usize * n + i] = T::one();
    }
    SimplexField::from_raw(mask.height, mask.width, mask.num_classes, probs)
}

/// Hard label map; ties go to the lowest class index.
pub fn argmax<T: Scalar>(p: &SimplexField<T>) -> DenseMask {
    let n = p.pixels();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..p.num_classes {
                if p.prob(c, i) > p.prob(best, i) {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    DenseMask {
        height: p.height,
        width: p.width,
        num_classes: p.num_classes,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(scores: &[f64]) -> LogitField<f64> {
        // one pixel, classes given in order
        LogitField::new(1, 1, scores.len(), scores.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        assert_eq!(softmax(&logits(&[0.0, 0.0])).probs(), &[0.5, 0.5]);
        for t in [-700.0, -3.0, 12.5, 900.0] {
            let p = softmax(&logits(&[t, t]));
            assert!((p.prob(0, 0) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln3_vs_zero() {
        let p = softmax(&logits(&[3f64.ln(), 0.0]));
        assert!((p.prob(0, 0) - 0.75).abs() < 1e-12);
        assert!((p.prob(1, 0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let err = LogitField::<f64>::new(1, 1, 2, vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert!(LogitField::<f32>::new(1, 1, 2, vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn smoothing_vertex_and_uniform() {
        let v = SimplexField::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let s = smooth_simplex(&v);
        let e = std::f64::consts::E;
        assert!((s.prob(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.prob(1, 0) - 1.0 / (e + 1.0)).abs() < 1e-12);
        let u = SimplexField::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(smooth_simplex(&u).probs(), &[0.5, 0.5]);
    }

    #[test]
    fn smoothing_two_class_bound_sweep() {
        let bound = std::f64::consts::E / (std::f64::consts::E + 1.0);
        for k in 0..=1000 {
            let p = k as f64 / 1000.0;
            let s = smooth_simplex(&SimplexField::new(1, 1, 2, vec![p, 1.0 - p]).unwrap());
            let max = s.prob(0, 0).max(s.prob(1, 0));
            assert!(max <= bound + 1e-15, "p={p} gave {max}");
            assert!(s.prob(0, 0) > 0.0 && s.prob(1, 0) > 0.0);
        }
    }

    #[test]
    fn one_hot_examples() {
        let m = DenseMask::new(1, 1, 3, vec![1]).unwrap();
        assert_eq!(one_hot::<f64>(&m).probs(), &[0.0, 1.0, 0.0]);
        let m = DenseMask::new(1, 1, 2, vec![0]).unwrap();
        assert_eq!(one_hot::<f32>(&m).probs(), &[1.0, 0.0]);
    }

    #[test]
    fn class_id_out_of_range_rejected() {
        let err = DenseMask::new(1, 2, 2, vec![0, 2]).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { id: 2, pixel: 1, .. }));
        assert!(PartialMask::new(1, 2, 2, vec![UNLABELED, 3]).is_err());
        assert!(matches!(
            PartialMask::new(1, 2, 2, vec![UNLABELED, UNLABELED]),
            Err(Error::NoLabeledPixels)
        ));
    }

    #[test]
    fn one_hot_argmax_identity_exhaustive_3x3() {
        // every binary 3x3 mask
        for bits in 0u32..512 {
            let labels = (0..9).map(|i| ((bits >> i) & 1) as u8).collect();
            let m = DenseMask::new(3, 3, 2, labels).unwrap();
            assert_eq!(argmax(&one_hot::<f64>(&m)), m);
        }
        // every ternary 2x3 mask
        for code in 0..729u32 {
            let labels = (0..6).map(|i| ((code / 3u32.pow(i)) % 3) as u8).collect();
            let m = DenseMask::new(2, 3, 3, labels).unwrap();
            assert_eq!(argmax(&one_hot::<f32>(&m)), m);
        }
    }

    #[test]
    fn argmax_tie_goes_to_lowest_class() {
        let u = SimplexField::new(1, 2, 3, vec![1. / 3.; 6]).unwrap();
        assert_eq!(argmax(&u).labels(), &[0, 0]);
    }

    #[test]
    fn simplex_validation() {
        assert!(SimplexField::new(1, 1, 2, vec![0.6, 0.6]).is_err());
        assert!(SimplexField::new(1, 1, 2, vec![-0.1, 1.1]).is_err());
        assert!(SimplexField::new(1, 1, 2, vec![0.3, 0.7]).is_ok());
        let a = SimplexField::new(1, 1, 2, vec![0.3, 0.7]).unwrap();
        let b = SimplexField::new(1, 2, 2, vec![0.3, 0.3, 0.7, 0.7]).unwrap();
        assert!(matches!(DualOutput::new(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn image_grid_invariants() {
        assert!(ImageGrid::new(4, 8, vec![0.0f32; 32]).is_err());
        assert!(ImageGrid::new(8, 8, vec![0.0f32; 63]).is_err());
        let mut v = vec![0.5f64; 64];
        v[10] = f64::INFINITY;
        assert!(ImageGrid::new(8, 8, v).is_err());
        assert!(ImageGrid::new(8, 8, vec![0.5f64; 64]).is_ok());
    }

    proptest! {
        #[test]
        fn softmax_normalized_for_large_magnitudes(
            scores in proptest::collection::vec(-1e4f64..1e4, 2..6),
        ) {
            let p = softmax(&logits(&scores));
            let s: f64 = p.probs().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.probs().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn smoothing_contracts_toward_uniform(
            raw in proptest::collection::vec(0.0f64..1.0, 2..5),
        ) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let c = raw.len();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let field = SimplexField::new(1, 1, c, p.clone()).unwrap();
            let s = smooth_simplex(&field);
            let max_in = p.iter().cloned().fold(0.0, f64::max);
            let max_out = s.probs().iter().cloned().fold(0.0, f64::max);
            prop_assert!(max_in >= 1.0 / c as f64);
            prop_assert!(max_out <= max_in + 1e-12);
            prop_assert!(s.probs().iter().all(|&v| v > 0.0));
        }
    }
}
