//! Geometric augmentation over a declarative flip x rotation x translation
//! grid. Every grid point yields one variant; image and mask receive the
//! same transform (bilinear vs nearest resampling).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::GroundTruthMask;
use crate::tensor::{Scalar, Tensor};

use super::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
    Both,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::Identity, Flip::Horizontal, Flip::Vertical, Flip::Both];
}

/// Declarative augmentation grid. The variant count is exactly
/// `|flips| * |rotations| * |offsets_x| * |offsets_y|`.
#[derive(Clone, Debug)]
pub struct AugmentationSpec {
    pub flips: Vec<Flip>,
    pub rotation_min_deg: f64,
    pub rotation_max_deg: f64,
    pub rotation_step_deg: f64,
    pub offsets_x: Vec<i64>,
    pub offsets_y: Vec<i64>,
}

impl AugmentationSpec {
    /// Single identity variant.
    pub fn identity() -> Self {
        AugmentationSpec {
            flips: vec![Flip::Identity],
            rotation_min_deg: 0.0,
            rotation_max_deg: 0.0,
            rotation_step_deg: 1.0,
            offsets_x: vec![0],
            offsets_y: vec![0],
        }
    }

    /// Dermoscopy protocol: 4 flips, rotations -16..16 step 4 (9 angles),
    /// translations {0, +-20, +-40}^2 (25 offsets) -> 900 variants.
    pub fn ph2() -> Self {
        AugmentationSpec {
            flips: Flip::ALL.to_vec(),
            rotation_min_deg: -16.0,
            rotation_max_deg: 16.0,
            rotation_step_deg: 4.0,
            offsets_x: vec![-40, -20, 0, 20, 40],
            offsets_y: vec![-40, -20, 0, 20, 40],
        }
    }

    /// Retina protocol: 4 flips, rotations -24..24 step 4 (13 angles),
    /// translations {0, +-10, +-20}^2 (25 offsets) -> 1,300 variants.
    pub fn drive() -> Self {
        AugmentationSpec {
            flips: Flip::ALL.to_vec(),
            rotation_min_deg: -24.0,
            rotation_max_deg: 24.0,
            rotation_step_deg: 4.0,
            offsets_x: vec![-20, -10, 0, 10, 20],
            offsets_y: vec![-20, -10, 0, 10, 20],
        }
    }

    /// The arithmetic rotation sequence, min to max inclusive.
    pub fn rotations(&self) -> Vec<f64> {
        if self.rotation_max_deg == self.rotation_min_deg {
            return vec![self.rotation_min_deg];
        }
        let steps = ((self.rotation_max_deg - self.rotation_min_deg) / self.rotation_step_deg)
            .round() as usize;
        (0..=steps)
            .map(|i| self.rotation_min_deg + i as f64 * self.rotation_step_deg)
            .collect()
    }

    pub fn variant_count(&self) -> usize {
        self.flips.len() * self.rotations().len() * self.offsets_x.len() * self.offsets_y.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.flips.is_empty() {
            return Err(Error::Config("augmentation needs at least one flip".into()));
        }
        for (i, f) in self.flips.iter().enumerate() {
            if self.flips[..i].contains(f) {
                return Err(Error::Config(format!("duplicate flip {f:?} in spec")));
            }
        }
        if self.offsets_x.is_empty() || self.offsets_y.is_empty() {
            return Err(Error::Config(
                "augmentation needs at least one x and one y offset".into(),
            ));
        }
        if self.rotation_max_deg < self.rotation_min_deg {
            return Err(Error::Config(format!(
                "rotation range [{}, {}] is inverted",
                self.rotation_min_deg, self.rotation_max_deg
            )));
        }
        if self.rotation_max_deg > self.rotation_min_deg && self.rotation_step_deg <= 0.0 {
            return Err(Error::Config(
                "rotation step must be positive for a non-degenerate range".into(),
            ));
        }
        let rotations = self.rotations();
        let contains = |v: f64| rotations.iter().any(|&r| (r - v).abs() < 1e-9);
        if !contains(0.0) {
            return Err(Error::Config(format!(
                "rotation sequence must include 0, got {rotations:?}"
            )));
        }
        for &r in &rotations {
            if !contains(-r) {
                return Err(Error::Config(format!(
                    "rotation sequence must be symmetric about 0, got {rotations:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Exact pixel-permutation flip of a `1 x 1 x H x W` tensor.
fn flip_tensor<S: Scalar>(tensor: &Tensor<S>, flip: Flip) -> Tensor<S> {
    if flip == Flip::Identity {
        return tensor.clone();
    }
    let (_, _, h, w) = tensor.dims4().expect("samples are 1x1xHxW");
    let src = tensor.data();
    let mut out = vec![S::zero(); src.len()];
    let (fx, fy) = match flip {
        Flip::Identity => unreachable!(),
        Flip::Horizontal => (true, false),
        Flip::Vertical => (false, true),
        Flip::Both => (true, true),
    };
    for y in 0..h {
        let sy = if fy { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if fx { w - 1 - x } else { x };
            out[y * w + x] = src[sy * w + sx];
        }
    }
    Tensor::new(tensor.shape().to_vec(), out).unwrap()
}

/// Rotation about the image center followed by a translation, with
/// bilinear (image) or nearest (mask) resampling and zero fill outside
/// the frame.
fn resample<S: Scalar>(
    src: &Tensor<S>,
    angle_deg: f64,
    dx: i64,
    dy: i64,
    nearest: bool,
) -> Tensor<S> {
    let (_, _, h, w) = src.dims4().expect("samples are 1x1xHxW");
    let data = src.data();
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![S::zero(); data.len()];
    for y in 0..h {
        for x in 0..w {
            // invert translate, then invert rotate
            let px = x as f64 - dx as f64 - cx;
            let py = y as f64 - dy as f64 - cy;
            let xs = cos * px + sin * py + cx;
            let ys = -sin * px + cos * py + cy;
            let v = if nearest {
                let xn = xs.round();
                let yn = ys.round();
                if xn >= 0.0 && xn < w as f64 && yn >= 0.0 && yn < h as f64 {
                    data[yn as usize * w + xn as usize].to_f64()
                } else {
                    0.0
                }
            } else {
                bilinear(data, h, w, xs, ys)
            };
            out[y * w + x] = S::from_f64(v);
        }
    }
    Tensor::new(src.shape().to_vec(), out).unwrap()
}

/// Bilinear sample with zero fill for out-of-frame corners.
fn bilinear<S: Scalar>(data: &[S], h: usize, w: usize, xs: f64, ys: f64) -> f64 {
    let x0 = xs.floor();
    let y0 = ys.floor();
    let fx = xs - x0;
    let fy = ys - y0;
    let mut acc = 0.0;
    for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let x = x0 + ox;
            let y = y0 + oy;
            if x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64 {
                acc += wy * wx * data[y as usize * w + x as usize].to_f64();
            }
        }
    }
    acc
}

/// Expands one sample into its full augmentation grid. Variants are
/// ordered flip-major, then rotation, then y offset, then x offset, and
/// named `<id>_a<index>`; masks are re-binarized at 0.5 after resampling.
pub fn augment<S: Scalar>(sample: &Sample<S>, spec: &AugmentationSpec) -> Result<Vec<Sample<S>>> {
    spec.validate()?;
    let rotations = spec.rotations();

    struct GridPoint {
        index: usize,
        flip_idx: usize,
        angle: f64,
        dx: i64,
        dy: i64,
    }
    let mut grid = Vec::with_capacity(spec.variant_count());
    for flip_idx in 0..spec.flips.len() {
        for &angle in &rotations {
            for &dy in &spec.offsets_y {
                for &dx in &spec.offsets_x {
                    grid.push(GridPoint {
                        index: grid.len(),
                        flip_idx,
                        angle,
                        dx,
                        dy,
                    });
                }
            }
        }
    }

    let flipped: Vec<(Tensor<S>, Tensor<S>)> = spec
        .flips
        .iter()
        .map(|&f| {
            (
                flip_tensor(&sample.image, f),
                flip_tensor(sample.mask.values(), f),
            )
        })
        .collect();

    grid.par_iter()
        .map(|point| {
            let (image_f, mask_f) = &flipped[point.flip_idx];
            let id = format!("{}_a{:04}", sample.id, point.index);
            let (image, mask) = if point.angle == 0.0 && point.dx == 0 && point.dy == 0 {
                (image_f.clone(), mask_f.clone())
            } else {
                let image = resample(image_f, point.angle, point.dx, point.dy, false);
                let mask = resample(mask_f, point.angle, point.dx, point.dy, true);
                let mask = Tensor::new(
                    mask.shape().to_vec(),
                    mask.data()
                        .iter()
                        .map(|&v| {
                            if v.to_f64() >= 0.5 {
                                S::one()
                            } else {
                                S::zero()
                            }
                        })
                        .collect(),
                )?;
                (image, mask)
            };
            Sample::new(id, image, GroundTruthMask::new(mask)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_4x6() -> Sample<f32> {
        let mut image = Tensor::zeros(vec![1, 1, 4, 6]);
        let mut mask = Tensor::zeros(vec![1, 1, 4, 6]);
        for i in 0..24 {
            image.data_mut()[i] = (i as f32) / 24.0;
            mask.data_mut()[i] = ((i % 3) == 0) as u8 as f32;
        }
        Sample::new("t", image, GroundTruthMask::new(mask).unwrap()).unwrap()
    }

    #[test]
    fn ph2_spec_yields_exactly_900_variants() {
        let spec = AugmentationSpec::ph2();
        assert_eq!(spec.rotations().len(), 9);
        assert_eq!(spec.variant_count(), 900);
        let variants = augment(&sample_4x6(), &spec).unwrap();
        assert_eq!(variants.len(), 900);
    }

    #[test]
    fn drive_spec_yields_exactly_1300_variants() {
        let spec = AugmentationSpec::drive();
        assert_eq!(spec.rotations().len(), 13);
        assert_eq!(spec.variant_count(), 1_300);
        let variants = augment(&sample_4x6(), &spec).unwrap();
        assert_eq!(variants.len(), 1_300);
    }

    #[test]
    fn identity_spec_reproduces_the_input_bit_exactly() {
        let sample = sample_4x6();
        let variants = augment(&sample, &AugmentationSpec::identity()).unwrap();
        assert_eq!(variants.len(), 1);
        assert!(variants[0].image.bit_eq(&sample.image));
        assert!(variants[0].mask.values().bit_eq(sample.mask.values()));
        assert_eq!(variants[0].id, "t_a0000");
    }

    #[test]
    fn flipping_twice_recovers_the_original() {
        let sample = sample_4x6();
        for flip in Flip::ALL {
            let once = flip_tensor(&sample.image, flip);
            let twice = flip_tensor(&once, flip);
            assert!(twice.bit_eq(&sample.image), "{flip:?} is not an involution");
        }
    }

    #[test]
    fn zero_rotation_zero_translation_identity_flip_is_identity() {
        let sample = sample_4x6();
        // force the resampling path by checking it directly
        let image = resample(&sample.image, 0.0, 0, 0, false);
        for (a, b) in image.data().iter().zip(sample.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn augmented_masks_stay_binary_and_images_stay_in_range() {
        let spec = AugmentationSpec {
            flips: vec![Flip::Identity, Flip::Horizontal],
            rotation_min_deg: -8.0,
            rotation_max_deg: 8.0,
            rotation_step_deg: 8.0,
            offsets_x: vec![-2, 0, 2],
            offsets_y: vec![0, 1],
        };
        let variants = augment(&sample_4x6(), &spec).unwrap();
        assert_eq!(variants.len(), 2 * 3 * 3 * 2);
        for v in &variants {
            assert!(v.mask.values().data().iter().all(|&m| m == 0.0 || m == 1.0));
            assert!(v.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn translation_shifts_content_and_fills_with_zero() {
        let mut image = Tensor::zeros(vec![1, 1, 4, 4]);
        image.data_mut()[5] = 1.0; // (y=1, x=1)
        let shifted = resample(&image, 0.0, 2, 1, false);
        assert!((shifted.data()[2 * 4 + 3] - 1.0).abs() < 1e-6); // now (y=2, x=3)
        assert!(shifted.data()[5].abs() < 1e-6);
        // content shifted past the frame vanishes
        let gone = resample(&image, 0.0, 10, 0, false);
        assert!(gone.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn asymmetric_rotation_range_is_rejected() {
        let mut spec = AugmentationSpec::ph2();
        spec.rotation_min_deg = -12.0; // [-12, 16] step 4 is asymmetric
        assert!(spec.validate().is_err());

        let mut no_zero = AugmentationSpec::ph2();
        no_zero.rotation_min_deg = -14.0;
        no_zero.rotation_max_deg = 14.0;
        // [-14, -10, ..., 14] skips 0
        assert!(no_zero.validate().is_err());
    }
}
