//! Synthetic corpora with analytically known masks: a desk-scale stand-in
//! for the real dermoscopy/retina datasets.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics::GroundTruthMask;
use crate::tensor::{Scalar, Tensor};

use super::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Ring,
    /// Star-shaped region with a softened, low-contrast boundary plus
    /// background shading and noise.
    Blob,
}

impl ShapeFamily {
    pub fn parse(name: &str) -> Option<ShapeFamily> {
        match name {
            "disk" => Some(ShapeFamily::Disk),
            "ring" => Some(ShapeFamily::Ring),
            "blob" => Some(ShapeFamily::Blob),
            _ => None,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            ShapeFamily::Disk => "disk",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Blob => "blob",
        }
    }
}

struct Shape {
    cx: f64,
    cy: f64,
    radius: f64,
    inner: f64,
    harmonics: [(f64, f64); 3], // (amplitude, phase) for k = 2, 3, 4
}

impl Shape {
    /// Signed distance-ish inside measure: positive inside, in pixels.
    fn inside_margin(&self, family: ShapeFamily, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let d = (dx * dx + dy * dy).sqrt();
        match family {
            ShapeFamily::Disk => self.radius - d,
            ShapeFamily::Ring => (self.radius - d).min(d - self.inner),
            ShapeFamily::Blob => {
                let phi = dy.atan2(dx);
                let mut r = self.radius;
                for (k, (amp, phase)) in self.harmonics.iter().enumerate() {
                    r += self.radius * amp * ((k as f64 + 2.0) * phi + phase).cos();
                }
                r - d
            }
        }
    }
}

/// Deterministic corpus: `n` samples at `height x width`, one RNG stream
/// per sample so the same seed always reproduces the same data.
pub fn synth_corpus<S: Scalar>(
    n: usize,
    height: usize,
    width: usize,
    family: ShapeFamily,
    seed: u64,
) -> Result<Vec<Sample<S>>> {
    (0..n)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64 + 1);
            generate(&mut rng, index, height, width, family)
        })
        .collect()
}

fn generate<S: Scalar>(
    rng: &mut ChaCha8Rng,
    index: usize,
    height: usize,
    width: usize,
    family: ShapeFamily,
) -> Result<Sample<S>> {
    let min_dim = height.min(width) as f64;
    let shape = Shape {
        cx: rng.random_range(0.35..0.65) * width as f64,
        cy: rng.random_range(0.35..0.65) * height as f64,
        radius: rng.random_range(0.18..0.30) * min_dim,
        inner: rng.random_range(0.08..0.12) * min_dim,
        harmonics: [
            (rng.random_range(-0.12..0.12), rng.random_range(0.0..TAU)),
            (rng.random_range(-0.08..0.08), rng.random_range(0.0..TAU)),
            (rng.random_range(-0.05..0.05), rng.random_range(0.0..TAU)),
        ],
    };

    let background = rng.random_range(0.35..0.50);
    let contrast = match family {
        ShapeFamily::Blob => rng.random_range(0.10..0.18),
        _ => rng.random_range(0.25..0.40),
    };
    let boundary_width = match family {
        ShapeFamily::Blob => 2.0,
        _ => 0.75,
    };
    let shade_x = rng.random_range(-0.03..0.03);
    let shade_y = rng.random_range(-0.03..0.03);
    let noise = rng.random_range(0.02..0.035);

    let mut image = vec![S::zero(); height * width];
    let mut mask = vec![S::zero(); height * width];
    for y in 0..height {
        for x in 0..width {
            let margin = shape.inside_margin(family, x as f64, y as f64);
            if margin >= 0.0 {
                mask[y * width + x] = S::one();
            }
            let soft = smoothstep(margin / boundary_width);
            let shading = shade_x * (x as f64 / width as f64 - 0.5)
                + shade_y * (y as f64 / height as f64 - 0.5);
            let v = background + shading + contrast * soft + rng.random_range(-noise..noise);
            image[y * width + x] = S::from_f64(v.clamp(0.0, 1.0));
        }
    }

    Sample::new(
        format!("{}_{index:03}", family.tag()),
        Tensor::new(vec![1, 1, height, width], image)?,
        GroundTruthMask::new(Tensor::new(vec![1, 1, height, width], mask)?)?,
    )
}

/// 0 below -1, 1 above +1, smooth ramp in between.
fn smoothstep(t: f64) -> f64 {
    let t = ((t + 1.0) / 2.0).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}
