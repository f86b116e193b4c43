//! Synthetic segmentation data: bright filled ellipses on a dark, noisy
//! background, with the exact ellipse union as the mask.
//!
//! Sample `i` depends only on `(seed, i)`, so any index range can be
//! generated independently.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Square side length; a power of two, at least 16.
    pub size: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Index of the first generated sample.
    #[serde(default)]
    pub first: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 64,
            size: 32,
            blobs_min: 1,
            blobs_max: 3,
            noise_std: 0.05,
            seed: 0,
            first: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_power_of_two() {
            return Err(config_err!(
                "size must be a power of two >= 16, got {}",
                self.size
            ));
        }
        if self.blobs_min > self.blobs_max {
            return Err(config_err!(
                "blob range {}..{} is empty",
                self.blobs_min,
                self.blobs_max
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config_err!("noise_std must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Filled ellipse in pixel coordinates (`x` = column, `y` = row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// Whether the center of pixel `(row, col)` lies inside or on the boundary.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (dx, dy) = (col as f64 - self.cx, row as f64 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: usize,
    /// `[size, size]` intensities in `[0, 1]`.
    pub image: Tensor,
    /// `[size, size]` with values in `{0, 1}`.
    pub mask: Tensor,
    pub background: f64,
    pub ellipses: Vec<Ellipse>,
}

/// Generates sample `index` of the stream defined by `spec.seed`.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = Rng::stream(spec.seed, index as u64);
    let background = rng.uniform_range(0.1, 0.3);
    let blobs = rng.range_inclusive(spec.blobs_min, spec.blobs_max);
    let (axis_lo, axis_hi) = ((n as f64 / 16.0).max(1.0), n as f64 / 5.0);
    let margin = n / 8;
    let ellipses: Vec<Ellipse> = (0..blobs)
        .map(|_| Ellipse {
            cx: rng.range_inclusive(margin, n - 1 - margin) as f64,
            cy: rng.range_inclusive(margin, n - 1 - margin) as f64,
            a: rng.uniform_range(axis_lo, axis_hi),
            b: rng.uniform_range(axis_lo, axis_hi),
            theta: rng.uniform_range(0.0, std::f64::consts::PI),
            intensity: rng.uniform_range(0.55, 0.95),
        })
        .collect();

    let mut image = Tensor::full(&[n, n], background);
    let mut mask = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for c in 0..n {
            // later ellipses paint over earlier ones
            if let Some(e) = ellipses.iter().rev().find(|e| e.contains(r, c)) {
                image.set(&[r, c], e.intensity);
                mask.set(&[r, c], 1.0);
            }
        }
    }
    if spec.noise_std > 0.0 {
        for v in image.data_mut() {
            *v = (*v + spec.noise_std * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        index,
        image,
        mask,
        background,
        ellipses,
    })
}

/// Samples `first .. first + count`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (spec.first..spec.first + spec.count)
        .map(|i| generate_sample(spec, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            count: 6,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn empty_noiseless_image_is_constant() {
        let s = SyntheticSpec {
            blobs_min: 0,
            blobs_max: 0,
            noise_std: 0.0,
            ..spec()
        };
        for sample in synth_generate(&s).unwrap() {
            assert!(sample.image.data().iter().all(|&v| v == sample.background));
            assert!(sample.mask.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_and_index_addressable() {
        let a = synth_generate(&spec()).unwrap();
        assert_eq!(a, synth_generate(&spec()).unwrap());
        let tail = synth_generate(&SyntheticSpec {
            first: 4,
            count: 2,
            ..spec()
        })
        .unwrap();
        assert_eq!(&a[4..], &tail[..]);
    }

    /// Point-in-ellipse via the implicit quadratic form
    /// `A x^2 + B x y + C y^2 <= 1`, written independently of `contains`.
    fn quadratic_inside(e: &Ellipse, row: usize, col: usize) -> bool {
        let (x, y) = (col as f64 - e.cx, row as f64 - e.cy);
        let (cos, sin) = (e.theta.cos(), e.theta.sin());
        let (ia, ib) = (1.0 / (e.a * e.a), 1.0 / (e.b * e.b));
        let qa = cos * cos * ia + sin * sin * ib;
        let qb = 2.0 * cos * sin * (ia - ib);
        let qc = sin * sin * ia + cos * cos * ib;
        qa * x * x + qb * x * y + qc * y * y <= 1.0 + 1e-12
    }

    #[test]
    fn mask_is_the_ellipse_union() {
        let s = SyntheticSpec {
            count: 20,
            blobs_min: 1,
            blobs_max: 4,
            ..spec()
        };
        for sample in synth_generate(&s).unwrap() {
            let mut count = 0;
            for r in 0..s.size {
                for c in 0..s.size {
                    let inside = sample.ellipses.iter().any(|e| quadratic_inside(e, r, c));
                    assert_eq!(sample.mask.at(&[r, c]) == 1.0, inside, "pixel ({r},{c})");
                    count += inside as usize;
                }
            }
            assert!(count > 0);
            assert!(sample
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn blobs_are_brighter_than_background() {
        let s = SyntheticSpec {
            noise_std: 0.0,
            ..spec()
        };
        for sample in synth_generate(&s).unwrap() {
            for (&v, &m) in sample.image.data().iter().zip(sample.mask.data()) {
                assert_eq!(m == 1.0, v > 0.5);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(synth_generate(&SyntheticSpec { size: 24, ..spec() }).is_err());
        assert!(synth_generate(&SyntheticSpec { size: 8, ..spec() }).is_err());
        assert!(synth_generate(&SyntheticSpec {
            blobs_min: 3,
            blobs_max: 1,
            ..spec()
        })
        .is_err());
        assert!(synth_generate(&SyntheticSpec {
            noise_std: -1.0,
            ..spec()
        })
        .is_err());
    }
}
