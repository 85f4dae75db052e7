//! Seeded input perturbations.
//!
//! Image-shaped inputs (flat, channel-planar `C×H×W` rows as in the CIFAR-10
//! binary layout) support horizontal flips and pixel shifts. Shifts fill
//! vacated pixels with zeros, so shifting by `k` then `−k` restores only the
//! interior. Plain feature vectors have no spatial structure; they use
//! additive Gaussian jitter instead.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::Matrix;
use crate::rng::{derive_seed, rng_for};
use crate::{Error, Result};

/// Layout of a flat image row: `channels` planes of `height × width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const CIFAR10: ImageShape = ImageShape {
        channels: 3,
        height: 32,
        width: 32,
    };

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    Identity,
    /// Horizontal mirror.
    Flip,
    /// Shift by `round(fraction · width)` pixels in a seeded cardinal
    /// direction, drawn per sample.
    Shift {
        fraction: f64,
    },
    /// Additive zero-mean Gaussian noise.
    Jitter {
        stddev: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub shape: Option<ImageShape>,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            kind: AugmentKind::Identity,
            shape: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AugmentKind::Shift { fraction } if !(0.0..1.0).contains(&fraction) => Err(Error::Config(format!(
                "shift fraction must be in [0, 1), got {fraction}"
            ))),
            AugmentKind::Jitter { stddev } if !(stddev.is_finite() && stddev >= 0.0) => Err(Error::Config(format!(
                "jitter stddev must be non-negative, got {stddev}"
            ))),
            _ => Ok(()),
        }
    }
}

fn image_shape(spec: &AugmentSpec, inputs: &Matrix) -> Result<ImageShape> {
    let shape = spec
        .shape
        .ok_or_else(|| Error::Shape(format!("{:?} needs image shape metadata", spec.kind)))?;
    if shape.len() != inputs.ncols() {
        return Err(Error::Shape(format!(
            "image shape {}x{}x{} does not match {} input columns",
            shape.channels,
            shape.height,
            shape.width,
            inputs.ncols()
        )));
    }
    Ok(shape)
}

/// Mirrors every image row left to right.
pub fn flip_horizontal(inputs: &Matrix, shape: ImageShape) -> Matrix {
    let mut out = inputs.clone();
    let w = shape.width;
    for mut row in out.outer_iter_mut() {
        let slice = row.as_slice_mut().expect("rows of an owned matrix are contiguous");
        for line in slice.chunks_mut(w) {
            line.reverse();
        }
    }
    out
}

fn shift_row(src: &[f64], dst: &mut [f64], shape: ImageShape, dx: isize, dy: isize) {
    let (h, w) = (shape.height as isize, shape.width as isize);
    dst.fill(0.0);
    for c in 0..shape.channels {
        let plane = c * shape.height * shape.width;
        for y in 0..h {
            let sy = y - dy;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if (0..w).contains(&sx) {
                    dst[plane + (y * w + x) as usize] = src[plane + (sy * w + sx) as usize];
                }
            }
        }
    }
}

/// Moves image content by `dx` pixels right and `dy` pixels down; vacated
/// pixels become zero.
pub fn shift_image(inputs: &Matrix, shape: ImageShape, dx: isize, dy: isize) -> Result<Matrix> {
    if shape.len() != inputs.ncols() {
        return Err(Error::Shape(format!(
            "image shape does not match {} input columns",
            inputs.ncols()
        )));
    }
    let mut out = Matrix::zeros(inputs.dim());
    for (src, mut dst) in inputs.outer_iter().zip(out.outer_iter_mut()) {
        let src = src.to_vec();
        shift_row(&src, dst.as_slice_mut().expect("contiguous"), shape, dx, dy);
    }
    Ok(out)
}

/// Applies `spec` to every row of `inputs`. Output has the input's shape.
pub fn apply(spec: &AugmentSpec, inputs: &Matrix, seed: u64) -> Result<Matrix> {
    spec.validate()?;
    match spec.kind {
        AugmentKind::Identity => Ok(inputs.clone()),
        AugmentKind::Flip => {
            let shape = image_shape(spec, inputs)?;
            Ok(flip_horizontal(inputs, shape))
        }
        AugmentKind::Shift { fraction } => {
            let shape = image_shape(spec, inputs)?;
            let step = (fraction * shape.width as f64).round() as isize;
            if step == 0 {
                return Ok(inputs.clone());
            }
            let mut rng = rng_for(seed, &[]);
            let mut out = Matrix::zeros(inputs.dim());
            for (src, mut dst) in inputs.outer_iter().zip(out.outer_iter_mut()) {
                let (dx, dy) = match rng.random_range(0..4) {
                    0 => (step, 0),
                    1 => (-step, 0),
                    2 => (0, step),
                    _ => (0, -step),
                };
                let src = src.to_vec();
                shift_row(&src, dst.as_slice_mut().expect("contiguous"), shape, dx, dy);
            }
            Ok(out)
        }
        AugmentKind::Jitter { stddev } => {
            if stddev == 0.0 {
                return Ok(inputs.clone());
            }
            let normal = Normal::new(0.0, stddev).expect("validated stddev");
            let mut rng = rng_for(seed, &[]);
            Ok(inputs.mapv(|v| v + normal.sample(&mut rng)))
        }
    }
}

/// The perturbation family used for consistency views and pseudo-labeling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AugmentFamily {
    Identity,
    /// Shift and flip on image rows.
    Image {
        shape: ImageShape,
        shift_fraction: f64,
    },
    /// Gaussian jitter on feature vectors.
    Jitter {
        stddev: f64,
    },
}

impl AugmentFamily {
    /// Jitter with `scale ×` the mean per-feature standard deviation of
    /// `inputs`.
    pub fn jitter_for(inputs: &Matrix, scale: f64) -> Self {
        let n = inputs.nrows().max(1) as f64;
        let mean = inputs.sum_axis(ndarray::Axis(0)) / n;
        let mut var = vec![0.0; inputs.ncols()];
        for row in inputs.outer_iter() {
            for (j, v) in row.iter().enumerate() {
                var[j] += (v - mean[j]).powi(2) / n;
            }
        }
        let feature_std = var.iter().map(|v| v.sqrt()).sum::<f64>() / var.len().max(1) as f64;
        AugmentFamily::Jitter {
            stddev: scale * feature_std,
        }
    }

    /// The two views `(π1, π2)` compared by the consistency loss: shift and
    /// flip for images, two independently seeded jitters otherwise.
    pub fn consistency_views(&self) -> (AugmentSpec, AugmentSpec) {
        match *self {
            AugmentFamily::Identity => (AugmentSpec::identity(), AugmentSpec::identity()),
            AugmentFamily::Image { shape, shift_fraction } => (
                AugmentSpec {
                    kind: AugmentKind::Shift {
                        fraction: shift_fraction,
                    },
                    shape: Some(shape),
                },
                AugmentSpec {
                    kind: AugmentKind::Flip,
                    shape: Some(shape),
                },
            ),
            AugmentFamily::Jitter { stddev } => {
                let spec = AugmentSpec {
                    kind: AugmentKind::Jitter { stddev },
                    shape: None,
                };
                (spec, spec)
            }
        }
    }

    /// One perturbed copy. For images, odd copies are flipped before the
    /// seeded shift so the set mixes both perturbations.
    fn view(&self, inputs: &Matrix, index: usize, seed: u64) -> Result<Matrix> {
        match *self {
            AugmentFamily::Identity => Ok(inputs.clone()),
            AugmentFamily::Image { shape, shift_fraction } => {
                let shift = AugmentSpec {
                    kind: AugmentKind::Shift {
                        fraction: shift_fraction,
                    },
                    shape: Some(shape),
                };
                if index % 2 == 1 {
                    image_shape(&shift, inputs)?;
                    apply(&shift, &flip_horizontal(inputs, shape), seed)
                } else {
                    apply(&shift, inputs, seed)
                }
            }
            AugmentFamily::Jitter { stddev } => apply(
                &AugmentSpec {
                    kind: AugmentKind::Jitter { stddev },
                    shape: None,
                },
                inputs,
                seed,
            ),
        }
    }
}

/// `count` perturbed copies of `inputs`, each with its own sub-seed.
pub fn augmentation_set(inputs: &Matrix, count: usize, family: &AugmentFamily, seed: u64) -> Result<Vec<Matrix>> {
    if count == 0 {
        return Err(Error::Precondition("augmentation count must be at least 1".into()));
    }
    (0..count)
        .map(|i| family.view(inputs, i, derive_seed(seed, &[i as u64])))
        .collect()
}
