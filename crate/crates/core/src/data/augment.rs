use serde::{Deserialize, Serialize};

use super::Sample;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest translation used by [`AugmentOp::CropPad`].
pub const MAX_SHIFT: i64 = 4;

/// Label-preserving geometric transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Quarter turn clockwise. Non-square images are turned by a half turn
    /// instead so the shape is preserved.
    Rot90,
    /// Zero-pad by up to 4 pixels and crop back, i.e. a random translation.
    CropPad,
}

impl std::str::FromStr for AugmentOp {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "hflip" => Ok(AugmentOp::HFlip),
            "vflip" => Ok(AugmentOp::VFlip),
            "rot90" => Ok(AugmentOp::Rot90),
            "crop_pad" => Ok(AugmentOp::CropPad),
            other => Err(crate::error::Error::InvalidConfig(format!(
                "unknown augmentation {other:?} (expected hflip, vflip, rot90 or crop_pad)"
            ))),
        }
    }
}

fn remap(image: &Tensor<f32>, f: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Tensor<f32> {
    let &[h, w, c] = image.shape() else { unreachable!("images are H×W×C") };
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = f(y, x) {
                let d = (y * w + x) * c;
                let s = (sy * w + sx) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(image.shape(), out).unwrap()
}

fn apply(image: &Tensor<f32>, op: AugmentOp, rng: &mut Rng) -> Tensor<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    match op {
        AugmentOp::HFlip => remap(image, |y, x| Some((y, w - 1 - x))),
        AugmentOp::VFlip => remap(image, |y, x| Some((h - 1 - y, x))),
        AugmentOp::Rot90 if h == w => remap(image, |y, x| Some((w - 1 - x, y))),
        AugmentOp::Rot90 => remap(image, |y, x| Some((h - 1 - y, w - 1 - x))),
        AugmentOp::CropPad => {
            let dy = rng.int_inclusive(-MAX_SHIFT, MAX_SHIFT);
            let dx = rng.int_inclusive(-MAX_SHIFT, MAX_SHIFT);
            remap(image, |y, x| {
                let sy = y as i64 - dy;
                let sx = x as i64 - dx;
                ((0..h as i64).contains(&sy) && (0..w as i64).contains(&sx)).then_some((sy as usize, sx as usize))
            })
        }
    }
}

/// Applies every op in order. Only `CropPad` draws from `rng`.
pub fn augment(sample: &Sample, ops: &[AugmentOp], rng: &mut Rng) -> Sample {
    let mut image = sample.image.clone();
    for &op in ops {
        image = apply(&image, op, rng);
    }
    Sample { image, ..sample.clone() }
}

/// Applies each op independently with probability 1/2.
pub fn random_augment(sample: &Sample, ops: &[AugmentOp], rng: &mut Rng) -> Sample {
    let chosen: Vec<AugmentOp> = ops.iter().copied().filter(|_| rng.bernoulli(0.5)).collect();
    augment(sample, &chosen, rng)
}
