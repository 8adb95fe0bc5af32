use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, StereoSample};
use crate::error::{Error, Result};

pub const CHROMATIC_RANGE: (f32, f32) = (0.8, 1.2);
pub const Y_OFFSET_RANGE: f32 = 2.0;
/// Patch size range `(height, width)` for asymmetric masking.
pub const MASK_PATCH_MIN: (usize, usize) = (40, 40);
pub const MASK_PATCH_MAX: (usize, usize) = (120, 180);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    SymmetricChromatic,
    AsymmetricChromatic,
    YOffset,
    VerticalFlip,
    AsymmetricMask,
}

impl std::str::FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric_chromatic" => Ok(AugmentKind::SymmetricChromatic),
            "asymmetric_chromatic" => Ok(AugmentKind::AsymmetricChromatic),
            "y_offset" => Ok(AugmentKind::YOffset),
            "vertical_flip" => Ok(AugmentKind::VerticalFlip),
            "asymmetric_mask" => Ok(AugmentKind::AsymmetricMask),
            other => Err(Error::Config(format!("unknown augmentation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChromaticFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub gamma: f32,
}

impl ChromaticFactors {
    pub const IDENTITY: ChromaticFactors = ChromaticFactors {
        brightness: 1.0,
        contrast: 1.0,
        gamma: 1.0,
    };

    fn random(rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = CHROMATIC_RANGE;
        ChromaticFactors {
            brightness: rng.gen_range(lo..=hi),
            contrast: rng.gen_range(lo..=hi),
            gamma: rng.gen_range(lo..=hi),
        }
    }
}

/// Gamma, then contrast about mid-gray, then brightness, clamped to `[0, 1]`.
pub fn chromatic(image: &Image, f: ChromaticFactors) -> Image {
    image.map(|x| {
        let x = x.powf(f.gamma);
        let x = x * f.contrast + (1.0 - f.contrast) * 0.5;
        (x * f.brightness).clamp(0.0, 1.0)
    })
}

/// Vertical shift by `dy` pixels with linear interpolation and edge clamping.
fn shift_rows(image: &Image, dy: f32) -> Image {
    let h = image.height;
    Image::from_fn(h, image.width, image.channels, |y, x, c| {
        let src = (y as f32 - dy).clamp(0.0, (h - 1) as f32);
        let y0 = src.floor() as usize;
        let t = src - y0 as f32;
        let a = image.get(y0, x, c);
        if t == 0.0 {
            a
        } else {
            a * (1.0 - t) + image.get(y0 + 1, x, c) * t
        }
    })
}

/// Applies one augmentation; deterministic given `seed`.
///
/// Only the vertical flip touches ground truth (all maps are flipped). The
/// others alter images only: y-offset and masking act on the right view.
pub fn augment(sample: &StereoSample, kind: AugmentKind, seed: u64) -> Result<StereoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    match kind {
        AugmentKind::SymmetricChromatic => {
            let f = ChromaticFactors::random(&mut rng);
            out.left = chromatic(&sample.left, f);
            out.right = chromatic(&sample.right, f);
        }
        AugmentKind::AsymmetricChromatic => {
            out.left = chromatic(&sample.left, ChromaticFactors::random(&mut rng));
            out.right = chromatic(&sample.right, ChromaticFactors::random(&mut rng));
        }
        AugmentKind::YOffset => {
            let dy = rng.gen_range(-Y_OFFSET_RANGE..=Y_OFFSET_RANGE);
            out.right = shift_rows(&sample.right, dy);
        }
        AugmentKind::VerticalFlip => {
            out.left = sample.left.flip_vertical();
            out.right = sample.right.flip_vertical();
            out.disp_left = sample.disp_left.as_ref().map(|d| d.flip_vertical());
            out.disp_right = sample.disp_right.as_ref().map(|d| d.flip_vertical());
            out.occlusion = sample.occlusion.as_ref().map(|m| m.flip_vertical());
            out.valid = sample.valid.flip_vertical();
        }
        AugmentKind::AsymmetricMask => {
            let (h, w) = (sample.height(), sample.width());
            let ph = rng.gen_range(MASK_PATCH_MIN.0..=MASK_PATCH_MAX.0).min(h);
            let pw = rng.gen_range(MASK_PATCH_MIN.1..=MASK_PATCH_MAX.1).min(w);
            let y0 = rng.gen_range(0..=h - ph);
            let x0 = rng.gen_range(0..=w - pw);
            let mean = sample.right.channel_means();
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    for (c, &m) in mean.iter().enumerate() {
                        out.right.set(y, x, c, m);
                    }
                }
            }
        }
    }
    Ok(out)
}
