//! Stereo samples, the synthetic scene renderer, augmentations and file
//! formats.

pub mod augment;
pub mod dataset;
pub mod pfm;
pub mod pnm;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use augment::{augment, chromatic, AugmentKind, ChromaticFactors};
pub use dataset::{Dataset, Manifest, ManifestEntry};
pub use synth::{render_layers, synth_scene, Layer, Rect, SceneSpec, Texture, TextureKind};

/// Row-major grid with `channels` interleaved values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<V> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<V>,
}

/// RGB image in `[0, 1]`.
pub type Image = Grid<f32>;
/// Single-channel float map (disparity in pixels).
pub type DispMap = Grid<f32>;
/// Binary map, 1 = set.
pub type Mask = Grid<u8>;

impl<V: Copy> Grid<V> {
    pub fn filled(height: usize, width: usize, channels: usize, value: V) -> Self {
        Grid {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<V>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidShape {
                op: "grid",
                shape: vec![height, width, channels],
                reason: format!("{} values supplied", data.len()),
            });
        }
        Ok(Grid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Grid {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> V {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: V) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map<U>(&self, f: impl Fn(V) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Grid::from_fn(self.height, self.width, self.channels, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    pub fn flip_vertical(&self) -> Self {
        Grid::from_fn(self.height, self.width, self.channels, |y, x, c| self.get(self.height - 1 - y, x, c))
    }
}

impl Grid<f32> {
    /// `[H,W]` for one channel, `[H,W,C]` otherwise.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let shape = if self.channels == 1 {
            vec![self.height, self.width]
        } else {
            vec![self.height, self.width, self.channels]
        };
        Tensor::from_fn(&shape, |i| T::of(self.data[i] as f64))
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (h, w, c) = match *t.shape() {
            [h, w] => (h, w, 1),
            [h, w, c] => (h, w, c),
            _ => {
                return Err(Error::InvalidShape {
                    op: "grid from tensor",
                    shape: t.shape().to_vec(),
                    reason: "expected [H,W] or [H,W,C]".into(),
                })
            }
        };
        Grid::from_vec(h, w, c, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.channels];
        for (i, &v) in self.data.iter().enumerate() {
            sums[i % self.channels] += v as f64;
        }
        sums.iter().map(|s| (s / self.pixels().max(1) as f64) as f32).collect()
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| if self.data[i] != 0 { T::one() } else { T::zero() })
    }

    /// Fraction of pixels on which two masks agree.
    pub fn agreement(&self, other: &Mask) -> f64 {
        let same = self.data.iter().zip(&other.data).filter(|(a, b)| (**a != 0) == (**b != 0)).count();
        same as f64 / self.data.len().max(1) as f64
    }
}

/// A rectified pair with whatever ground truth is available.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Image,
    pub right: Image,
    pub disp_left: Option<DispMap>,
    pub disp_right: Option<DispMap>,
    /// Left-view occlusion, 1 = occluded.
    pub occlusion: Option<Mask>,
    /// Pixels with ground-truth disparity.
    pub valid: Mask,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.height
    }

    pub fn width(&self) -> usize {
        self.left.width
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.left.same_size(&self.right)
            && self.left.channels == 3
            && self.right.channels == 3
            && self.valid.same_size(&self.left)
            && [&self.disp_left, &self.disp_right].iter().all(|d| d.as_ref().is_none_or(|d| d.same_size(&self.left)))
            && self.occlusion.as_ref().is_none_or(|m| m.same_size(&self.left));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidShape {
                op: "stereo sample",
                shape: vec![self.height(), self.width()],
                reason: "views, maps and masks must share one size".into(),
            })
        }
    }
}
