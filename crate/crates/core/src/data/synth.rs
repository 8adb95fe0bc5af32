//! Fronto-parallel layered scenes rendered into both views with a z-buffer.
//!
//! Each layer is a textured rectangle (or the unbounded background plane) at
//! one constant disparity. Texture is a function of the left-view position of
//! the surface point, so a visible point has the same colour in both views.

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DispMap, Image, Mask, StereoSample};
use crate::error::{Error, Result};

pub const MAX_LAYERS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    #[default]
    Noise,
    Gradient,
    Checker,
    /// A random kind per layer.
    Mixed,
}

impl std::str::FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(TextureKind::Noise),
            "gradient" => Ok(TextureKind::Gradient),
            "checker" => Ok(TextureKind::Checker),
            "mixed" => Ok(TextureKind::Mixed),
            other => Err(Error::Config(format!("unknown texture kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    /// Lattice value noise at two scales (lattice spacings in pixels) around
    /// a base colour.
    Noise {
        seed: u64,
        base: [f32; 3],
        fine: f64,
        coarse: f64,
    },
    Gradient { origin: [f32; 3], dx: [f32; 3], dy: [f32; 3] },
    Checker { a: [f32; 3], b: [f32; 3], period: f64 },
    Solid([f32; 3]),
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, c: u64) -> f64 {
    let h = mix(seed ^ mix((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix((iy as u64) ^ (c << 58))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear interpolation of lattice values; exact lattice value at integer
/// coordinates.
fn value_noise(seed: u64, u: f64, v: f64, c: u64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (tu, tv) = (u - fu, v - fv);
    let (iu, iv) = (fu as i64, fv as i64);
    let top = lattice(seed, iu, iv, c) * (1.0 - tu) + lattice(seed, iu + 1, iv, c) * tu;
    if tv == 0.0 {
        return top;
    }
    let bottom = lattice(seed, iu, iv + 1, c) * (1.0 - tu) + lattice(seed, iu + 1, iv + 1, c) * tu;
    top * (1.0 - tv) + bottom * tv
}

const FINE_LO: f64 = 1.5;
const FINE_HI: f64 = 3.0;

impl Texture {
    pub fn random(kind: TextureKind, rng: &mut ChaCha8Rng) -> Self {
        let colour = |rng: &mut ChaCha8Rng| [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let kind = match kind {
            TextureKind::Mixed => [TextureKind::Noise, TextureKind::Gradient, TextureKind::Checker][rng.gen_range(0..3)],
            k => k,
        };
        match kind {
            TextureKind::Noise | TextureKind::Mixed => Texture::Noise {
                seed: rng.gen(),
                base: colour(rng),
                fine: rng.gen_range(FINE_LO..FINE_HI),
                coarse: rng.gen_range(4.0..12.0),
            },
            TextureKind::Gradient => {
                let mut slope = || [0.0f32; 3].map(|_| rng.gen_range(-0.02..0.02));
                Texture::Gradient {
                    dx: slope(),
                    dy: slope(),
                    origin: colour(rng),
                }
            }
            TextureKind::Checker => Texture::Checker {
                a: colour(rng),
                b: colour(rng),
                period: rng.gen_range(3..10) as f64,
            },
        }
    }

    /// Colour of the surface point at left-view position `(u, v)`.
    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        let clamp = |x: f64| x.clamp(0.0, 1.0) as f32;
        match self {
            Texture::Noise {
                seed,
                base,
                fine,
                coarse,
            } => [0, 1, 2].map(|c| {
                let fine = value_noise(*seed, u / fine, v / fine, c);
                let smooth = value_noise(seed ^ 0x5bd1_e995, u / coarse, v / coarse, c);
                clamp(0.3 * base[c as usize] as f64 + 0.45 * fine + 0.25 * smooth)
            }),
            Texture::Gradient { origin, dx, dy } => {
                [0, 1, 2].map(|c| clamp(origin[c] as f64 + dx[c] as f64 * u + dy[c] as f64 * v))
            }
            Texture::Checker { a, b, period } => {
                let parity = ((u / period).floor() + (v / period).floor()).rem_euclid(2.0);
                if parity == 0.0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Solid(c) => *c,
        }
    }
}

/// Half-open `[x0, x1) x [y0, y1)` in left-view pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `None` is the unbounded plane.
    pub rect: Option<Rect>,
    pub disparity: f64,
    pub texture: Texture,
}

impl Layer {
    fn covers(&self, x: f64, y: f64) -> bool {
        self.rect.is_none_or(|r| r.contains(x, y))
    }
}

/// Nearest layer covering the surface point seen at `(x, y)` in the left view
/// (`right = false`) or the right view. `order` lists layer indices by
/// decreasing disparity.
fn front(layers: &[Layer], order: &[usize], x: f64, y: f64, right: bool) -> Option<usize> {
    order.iter().copied().find(|&i| {
        let l = &layers[i];
        let xl = if right { x + l.disparity } else { x };
        l.covers(xl, y)
    })
}

/// Renders both views, both disparity maps and the exact left-view
/// occlusion of a layered scene.
pub fn render_layers(height: usize, width: usize, layers: &[Layer]) -> Result<StereoSample> {
    if !layers.iter().any(|l| l.rect.is_none()) {
        return Err(Error::Config("a scene needs an unbounded background layer".into()));
    }
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| layers[b].disparity.total_cmp(&layers[a].disparity));
    if order.windows(2).any(|p| layers[p[0]].disparity == layers[p[1]].disparity) {
        return Err(Error::Config("layer disparities must be distinct".into()));
    }
    if layers.iter().any(|l| !(l.disparity >= 0.0)) {
        return Err(Error::Config("layer disparities must be non-negative".into()));
    }

    let mut left = Image::filled(height, width, 3, 0.0);
    let mut right = Image::filled(height, width, 3, 0.0);
    let mut disp_left = DispMap::filled(height, width, 1, 0.0);
    let mut disp_right = DispMap::filled(height, width, 1, 0.0);
    let mut occlusion = Mask::filled(height, width, 1, 0);
    for y in 0..height {
        let yf = y as f64;
        for x in 0..width {
            let xf = x as f64;
            let l = front(layers, &order, xf, yf, false).expect("background covers everything");
            let layer = &layers[l];
            for (c, v) in layer.texture.sample(xf, yf).into_iter().enumerate() {
                left.set(y, x, c, v);
            }
            disp_left.set(y, x, 0, layer.disparity as f32);
            let xr = xf - layer.disparity;
            let visible = xr >= 0.0 && xr <= (width - 1) as f64 && front(layers, &order, xr, yf, true) == Some(l);
            occlusion.set(y, x, 0, u8::from(!visible));

            let r = front(layers, &order, xf, yf, true).expect("background covers everything");
            let layer = &layers[r];
            for (c, v) in layer.texture.sample(xf + layer.disparity, yf).into_iter().enumerate() {
                right.set(y, x, c, v);
            }
            disp_right.set(y, x, 0, layer.disparity as f32);
        }
    }
    Ok(StereoSample {
        left,
        right,
        disp_left: Some(disp_left),
        disp_right: Some(disp_right),
        occlusion: Some(occlusion),
        valid: Mask::filled(height, width, 1, 1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Background plus foreground rectangles.
    pub layers: usize,
    /// Largest layer disparity in pixels.
    pub d_max: f64,
    pub texture: TextureKind,
    /// Draw real-valued disparities instead of distinct integers.
    pub fractional: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 64,
            width: 128,
            layers: 4,
            d_max: 24.0,
            texture: TextureKind::Noise,
            fractional: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(1..=MAX_LAYERS).contains(&self.layers) {
            return Err(Error::Config(format!("layers must be in 1..={MAX_LAYERS}, got {}", self.layers)));
        }
        if !(self.d_max >= 0.0) || self.d_max >= self.width as f64 / 4.0 {
            return Err(Error::Config(format!(
                "d_max must satisfy 0 <= d_max < width/4 = {}, got {}",
                self.width as f64 / 4.0,
                self.d_max
            )));
        }
        if !self.fractional && (self.d_max.floor() as usize + 1) < self.layers {
            return Err(Error::Config(format!(
                "{} layers need {} distinct integer disparities but d_max is {}",
                self.layers, self.layers, self.d_max
            )));
        }
        Ok(())
    }

    /// Random layer stack: distinct disparities, the smallest on the
    /// background.
    pub fn layers(&self) -> Result<Vec<Layer>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut disparities: Vec<f64> = if self.fractional {
            let mut d: Vec<f64> = Vec::with_capacity(self.layers);
            while d.len() < self.layers {
                let v = rng.gen_range(0.0..=self.d_max);
                if d.iter().all(|&o| (o - v).abs() >= 1.0) || self.d_max < self.layers as f64 {
                    d.push(v);
                }
            }
            d
        } else {
            sample(&mut rng, self.d_max.floor() as usize + 1, self.layers)
                .into_iter()
                .map(|d| d as f64)
                .collect()
        };
        disparities.sort_by(f64::total_cmp);
        let (h, w) = (self.height as f64, self.width as f64);
        let mut layers = Vec::with_capacity(self.layers);
        for (i, &d) in disparities.iter().enumerate() {
            let texture = Texture::random(self.texture, &mut rng);
            let rect = (i > 0).then(|| {
                let rw = (rng.gen_range(0.15..0.5) * w).round().max(1.0);
                let rh = (rng.gen_range(0.2..0.6) * h).round().max(1.0);
                let x0 = rng.gen_range(0.0..=(w - rw)).round() + d;
                let y0 = rng.gen_range(0.0..=(h - rh)).round();
                Rect {
                    x0: x0.min(w - 1.0),
                    y0,
                    x1: (x0 + rw).min(w),
                    y1: y0 + rh,
                }
            });
            layers.push(Layer { rect, disparity: d, texture });
        }
        Ok(layers)
    }
}

/// Deterministic random scene for `spec`.
pub fn synth_scene(spec: &SceneSpec) -> Result<StereoSample> {
    render_layers(spec.height, spec.width, &spec.layers()?)
}
