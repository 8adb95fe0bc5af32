//! The full network: shared feature extractor, context network, PDO and the
//! iterative OGA refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, FeaturePair};
use crate::data::{DispMap, Image};
use crate::error::{Error, Result};
use crate::nn::{conv, hwc_to_nchw, nchw_to_hwc, Initializer, ParamStore, Params, RELU_GAIN};
use crate::oga::{self, OgaConfig};
use crate::pdo::{self, CrossAttnPair};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoatConfig {
    pub attention: AttentionConfig,
    pub oga: OgaConfig,
}

impl GoatConfig {
    /// Iterations used by the smoke-scale model.
    pub const SMOKE_ITERATIONS: usize = 4;

    /// The default dimensions with the short refinement loop used for
    /// smoke training.
    pub fn smoke() -> Self {
        let mut cfg = GoatConfig::default();
        cfg.oga.iterations = Self::SMOKE_ITERATIONS;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.oga.validate()?;
        let s = self.oga.scale;
        if !s.is_power_of_two() || s < 2 {
            return Err(Error::Config(format!("scale must be a power of two >= 2, got {s}")));
        }
        if !self.attention.channels.is_multiple_of(4) || self.attention.channels == 0 {
            return Err(Error::Config(format!(
                "feature channels must be a positive multiple of 4, got {}",
                self.attention.channels
            )));
        }
        Ok(())
    }

    pub fn stride_convs(&self) -> usize {
        self.oga.scale.trailing_zeros() as usize
    }

    /// Checks that an input of `height x width` can be processed.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let s = self.oga.scale;
        if !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "image size {height}x{width} is not divisible by the feature stride {s}"
            )));
        }
        let (h, w) = (height / s, width / s);
        self.attention.validate(h, w)?;
        if h * w > self.oga.max_tokens {
            return Err(Error::Config(format!(
                "feature map {h}x{w} exceeds the global attention cap of {} positions",
                self.oga.max_tokens
            )));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct GoatOutput<T: Element = f32> {
    /// PDO disparity at feature resolution.
    pub d0: Tensor<T>,
    /// Full-resolution disparities: upsampled `d0`, then one per iteration.
    pub d_seq: Vec<Tensor<T>>,
    pub d_final: Tensor<T>,
    /// Full-resolution occlusion probability and its logits.
    pub occlusion: Tensor<T>,
    pub occlusion_logits: Tensor<T>,
    pub cattn: CrossAttnPair<T>,
}

/// `[n*s, n]` bilinear interpolation matrix (half-pixel centres, edge clamp).
fn interp_matrix<T: Element>(n: usize, s: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); n * s * n];
    for o in 0..n * s {
        let src = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let t = src - i0 as f64;
        m[o * n + i0] += T::of(1.0 - t);
        if t > 0.0 {
            m[o * n + i0 + 1] += T::of(t);
        }
    }
    Tensor::from_vec(vec![n * s, n], m).expect("sized above")
}

/// Bilinear `[H,W]` to `[H*s, W*s]`.
pub fn upsample_bilinear<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (h, w) = (x.dim(0), x.dim(1));
    interp_matrix::<T>(h, s).matmul(x)?.matmul(&interp_matrix::<T>(w, s).transpose(0, 1)?)
}

fn init_encoder(init: &mut Initializer<'_>, prefix: &str, stride_convs: usize, out: usize) {
    let mut c_in = 3;
    for i in 0..stride_convs {
        let c = if i + 1 == stride_convs { out } else { out / 2 };
        init.conv_with_gain(&format!("{prefix}.s{i}"), c_in, c, 3, RELU_GAIN);
        c_in = c;
    }
    init.conv_with_gain(&format!("{prefix}.res.a"), out, out, 3, RELU_GAIN);
    init.conv(&format!("{prefix}.res.b"), out, out, 3);
    init.conv_with_gain(&format!("{prefix}.out"), out, out, 3, RELU_GAIN);
}

/// Strided conv stack on `[H,W,3]` in `[0,1]`, giving `[H/S, W/S, C]`.
fn encode<T: Element>(image: &Tensor<T>, params: &Params<T>, prefix: &str, stride_convs: usize) -> Result<Tensor<T>> {
    let mut x = hwc_to_nchw(&image.scale(2.0).add_scalar(-1.0))?;
    for i in 0..stride_convs {
        x = conv(params, &format!("{prefix}.s{i}"), &x, 2)?.relu();
    }
    let y = conv(params, &format!("{prefix}.res.a"), &x, 1)?.relu();
    let x = x.add(&conv(params, &format!("{prefix}.res.b"), &y, 1)?)?.relu();
    nchw_to_hwc(&conv(params, &format!("{prefix}.out"), &x, 1)?)
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GoatModel {
    pub config: GoatConfig,
    pub params: ParamStore,
}

impl GoatModel {
    pub fn new(config: GoatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer {
            store: &mut params,
            rng: &mut rng,
        };
        let n = config.stride_convs();
        init_encoder(&mut init, "fe", n, config.attention.channels);
        init_encoder(&mut init, "cn", n, config.oga.context);
        pdo::init_pdo(&mut init, &config.attention);
        oga::init_oga(&mut init, &config.oga);
        Ok(GoatModel { config, params })
    }

    /// Replaces the weights after checking names and shapes.
    pub fn with_params(config: GoatConfig, params: ParamStore) -> Result<Self> {
        let fresh = GoatModel::new(config, 0)?;
        fresh.params.check_compatible(&params)?;
        Ok(GoatModel {
            config: fresh.config,
            params,
        })
    }

    /// Forward pass on `[H,W,3]` views with the given bound parameters.
    pub fn forward<T: Element>(&self, params: &Params<T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<GoatOutput<T>> {
        let cfg = &self.config;
        if left.shape() != right.shape() || left.rank() != 3 || left.dim(2) != 3 {
            return Err(Error::ShapeMismatch {
                op: "stereo input",
                lhs: left.shape().to_vec(),
                rhs: right.shape().to_vec(),
            });
        }
        cfg.check_input(left.dim(0), left.dim(1))?;
        let s = cfg.oga.scale;
        let n = cfg.stride_convs();
        let pair = FeaturePair::new(encode(left, params, "fe", n)?, encode(right, params, "fe", n)?)?;
        let (est, cattn) = pdo::pdo_forward(&pair, &cfg.attention, params)?;
        let context = encode(left, params, "cn", n)?;
        let out = oga::oga_run(
            &est.disparity,
            &est.occlusion,
            &cattn.cattn1,
            &context,
            left,
            &cfg.oga,
            params,
        )?;
        let mut d_seq = Vec::with_capacity(out.d_ups.len() + 1);
        d_seq.push(upsample_bilinear(&est.disparity, s)?.scale(s as f64));
        d_seq.extend(out.d_ups);
        let occlusion_logits = upsample_bilinear(&est.occlusion_logits, s)?;
        Ok(GoatOutput {
            d0: est.disparity,
            d_seq,
            d_final: out.d_final,
            occlusion: occlusion_logits.sigmoid(),
            occlusion_logits,
            cattn,
        })
    }

    /// Untaped f32 inference on a pair of images.
    pub fn predict(&self, left: &Image, right: &Image) -> Result<Prediction> {
        let params = self.params.bind::<f32>(None);
        let out = self.forward(&params, &left.to_tensor(), &right.to_tensor())?;
        Ok(Prediction {
            disparity: DispMap::from_tensor(&out.d_final)?,
            occlusion: DispMap::from_tensor(&out.occlusion)?,
            sequence: out.d_seq.iter().map(DispMap::from_tensor).collect::<Result<_>>()?,
        })
    }
}

/// Full-resolution outputs of [`GoatModel::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub disparity: DispMap,
    /// Occlusion probability.
    pub occlusion: DispMap,
    /// Upsampled initial disparity and every iteration's estimate.
    pub sequence: Vec<DispMap>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneSpec};

    fn tiny() -> GoatConfig {
        GoatConfig {
            attention: AttentionConfig {
                channels: 8,
                num_self_cross_layers: 1,
                window_grid: (2, 2),
            },
            oga: OgaConfig {
                hidden: 8,
                matching: 8,
                context: 8,
                radius: 2,
                iterations: 2,
                scale: 4,
                ..OgaConfig::default()
            },
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_mean() {
        let c = Tensor::<f64>::full(&[3, 5], 2.0);
        let up = upsample_bilinear(&c, 4).unwrap();
        assert_eq!(up.shape(), &[12, 20]);
        assert!(up.data().iter().all(|v| (v - 2.0).abs() < 1e-12));
        let m = interp_matrix::<f64>(5, 4);
        for r in m.sum_axis(1, false).unwrap().data() {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let model = GoatModel::new(tiny(), 1).unwrap();
        let s = synth_scene(&SceneSpec {
            seed: 2,
            height: 32,
            width: 64,
            d_max: 12.0,
            ..SceneSpec::default()
        })
        .unwrap();
        let p = model.predict(&s.left, &s.right).unwrap();
        assert_eq!((p.disparity.height, p.disparity.width), (32, 64));
        assert_eq!(p.sequence.len(), 3);
        assert!(p.disparity.data.iter().all(|&v| v >= 0.0));
        assert!(p.occlusion.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, model.predict(&s.left, &s.right).unwrap());
    }

    #[test]
    fn rejects_bad_sizes() {
        let model = GoatModel::new(tiny(), 1).unwrap();
        let img = Image::filled(30, 64, 3, 0.5);
        assert!(model.predict(&img, &img).is_err());
        let img = Image::filled(32, 64, 3, 0.5);
        assert!(model.predict(&img, &Image::filled(32, 60, 3, 0.5)).is_err());
        let mut bad = tiny();
        bad.oga.scale = 3;
        assert!(GoatModel::new(bad, 0).is_err());
    }

    #[test]
    fn params_round_trip_through_checkpoint() {
        let model = GoatModel::new(tiny(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.goat");
        model.params.save(&path).unwrap();
        let back = GoatModel::with_params(tiny(), ParamStore::load(&path).unwrap()).unwrap();
        assert_eq!(back, model);
        let mut other = tiny();
        other.oga.hidden = 4;
        assert!(GoatModel::with_params(other, model.params.clone()).is_err());
    }
}
