//! Positional encoding, windowed scaled-dot-product attention and the
//! alternating self/cross feature aggregation stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, Initializer, Params};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub channels: usize,
    pub num_self_cross_layers: usize,
    /// Window partition (rows, cols): `(2, 2)` gives windows of `[h/2, w/2]`.
    pub window_grid: (usize, usize),
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            channels: 32,
            num_self_cross_layers: 2,
            window_grid: (2, 2),
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (gr, gc) = self.window_grid;
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "attention channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if self.num_self_cross_layers == 0 {
            return Err(Error::Config("at least one self-cross layer is required".into()));
        }
        if gr == 0 || gc == 0 || !height.is_multiple_of(gr) || !width.is_multiple_of(gc) {
            return Err(Error::Config(format!(
                "feature map {height}x{width} is not divisible by window grid {gr}x{gc}"
            )));
        }
        Ok(())
    }
}

/// Left and right feature maps, each `[H,W,C]`.
#[derive(Clone, Debug)]
pub struct FeaturePair<T: Element = f32> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

impl<T: Element> FeaturePair<T> {
    pub fn new(left: Tensor<T>, right: Tensor<T>) -> Result<Self> {
        if left.shape() != right.shape() || left.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "feature pair",
                lhs: left.shape().to_vec(),
                rhs: right.shape().to_vec(),
            });
        }
        Ok(FeaturePair { left, right })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.left.dim(0), self.left.dim(1), self.left.dim(2))
    }
}

/// Absolute 2-D sinusoidal encoding `[H,W,C]`.
///
/// Channels `0..C/2` encode x as interleaved `(sin, cos)` pairs at geometric
/// frequencies `10000^(-4i/C)`; channels `C/2..C` encode y the same way.
pub fn positional_encoding<T: Element>(height: usize, width: usize, channels: usize) -> Result<Tensor<T>> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let quarter = channels / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 10000f64.powf(-(i as f64) / quarter as f64))
        .collect();
    let half = channels / 2;
    Ok(Tensor::from_fn(&[height, width, channels], |idx| {
        let c = idx % channels;
        let x = (idx / channels) % width;
        let y = idx / (channels * width);
        let (pos, c) = if c < half { (x, c) } else { (y, c - half) };
        let angle = pos as f64 * freqs[c / 2];
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Row-normalized attention weights `softmax(Q K^T / sqrt(C))` for batched
/// `[.., N, C]` queries and `[.., M, C]` keys.
pub fn attention_weights<T: Element>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let rank = q.rank();
    if rank < 2 || k.rank() != rank || q.dim(rank - 1) != k.dim(rank - 1) {
        return Err(Error::ShapeMismatch {
            op: "attention (channels)",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let c = q.dim(rank - 1);
    let scores = q.matmul(&k.transpose(rank - 2, rank - 1)?)?.scale(1.0 / (c as f64).sqrt());
    scores.softmax(rank - 1)
}

/// `softmax(Q K^T / sqrt(C)) V`, batched over leading axes.
pub fn scaled_dot_attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if k.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention (keys/values)",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    attention_weights(q, k)?.matmul(v)
}

/// `[H,W,C]` to `[gr*gc, (H/gr)*(W/gc), C]`, windows in row-major order.
pub fn window_partition<T: Element>(x: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    let (gr, gc) = grid;
    let (wh, ww) = (h / gr, w / gc);
    x.reshape(&[gr, wh, gc, ww, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[gr * gc, wh * ww, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Element>(x: &Tensor<T>, grid: (usize, usize), height: usize, width: usize) -> Result<Tensor<T>> {
    let c = x.dim(2);
    let (gr, gc) = grid;
    let (wh, ww) = (height / gr, width / gc);
    x.reshape(&[gr, gc, wh, ww, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[height, width, c])
}

pub fn init_self_cross(init: &mut Initializer<'_>, cfg: &AttentionConfig, prefix: &str) {
    let c = cfg.channels;
    for l in 0..cfg.num_self_cross_layers {
        for kind in ["self", "cross"] {
            let p = format!("{prefix}.{l}.{kind}");
            init.layer_norm(&format!("{p}.norm1"), c);
            init.linear(&format!("{p}.qkv"), c, 3 * c);
            init.linear(&format!("{p}.proj"), c, c);
            init.layer_norm(&format!("{p}.norm2"), c);
            init.linear(&format!("{p}.mlp1"), c, 2 * c);
            init.linear(&format!("{p}.mlp2"), 2 * c, c);
        }
    }
}

/// Records the attention weights each sub-layer produced.
#[derive(Default)]
pub struct AttentionTrace<T: Element> {
    pub weights: Vec<Tensor<T>>,
}

struct Sublayer<'a, T: Element> {
    params: &'a Params<T>,
    name: String,
    grid: (usize, usize),
    pe: &'a Tensor<T>,
}

impl<T: Element> Sublayer<'_, T> {
    /// Window-partitioned Q, K, V from the shared projection of
    /// `norm(x) + pe`.
    fn qkv(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let c = x.dim(2);
        let y = layer_norm(self.params, &format!("{}.norm1", self.name), x)?.add(self.pe)?;
        let qkv = linear(self.params, &format!("{}.qkv", self.name), &y)?;
        let part = |i: usize| window_partition(&qkv.slice(2, i * c, (i + 1) * c)?, self.grid);
        Ok([part(0)?, part(1)?, part(2)?])
    }

    fn attend(
        &self,
        x: &Tensor<T>,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        trace: &mut Option<&mut AttentionTrace<T>>,
    ) -> Result<Tensor<T>> {
        let a = attention_weights(q, k)?;
        let o = a.matmul(v)?;
        if let Some(t) = trace.as_mut() {
            t.weights.push(a);
        }
        let o = window_reverse(&o, self.grid, x.dim(0), x.dim(1))?;
        let x = x.add(&linear(self.params, &format!("{}.proj", self.name), &o)?)?;
        self.feed_forward(&x)
    }

    fn feed_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = layer_norm(self.params, &format!("{}.norm2", self.name), x)?;
        let y = linear(self.params, &format!("{}.mlp1", self.name), &y)?.gelu();
        x.add(&linear(self.params, &format!("{}.mlp2", self.name), &y)?)
    }
}

/// Alternating self/cross attention over both views.
///
/// Every layer applies windowed self-attention to each view, then windowed
/// cross-attention (left queries against right keys/values and vice versa);
/// each attention is followed by a feed-forward sublayer, both with
/// residual connections and pre-normalization. Q/K/V projections are shared
/// between the views.
pub fn self_cross_block<T: Element>(
    pair: &FeaturePair<T>,
    cfg: &AttentionConfig,
    params: &Params<T>,
    prefix: &str,
) -> Result<FeaturePair<T>> {
    self_cross_block_traced(pair, cfg, params, prefix, None)
}

pub fn self_cross_block_traced<T: Element>(
    pair: &FeaturePair<T>,
    cfg: &AttentionConfig,
    params: &Params<T>,
    prefix: &str,
    mut trace: Option<&mut AttentionTrace<T>>,
) -> Result<FeaturePair<T>> {
    let (h, w, c) = pair.dims();
    if c != cfg.channels {
        return Err(Error::ShapeMismatch {
            op: "self_cross_block (channels)",
            lhs: pair.left.shape().to_vec(),
            rhs: vec![h, w, cfg.channels],
        });
    }
    cfg.validate(h, w)?;
    let pe = positional_encoding::<T>(h, w, c)?;
    let (mut left, mut right) = (pair.left.clone(), pair.right.clone());
    for l in 0..cfg.num_self_cross_layers {
        let sub = |kind: &str| Sublayer {
            params,
            name: format!("{prefix}.{l}.{kind}"),
            grid: cfg.window_grid,
            pe: &pe,
        };
        let s = sub("self");
        let [ql, kl, vl] = s.qkv(&left)?;
        let [qr, kr, vr] = s.qkv(&right)?;
        left = s.attend(&left, &ql, &kl, &vl, &mut trace)?;
        right = s.attend(&right, &qr, &kr, &vr, &mut trace)?;

        let x = sub("cross");
        let [ql, kl, vl] = x.qkv(&left)?;
        let [qr, kr, vr] = x.qkv(&right)?;
        let new_left = x.attend(&left, &ql, &kr, &vr, &mut trace)?;
        let new_right = x.attend(&right, &qr, &kl, &vl, &mut trace)?;
        left = new_left;
        right = new_right;
    }
    FeaturePair::new(left, right)
}
