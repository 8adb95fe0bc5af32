//! Parallel disparity and occlusion estimation.
//!
//! Two independent cross-attention heads turn the aggregated features into
//! row-wise attention volumes: `cattn1` (left query over right pixels) is
//! read as a global cost volume and regressed to disparity, `cattn2` (right
//! query over left pixels) accumulates how much matching mass each left
//! pixel receives, which is low where the left pixel has no match.

use crate::attention::{self, AttentionConfig, FeaturePair};
use crate::error::{Error, Result};
use crate::nn::{conv, layer_norm, linear, Initializer, Params, LINEAR_GAIN};
use crate::tensor::{Element, Tensor};

/// The two cross-attention volumes, both `[H,W,W]`.
///
/// `cattn1[i, j, k]`: left pixel `j` attending right pixel `k`, normalized
/// over `k`. `cattn2[i, k, j]`: right pixel `k` attending left pixel `j`,
/// normalized over `j`.
#[derive(Clone, Debug)]
pub struct CrossAttnPair<T: Element = f32> {
    pub cattn1: Tensor<T>,
    pub cattn2: Tensor<T>,
}

/// Disparity (feature-resolution pixels) and occlusion probability, `[H,W]`.
#[derive(Clone, Debug)]
pub struct DispOccEstimate<T: Element = f32> {
    pub disparity: Tensor<T>,
    pub occlusion: Tensor<T>,
    /// Pre-sigmoid occlusion scores.
    pub occlusion_logits: Tensor<T>,
}

pub const OCC_HIDDEN: usize = 16;
/// `ln(0.1 / 0.9)`.
pub const OCC_PRIOR_LOGIT: f32 = -2.197_224_6;

pub fn init_pdo(init: &mut Initializer<'_>, cfg: &AttentionConfig) {
    let c = cfg.channels;
    attention::init_self_cross(init, cfg, "pdo.sc");
    init.layer_norm("pdo.norm", c);
    // Keys start equal to their queries so that the initial scores measure
    // feature similarity.
    for (q, k) in [("pdo.q1", "pdo.k1"), ("pdo.q2", "pdo.k2")] {
        init.linear_with_gain(q, c, c, LINEAR_GAIN);
        init.copy(q, k);
    }
    init.conv("pdo.occ1", 1, OCC_HIDDEN, 3);
    init.conv("pdo.occ2", OCC_HIDDEN, 1, 3);
    // Start from the log-odds of a small occlusion prior.
    if let Some(b) = init.store.get_mut("pdo.occ2.b") {
        b.data.fill(OCC_PRIOR_LOGIT);
    }
}

/// Per-row scores of `queries` against `keys` (`[H,W,C]` each), softmax over
/// the key axis.
fn row_attention<T: Element>(queries: &Tensor<T>, keys: &Tensor<T>) -> Result<Tensor<T>> {
    let c = queries.dim(2);
    let scores = queries
        .matmul(&keys.transpose(1, 2)?)?
        .scale(1.0 / (c as f64).sqrt());
    scores.softmax(2)
}

/// Two independent projection heads, each row of the image processed on its
/// own.
pub fn parallel_cross_attention<T: Element>(pair: &FeaturePair<T>, params: &Params<T>) -> Result<CrossAttnPair<T>> {
    let q1 = linear(params, "pdo.q1", &pair.left)?;
    let k1 = linear(params, "pdo.k1", &pair.right)?;
    let q2 = linear(params, "pdo.q2", &pair.right)?;
    let k2 = linear(params, "pdo.k2", &pair.left)?;
    Ok(CrossAttnPair {
        cattn1: row_attention(&q1, &k1)?,
        cattn2: row_attention(&q2, &k2)?,
    })
}

/// `j - sum_k cattn1[i,j,k] * k` before clamping.
pub fn regress_disparity_raw<T: Element>(cattn1: &Tensor<T>) -> Result<Tensor<T>> {
    if cattn1.rank() != 3 || cattn1.dim(1) != cattn1.dim(2) {
        return Err(Error::InvalidShape {
            op: "regress_disparity",
            shape: cattn1.shape().to_vec(),
            reason: "expected [H,W,W]".into(),
        });
    }
    let (h, w) = (cattn1.dim(0), cattn1.dim(1));
    let coords = Tensor::<T>::from_fn(&[w, 1], |k| T::of(k as f64));
    let expected = cattn1.matmul(&coords)?.reshape(&[h, w])?;
    let left_x = Tensor::<T>::from_fn(&[w], |j| T::of(j as f64));
    left_x.sub(&expected)
}

/// Disparity of every left pixel, clamped at zero.
pub fn regress_disparity<T: Element>(cattn1: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(regress_disparity_raw(cattn1)?.clamp_min(0.0))
}

/// `e(i,j) = sum_k cattn2[i,k,j]`: attention mass left pixel `j` receives.
pub fn occlusion_evidence<T: Element>(cattn2: &Tensor<T>) -> Result<Tensor<T>> {
    cattn2.sum_axis(1, false)
}

/// Occlusion probability from the evidence map through a small conv net.
pub fn regress_occlusion<T: Element>(cattn2: &Tensor<T>, params: &Params<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let e = occlusion_evidence(cattn2)?;
    let (h, w) = (e.dim(0), e.dim(1));
    let x = e.reshape(&[1, 1, h, w])?;
    let x = conv(params, "pdo.occ1", &x, 1)?.relu();
    let logits = conv(params, "pdo.occ2", &x, 1)?.reshape(&[h, w])?;
    Ok((logits.sigmoid(), logits))
}

/// Self/cross aggregation followed by the parallel heads and both
/// regressions. The attention volumes are returned for reuse downstream.
pub fn pdo_forward<T: Element>(
    pair: &FeaturePair<T>,
    cfg: &AttentionConfig,
    params: &Params<T>,
) -> Result<(DispOccEstimate<T>, CrossAttnPair<T>)> {
    let agg = attention::self_cross_block(pair, cfg, params, "pdo.sc")?;
    let agg = FeaturePair::new(
        layer_norm(params, "pdo.norm", &agg.left)?,
        layer_norm(params, "pdo.norm", &agg.right)?,
    )?;
    let attn = parallel_cross_attention(&agg, params)?;
    let disparity = regress_disparity(&attn.cattn1)?;
    let (occlusion, occlusion_logits) = regress_occlusion(&attn.cattn2, params)?;
    Ok((
        DispOccEstimate {
            disparity,
            occlusion,
            occlusion_logits,
        },
        attn,
    ))
}
