//! Iterative occlusion-aware global aggregation.
//!
//! Starting from the PDO estimate, each iteration samples a local window of
//! the left-to-right attention volume around the current match, encodes it
//! together with the disparity, swaps in globally aggregated features where
//! the pixel is occluded, and lets a convolutional GRU regress a residual and
//! a convex upsampling mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv, hwc_to_nchw, linear, nchw_to_hwc, Initializer, Params};
use crate::tensor::{Element, Tensor};

/// Which blend of local and global features [`aggregate`] produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// Local features where visible, global features where occluded.
    #[default]
    Prose,
    /// The mirrored assignment: local where occluded, global where visible.
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OgaConfig {
    /// GRU hidden channels.
    pub hidden: usize,
    /// Disparity-encoder output channels.
    pub matching: usize,
    /// Left context channels.
    pub context: usize,
    /// Lookup radius in feature pixels.
    pub radius: usize,
    pub iterations: usize,
    /// Feature stride; the upsampling factor.
    pub scale: usize,
    pub gate: GateVariant,
    /// Largest `H*W` for which the global attention matrix is built.
    pub max_tokens: usize,
    /// Stop gradients through the disparity carried from one iteration to
    /// the next, so each iteration is trained only to improve on its input.
    pub detach_iterations: bool,
}

impl Default for OgaConfig {
    fn default() -> Self {
        OgaConfig {
            hidden: 32,
            matching: 32,
            context: 32,
            radius: 4,
            iterations: 12,
            scale: 4,
            gate: GateVariant::Prose,
            max_tokens: 4096,
            detach_iterations: true,
        }
    }
}

impl OgaConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.hidden, self.matching, self.context, self.radius, self.iterations, self.scale];
        if dims.contains(&0) {
            return Err(Error::Config(format!("OGA dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Channels of the aggregated features fed to the GRU.
    pub fn feature_channels(&self) -> usize {
        self.matching + self.context
    }
}

/// Recurrent state between iterations.
#[derive(Clone, Debug)]
pub struct IterState<T: Element = f32> {
    /// `[H,W]`, feature-resolution pixels.
    pub d: Tensor<T>,
    /// `[H,W,Ch]`.
    pub hidden: Tensor<T>,
    pub t: usize,
}

/// Row-stochastic `[H*W, H*W]` attention over left-context positions.
#[derive(Clone, Debug)]
pub struct GlobalAttnMatrix<T: Element = f32>(pub Tensor<T>);

/// `[H,W,9,S,S]` convex weights, normalized over the neighbour axis.
#[derive(Clone, Debug)]
pub struct UpsampleMask<T: Element = f32>(pub Tensor<T>);

impl<T: Element> UpsampleMask<T> {
    /// Equal weight on all nine neighbours.
    pub fn uniform(height: usize, width: usize, scale: usize) -> Self {
        UpsampleMask(Tensor::full(&[height, width, 9, scale, scale], T::of(1.0 / 9.0)))
    }

    pub fn scale(&self) -> usize {
        self.0.dim(3)
    }
}

/// Channels of the full-resolution refinement network.
pub const CONTEXT_ADJUST_CHANNELS: usize = 16;
pub const CONTEXT_ADJUST_BLOCKS: usize = 4;
/// Disparity is fed to the refinement network in units of this many pixels.
pub const CONTEXT_DISP_UNIT: f64 = 16.0;

pub fn init_oga(init: &mut Initializer<'_>, cfg: &OgaConfig) {
    let (ch, cm, cc) = (cfg.hidden, cfg.matching, cfg.context);
    let cf = cfg.feature_channels();
    init.linear("oga.gq", cc, cc);
    init.linear("oga.gk", cc, cc);
    init.conv("oga.h0", cc, ch, 3);
    init.conv("oga.enc1", 2 * cfg.radius + 2, cm, 3);
    init.conv("oga.enc2", cm, cm, 3);
    init.conv("oga.gru.z", ch + cf, ch, 3);
    init.conv("oga.gru.r", ch + cf, ch, 3);
    init.conv("oga.gru.q", ch + cf, ch, 3);
    init.conv("oga.dh1", ch, ch, 3);
    init.conv("oga.dh2", ch, 1, 3);
    init.conv("oga.mh1", ch, ch, 3);
    init.conv("oga.mh2", ch, 9 * cfg.scale * cfg.scale, 1);
    let c = CONTEXT_ADJUST_CHANNELS;
    init.conv("ctx.in", 4, c, 3);
    for b in 0..CONTEXT_ADJUST_BLOCKS {
        init.conv(&format!("ctx.res{b}.a"), c, c, 3);
        init.conv(&format!("ctx.res{b}.b"), c, c, 3);
    }
    init.conv("ctx.out", c, 1, 3);
}

fn map_to_nchw<T: Element>(m: &Tensor<T>) -> Result<Tensor<T>> {
    m.reshape(&[1, 1, m.dim(0), m.dim(1)])
}

/// Samples `cattn1[i, j, j - d(i,j) + o]` for `o` in `-r..=r`, giving
/// `[H,W,2r+1]`. Zero outside the row; differentiable in `d`.
pub fn lookup_local_corr<T: Element>(cattn1: &Tensor<T>, d: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    if cattn1.rank() != 3 || d.shape() != &cattn1.shape()[..2] {
        return Err(Error::ShapeMismatch {
            op: "lookup_local_corr",
            lhs: cattn1.shape().to_vec(),
            rhs: d.shape().to_vec(),
        });
    }
    let (h, w) = (d.dim(0), d.dim(1));
    let k = 2 * radius + 1;
    let base = Tensor::<T>::from_fn(&[w, k], |i| T::of((i / k) as f64 + (i % k) as f64 - radius as f64));
    let positions = base.sub(&d.reshape(&[h, w, 1])?)?;
    cattn1.sample_linear(&positions)
}

/// Attention of every left-context position over all others, from linear
/// query/key projections of `F1'` (`[H,W,Cc]`).
pub fn global_attention_matrix<T: Element>(
    context: &Tensor<T>,
    params: &Params<T>,
    max_tokens: usize,
) -> Result<GlobalAttnMatrix<T>> {
    let (h, w, c) = (context.dim(0), context.dim(1), context.dim(2));
    if h * w > max_tokens {
        return Err(Error::Config(format!(
            "global attention over {h}x{w} = {} positions exceeds the cap of {max_tokens}",
            h * w
        )));
    }
    let flat = context.reshape(&[h * w, c])?;
    let q = linear(params, "oga.gq", &flat)?;
    let k = linear(params, "oga.gk", &flat)?;
    let scores = q.matmul(&k.transpose(0, 1)?)?.scale(1.0 / (c as f64).sqrt());
    Ok(GlobalAttnMatrix(scores.softmax(1)?))
}

/// Blends `F_local` (`[H,W,Cf]`) with `A ⊗ F_local` under the occlusion
/// probability `M_occ` (`[H,W]`, 1 = occluded).
pub fn aggregate<T: Element>(
    local: &Tensor<T>,
    attn: &GlobalAttnMatrix<T>,
    occlusion: &Tensor<T>,
    variant: GateVariant,
) -> Result<Tensor<T>> {
    let (h, w, c) = (local.dim(0), local.dim(1), local.dim(2));
    if occlusion.shape() != [h, w] || attn.0.shape() != [h * w, h * w] {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            lhs: local.shape().to_vec(),
            rhs: occlusion.shape().to_vec(),
        });
    }
    let global = attn.0.matmul(&local.reshape(&[h * w, c])?)?.reshape(&[h, w, c])?;
    let m = occlusion.reshape(&[h, w, 1])?;
    let (on_visible, on_occluded) = match variant {
        GateVariant::Prose => (local, &global),
        GateVariant::Printed => (&global, local),
    };
    on_visible.mul(&m.one_minus())?.add(&on_occluded.mul(&m)?)
}

/// Two 3×3 conv + ReLU layers over `concat(d, corr)`, giving `[H,W,Cm]`.
pub fn disparity_encoder<T: Element>(d: &Tensor<T>, corr: &Tensor<T>, params: &Params<T>) -> Result<Tensor<T>> {
    let x = Tensor::concat(&[&map_to_nchw(d)?, &hwc_to_nchw(corr)?], 1)?;
    let x = conv(params, "oga.enc1", &x, 1)?.relu();
    let x = conv(params, "oga.enc2", &x, 1)?.relu();
    nchw_to_hwc(&x)
}

/// Initial GRU state: `tanh` of a conv over the left context.
pub fn initial_state<T: Element>(d0: &Tensor<T>, context: &Tensor<T>, params: &Params<T>) -> Result<IterState<T>> {
    let h = conv(params, "oga.h0", &hwc_to_nchw(context)?, 1)?.tanh();
    Ok(IterState {
        d: d0.clone(),
        hidden: nchw_to_hwc(&h)?,
        t: 0,
    })
}

/// One convolutional GRU step on `F_ada` (`[H,W,Cf]`), then the residual and
/// upsample-mask heads. `h' = z*h + (1-z)*q`, `d' = max(0, d + d_res)`.
pub fn gru_update<T: Element>(
    state: &IterState<T>,
    features: &Tensor<T>,
    scale: usize,
    params: &Params<T>,
) -> Result<(IterState<T>, UpsampleMask<T>)> {
    let (h, w) = (state.d.dim(0), state.d.dim(1));
    let hid = hwc_to_nchw(&state.hidden)?;
    let x = hwc_to_nchw(features)?;
    let hx = Tensor::concat(&[&hid, &x], 1)?;
    let z = conv(params, "oga.gru.z", &hx, 1)?.sigmoid();
    let r = conv(params, "oga.gru.r", &hx, 1)?.sigmoid();
    let rhx = Tensor::concat(&[&r.mul(&hid)?, &x], 1)?;
    let q = conv(params, "oga.gru.q", &rhx, 1)?.tanh();
    let hid = z.mul(&hid)?.add(&z.one_minus().mul(&q)?)?;

    let dh = conv(params, "oga.dh1", &hid, 1)?.relu();
    let d_res = conv(params, "oga.dh2", &dh, 1)?.reshape(&[h, w])?;
    let d = state.d.add(&d_res)?.clamp_min(0.0);

    let mh = conv(params, "oga.mh1", &hid, 1)?.relu();
    let logits = conv(params, "oga.mh2", &mh, 1)?
        .scale(0.25)
        .reshape(&[9, scale, scale, h, w])?
        .permute(&[3, 4, 0, 1, 2])?;
    let mask = UpsampleMask(logits.softmax(2)?);
    Ok((
        IterState {
            d,
            hidden: nchw_to_hwc(&hid)?,
            t: state.t + 1,
        },
        mask,
    ))
}

/// `[H,W]` to `[H*S, W*S]`: every fine pixel is a convex combination of the
/// 3×3 coarse neighbourhood (replicate-padded), times `S`.
pub fn convex_upsample<T: Element>(d: &Tensor<T>, mask: &UpsampleMask<T>) -> Result<Tensor<T>> {
    let (h, w) = (d.dim(0), d.dim(1));
    let s = mask.scale();
    if mask.0.shape() != [h, w, 9, s, s] {
        return Err(Error::ShapeMismatch {
            op: "convex_upsample",
            lhs: d.shape().to_vec(),
            rhs: mask.0.shape().to_vec(),
        });
    }
    let padded = d.pad_replicate(0, 1)?.pad_replicate(1, 1)?;
    let mut shifted = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            shifted.push(padded.slice(0, dy, dy + h)?.slice(1, dx, dx + w)?);
        }
    }
    let refs: Vec<&Tensor<T>> = shifted.iter().collect();
    let neighbours = Tensor::stack(&refs)?.permute(&[1, 2, 0])?.reshape(&[h, w, 9, 1, 1])?;
    mask.0
        .mul(&neighbours)?
        .sum_axis(2, false)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[h * s, w * s])
        .map(|x| x.scale(s as f64))
}

/// Full-resolution residual refinement from the left image (`[H0,W0,3]`)
/// and `d_up`; `d_final = max(0, d_up + residual)`.
pub fn context_adjust<T: Element>(d_up: &Tensor<T>, image: &Tensor<T>, params: &Params<T>) -> Result<Tensor<T>> {
    let (h, w) = (d_up.dim(0), d_up.dim(1));
    if image.shape() != [h, w, 3] {
        return Err(Error::ShapeMismatch {
            op: "context_adjust",
            lhs: d_up.shape().to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let x = Tensor::concat(
        &[&hwc_to_nchw(image)?, &map_to_nchw(&d_up.scale(1.0 / CONTEXT_DISP_UNIT))?],
        1,
    )?;
    let mut x = conv(params, "ctx.in", &x, 1)?.relu();
    for b in 0..CONTEXT_ADJUST_BLOCKS {
        let y = conv(params, &format!("ctx.res{b}.a"), &x, 1)?.relu();
        let y = conv(params, &format!("ctx.res{b}.b"), &y, 1)?;
        x = x.add(&y)?.relu();
    }
    let residual = conv(params, "ctx.out", &x, 1)?.reshape(&[h, w])?;
    Ok(d_up.add(&residual)?.clamp_min(0.0))
}

/// Everything produced by the iterative loop.
#[derive(Clone, Debug)]
pub struct OgaOutput<T: Element = f32> {
    /// Upsampled disparity after each iteration, `[H*S, W*S]`.
    pub d_ups: Vec<Tensor<T>>,
    pub d_final: Tensor<T>,
    pub state: IterState<T>,
}

/// Runs `cfg.iterations` refinement steps from the PDO disparity `d0`
/// (`[H,W]`) with occlusion gate `occlusion` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn oga_run<T: Element>(
    d0: &Tensor<T>,
    occlusion: &Tensor<T>,
    cattn1: &Tensor<T>,
    context: &Tensor<T>,
    image: &Tensor<T>,
    cfg: &OgaConfig,
    params: &Params<T>,
) -> Result<OgaOutput<T>> {
    let attn = global_attention_matrix(context, params, cfg.max_tokens)?;
    let mut state = initial_state(d0, context, params)?;
    let mut d_ups = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        if cfg.detach_iterations {
            state.d = state.d.detach();
        }
        let corr = lookup_local_corr(cattn1, &state.d, cfg.radius)?;
        let matching = disparity_encoder(&state.d, &corr, params)?;
        let local = Tensor::concat(&[&matching, context], 2)?;
        let features = aggregate(&local, &attn, occlusion, cfg.gate)?;
        let (next, mask) = gru_update(&state, &features, cfg.scale, params)?;
        d_ups.push(convex_upsample(&next.d, &mask)?);
        state = next;
    }
    let last = d_ups.last().expect("at least one iteration");
    let d_final = context_adjust(last, image, params)?;
    Ok(OgaOutput { d_ups, d_final, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::grad_check_mixed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> OgaConfig {
        OgaConfig {
            hidden: 4,
            matching: 4,
            context: 4,
            radius: 1,
            iterations: 2,
            scale: 2,
            gate: GateVariant::Prose,
            max_tokens: 4096,
            detach_iterations: false,
        }
    }

    fn store(cfg: &OgaConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_oga(
            &mut Initializer {
                store: &mut store,
                rng: &mut rng,
            },
            cfg,
        );
        store
    }

    fn random_volume<T: Element>(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
        Tensor::<T>::uniform(&[h, w, w], -2.0, 2.0, rng).softmax(2).unwrap()
    }

    #[test]
    fn lookup_at_zero_disparity_reads_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume::<f64>(2, 5, &mut rng);
        let c = lookup_local_corr(&v, &Tensor::zeros(&[2, 5]), 1).unwrap();
        assert_eq!(c.shape(), &[2, 5, 3]);
        for i in 0..2 {
            for j in 0..5 {
                assert_eq!(c.at(&[i, j, 1]), v.at(&[i, j, j]));
            }
        }
        assert_eq!(c.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn lookup_one_hot_at_true_match() {
        let w = 8;
        let v = Tensor::<f64>::from_fn(&[1, w, w], |i| if i % w + 3 == i / w { 1.0 } else { 0.0 });
        let d = Tensor::<f64>::full(&[1, w], 3.0);
        let c = lookup_local_corr(&v, &d, 2).unwrap();
        for j in 3..w {
            let row: Vec<f64> = (0..5).map(|o| c.at(&[0, j, o])).collect();
            assert_eq!(row, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn lookup_gradient_in_disparity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..5 {
            let v = random_volume::<f32>(2, 6, &mut rng);
            let d = Tensor::<f32>::from_fn(&[2, 6], |i| ((i * 7 + seed) % 5) as f32 * 0.8 + 0.37);
            let wts = Tensor::<f32>::uniform(&[2, 6, 5], -1.0, 1.0, &mut rng);
            let (v64, w64) = (v.cast::<f64>(), wts.cast::<f64>());
            let report = grad_check_mixed(
                |d| Ok(lookup_local_corr(&v, d, 2)?.mul(&wts)?.sum()),
                |d| Ok(lookup_local_corr(&v64, d, 2)?.mul(&w64)?.sum()),
                &d,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "{report:?}");
        }
    }

    #[test]
    fn global_matrix_rows_and_constant_context() {
        let cfg = toy_cfg();
        let p = store(&cfg, 3).bind::<f64>(None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = Tensor::<f64>::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let a = global_attention_matrix(&ctx, &p, 4096).unwrap();
        for s in a.0.sum_axis(1, false).unwrap().data() {
            assert!((s - 1.0).abs() < 1e-5);
        }
        let flat = Tensor::<f64>::full(&[3, 4, 4], 0.7);
        let a = global_attention_matrix(&flat, &p, 4096).unwrap();
        assert!(a.0.data().iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-6));
        assert!(global_attention_matrix(&flat, &p, 11).is_err());
    }

    #[test]
    fn global_matrix_separates_clusters() {
        let c = 4;
        let mut p = store(&toy_cfg(), 5).bind::<f64>(None);
        for head in ["oga.gq", "oga.gk"] {
            p.set(&format!("{head}.w"), Tensor::eye(c));
            p.set(&format!("{head}.b"), Tensor::zeros(&[c]));
        }
        // left half one direction, right half an orthogonal one
        let (h, w) = (2, 6);
        let ctx = Tensor::<f64>::from_fn(&[h, w, c], |i| {
            let (x, ch) = ((i / c) % w, i % c);
            match (x < w / 2, ch) {
                (true, 0) | (false, 1) => 10.0,
                _ => 0.0,
            }
        });
        let a = global_attention_matrix(&ctx, &p, 4096).unwrap();
        for q in 0..h * w {
            let cluster = |k: usize| (k % w) < w / 2;
            let intra: f64 = (0..h * w).filter(|&k| cluster(k) == cluster(q)).map(|k| a.0.at(&[q, k])).sum();
            assert!(intra > 0.99, "{intra}");
        }
    }

    fn blend_fixture() -> (Tensor<f64>, GlobalAttnMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let local = Tensor::<f64>::uniform(&[2, 3, 5], -1.0, 1.0, &mut rng);
        let a = Tensor::<f64>::uniform(&[6, 6], -1.0, 1.0, &mut rng).softmax(1).unwrap();
        (local, GlobalAttnMatrix(a))
    }

    #[test]
    fn gate_closed_open_and_identity() {
        let (local, a) = blend_fixture();
        let closed = aggregate(&local, &a, &Tensor::zeros(&[2, 3]), GateVariant::Prose).unwrap();
        assert_eq!(closed.data(), local.data());
        let open = aggregate(&local, &a, &Tensor::ones(&[2, 3]), GateVariant::Prose).unwrap();
        let global = a.0.matmul(&local.reshape(&[6, 5]).unwrap()).unwrap();
        assert!(open.reshape(&[6, 5]).unwrap().max_abs_diff(&global) < 1e-12);
        let id = GlobalAttnMatrix(Tensor::eye(6));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Tensor::<f64>::uniform(&[2, 3], 0.0, 1.0, &mut rng);
        let out = aggregate(&local, &id, &m, GateVariant::Prose).unwrap();
        assert!(out.max_abs_diff(&local) < 1e-12);
    }

    #[test]
    fn gate_is_linear_in_mask() {
        let (local, a) = blend_fixture();
        let global = a.0.matmul(&local.reshape(&[6, 5]).unwrap()).unwrap().reshape(&[2, 3, 5]).unwrap();
        for m in [0.0, 0.5, 1.0] {
            let out = aggregate(&local, &a, &Tensor::full(&[2, 3], m), GateVariant::Prose).unwrap();
            for ((o, l), g) in out.data().iter().zip(local.data()).zip(global.data()) {
                assert!((o - ((1.0 - m) * l + m * g)).abs() < 1e-12);
            }
            let printed = aggregate(&local, &a, &Tensor::full(&[2, 3], m), GateVariant::Printed).unwrap();
            for ((o, l), g) in printed.data().iter().zip(local.data()).zip(global.data()) {
                assert!((o - (m * l + (1.0 - m) * g)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_shape_and_zero_weights() {
        let cfg = toy_cfg();
        let mut store = store(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Tensor::<f32>::uniform(&[4, 6], 0.0, 3.0, &mut rng);
        let corr = Tensor::<f32>::uniform(&[4, 6, 3], 0.0, 1.0, &mut rng);
        let out = disparity_encoder(&d, &corr, &store.bind(None)).unwrap();
        assert_eq!(out.shape(), &[4, 6, 4]);
        store.zero_prefix("oga.enc");
        let out = disparity_encoder(&d, &corr, &store.bind(None)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_gradient_f32() {
        let cfg = toy_cfg();
        let store = store(&cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Tensor::<f32>::uniform(&[4, 6], 0.0, 3.0, &mut rng);
        let corr = Tensor::<f32>::uniform(&[4, 6, 3], 0.0, 1.0, &mut rng);
        let wts = Tensor::<f32>::uniform(&[4, 6, 4], -1.0, 1.0, &mut rng);
        fn f<T: Element>(d: &Tensor<T>, corr: &Tensor<T>, wts: &Tensor<T>, store: &ParamStore) -> Result<Tensor<T>> {
            Ok(disparity_encoder(d, corr, &store.bind(None))?.mul(wts)?.sum())
        }
        let (c64, w64) = (corr.cast(), wts.cast());
        let report = grad_check_mixed(|d| f(d, &corr, &wts, &store), |d| f(d, &c64, &w64, &store), &d, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn forced_update_gate_keeps_hidden() {
        let cfg = toy_cfg();
        let mut store = store(&cfg, 12);
        store.zero_prefix("oga.gru.z.w");
        store.get_mut("oga.gru.z.b").unwrap().data.fill(1e4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let state = IterState {
            d: Tensor::<f64>::uniform(&[3, 4], 0.0, 2.0, &mut rng),
            hidden: Tensor::<f64>::uniform(&[3, 4, 4], -0.9, 0.9, &mut rng),
            t: 0,
        };
        let x = Tensor::<f64>::uniform(&[3, 4, 8], -1.0, 1.0, &mut rng);
        let (next, mask) = gru_update(&state, &x, 2, &store.bind(None)).unwrap();
        assert_eq!(next.hidden.data(), state.hidden.data());
        assert_eq!(next.t, 1);
        assert_eq!(mask.0.shape(), &[3, 4, 9, 2, 2]);
        for s in mask.0.sum_axis(2, false).unwrap().data() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_residual_clamps_to_zero() {
        let cfg = toy_cfg();
        let mut store = store(&cfg, 14);
        store.zero_prefix("oga.dh2.w");
        store.get_mut("oga.dh2.b").unwrap().data.fill(-1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let state = IterState {
            d: Tensor::<f32>::zeros(&[3, 4]),
            hidden: Tensor::<f32>::uniform(&[3, 4, 4], -0.9, 0.9, &mut rng),
            t: 0,
        };
        let x = Tensor::<f32>::uniform(&[3, 4, 8], -1.0, 1.0, &mut rng);
        let (next, _) = gru_update(&state, &x, 2, &store.bind(None)).unwrap();
        assert!(next.d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_stays_bounded_over_many_updates() {
        let cfg = toy_cfg();
        let store = store(&cfg, 16);
        let p = store.bind::<f32>(None);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ctx = Tensor::<f32>::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let mut state = initial_state(&Tensor::zeros(&[3, 4]), &ctx, &p).unwrap();
        for _ in 0..100 {
            let x = Tensor::<f32>::uniform(&[3, 4, 8], -5.0, 5.0, &mut rng);
            state = gru_update(&state, &x, 2, &p).unwrap().0;
            assert!(state.hidden.data().iter().all(|v| v.abs() < 1.0));
            assert!(state.d.data().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(state.t, 100);
    }

    fn random_mask(h: usize, w: usize, s: usize, seed: u64) -> UpsampleMask<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UpsampleMask(Tensor::uniform(&[h, w, 9, s, s], -3.0, 3.0, &mut rng).softmax(2).unwrap())
    }

    #[test]
    fn upsample_constant_field() {
        let d = Tensor::<f64>::full(&[3, 5], 2.5);
        let up = convex_upsample(&d, &random_mask(3, 5, 4, 18)).unwrap();
        assert_eq!(up.shape(), &[12, 20]);
        assert!(up.data().iter().all(|v| (v - 10.0).abs() < 1e-6));
    }

    #[test]
    fn upsample_center_mask_is_nearest_neighbour() {
        let (h, w, s) = (3, 4, 2);
        let mask = UpsampleMask(Tensor::<f64>::from_fn(&[h, w, 9, s, s], |i| {
            if (i / (s * s)) % 9 == 4 {
                1.0
            } else {
                0.0
            }
        }));
        let d = Tensor::<f64>::from_fn(&[h, w], |i| i as f64 * 0.5);
        let up = convex_upsample(&d, &mask).unwrap();
        for y in 0..h * s {
            for x in 0..w * s {
                assert_eq!(up.at(&[y, x]), s as f64 * d.at(&[y / s, x / s]));
            }
        }
    }

    #[test]
    fn upsample_uniform_mask_matches_brute_force_and_bounds() {
        let (h, w, s) = (4, 4, 3);
        let d = Tensor::<f64>::from_fn(&[h, w], |i| ((i * 37) % 11) as f64);
        let up = convex_upsample(&d, &UpsampleMask::uniform(h, w, s)).unwrap();
        let at = |y: isize, x: isize| d.at(&[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]);
        let mut total = 0.0;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let nb: Vec<f64> = (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx))).map(|(dy, dx)| at(i + dy, j + dx)).collect();
                let expect = s as f64 * nb.iter().sum::<f64>() / 9.0;
                total += expect;
                for p in 0..s {
                    for q in 0..s {
                        let v = up.at(&[i as usize * s + p, j as usize * s + q]);
                        assert!((v - expect).abs() < 1e-12);
                    }
                }
            }
        }
        assert!((up.mean_value() - total / (h * w) as f64).abs() < 1e-4);
        let mask = random_mask(h, w, s, 19);
        let up = convex_upsample(&d, &mask).unwrap();
        assert!(up.min_value() >= s as f64 * d.min_value() - 1e-12);
        assert!(up.max_value() <= s as f64 * d.max_value() + 1e-12);
    }

    #[test]
    fn context_adjust_identity_and_clamp() {
        let cfg = toy_cfg();
        let mut store = store(&cfg, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = Tensor::<f32>::uniform(&[6, 8], 0.0, 5.0, &mut rng);
        let img = Tensor::<f32>::uniform(&[6, 8, 3], 0.0, 1.0, &mut rng);
        let out = context_adjust(&d, &img, &store.bind(None)).unwrap();
        assert!(out.data().iter().all(|&v| v >= 0.0));
        store.zero_prefix("ctx.");
        let out = context_adjust(&d, &img, &store.bind(None)).unwrap();
        assert_eq!(out.data(), d.data());
    }

    #[test]
    fn context_adjust_gradient_f32() {
        let cfg = toy_cfg();
        let store = store(&cfg, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = Tensor::<f32>::uniform(&[4, 6], 1.0, 5.0, &mut rng);
        let img = Tensor::<f32>::uniform(&[4, 6, 3], 0.0, 1.0, &mut rng);
        fn f<T: Element>(d: &Tensor<T>, img: &Tensor<T>, store: &ParamStore) -> Result<Tensor<T>> {
            Ok(context_adjust(d, img, &store.bind(None))?.square().sum())
        }
        let i64 = img.cast();
        let report = grad_check_mixed(|d| f(d, &img, &store), |d| f(d, &i64, &store), &d, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    fn loop_inputs<T: Element>(seed: u64) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4, 6);
        let d0 = Tensor::uniform(&[h, w], 0.3, 2.7, &mut rng);
        let occ = Tensor::uniform(&[h, w], 0.0, 1.0, &mut rng);
        let cattn = random_volume(h, w, &mut rng);
        let ctx = Tensor::uniform(&[h, w, 4], -1.0, 1.0, &mut rng);
        let img = Tensor::uniform(&[2 * h, 2 * w, 3], 0.0, 1.0, &mut rng);
        (d0, occ, cattn, ctx, img)
    }

    #[test]
    fn loop_counts_and_zero_residual() {
        let mut cfg = toy_cfg();
        cfg.iterations = 1;
        let mut store = store(&cfg, 24);
        let (d0, occ, cattn, ctx, img) = loop_inputs::<f64>(25);
        let out = oga_run(&d0, &occ, &cattn, &ctx, &img, &cfg, &store.bind(None)).unwrap();
        assert_eq!(out.d_ups.len(), 1);
        assert_eq!(out.d_final.shape(), &[8, 12]);

        cfg.iterations = 3;
        store.zero_prefix("oga.dh");
        store.zero_prefix("oga.mh");
        let out = oga_run(&d0, &occ, &cattn, &ctx, &img, &cfg, &store.bind(None)).unwrap();
        let expect = convex_upsample(&d0, &UpsampleMask::uniform(4, 6, 2)).unwrap();
        assert_eq!(out.d_ups.len(), 3);
        for d in &out.d_ups {
            assert!(d.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn unrolled_loop_gradient_f32() {
        let cfg = toy_cfg();
        for seed in 0..5 {
            let store = store(&cfg, 100 + seed);
            let (d0, occ, cattn, ctx, img) = loop_inputs::<f32>(200 + seed);
            let (o64, a64, c64, i64) = (occ.cast(), cattn.cast(), ctx.cast(), img.cast());
            fn f<T: Element>(
                d0: &Tensor<T>,
                occ: &Tensor<T>,
                cattn: &Tensor<T>,
                ctx: &Tensor<T>,
                img: &Tensor<T>,
                cfg: &OgaConfig,
                store: &ParamStore,
            ) -> Result<Tensor<T>> {
                let out = oga_run(d0, occ, cattn, ctx, img, cfg, &store.bind(None))?;
                let mut loss = out.d_final.mean();
                for d in &out.d_ups {
                    loss = loss.add(&d.mean())?;
                }
                Ok(loss)
            }
            let report = grad_check_mixed(
                |d| f(d, &occ, &cattn, &ctx, &img, &cfg, &store),
                |d| f(d, &o64, &a64, &c64, &i64, &cfg, &store),
                &d0,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "seed {seed}: {report:?}");
        }
    }
}
