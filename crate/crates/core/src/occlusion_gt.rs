//! Occlusion masks from a pair of disparity maps, or from a single-view
//! estimator run on the pair and its mirror image.

use crate::data::{DispMap, Image, Mask};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Linear interpolation of row `y` at `x`, `None` outside `[0, W-1]`.
fn sample_row(map: &DispMap, y: usize, x: f64) -> Option<f64> {
    if !(x >= 0.0 && x <= (map.width - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let t = x - x0 as f64;
    let a = map.get(y, x0, 0) as f64;
    if t == 0.0 {
        return Some(a);
    }
    let b = map.get(y, x0 + 1, 0) as f64;
    Some(a * (1.0 - t) + b * t)
}

/// Marks pixels of `primary` whose match in `secondary` (at `x + sign * d`)
/// is out of view or disagrees by at least `threshold`.
fn consistency(primary: &DispMap, secondary: &DispMap, sign: f64, threshold: f64) -> Result<Mask> {
    if !primary.same_size(secondary) || primary.channels != 1 || secondary.channels != 1 {
        return Err(Error::ShapeMismatch {
            op: "consistency check",
            lhs: vec![primary.height, primary.width, primary.channels],
            rhs: vec![secondary.height, secondary.width, secondary.channels],
        });
    }
    Ok(Mask::from_fn(primary.height, primary.width, 1, |y, x, _| {
        let d = primary.get(y, x, 0) as f64;
        match sample_row(secondary, y, x as f64 + sign * d) {
            Some(other) => u8::from((d - other).abs() >= threshold),
            None => 1,
        }
    }))
}

/// Left-view occlusion: `|D_L(x) - D_R(x - D_L(x))| >= threshold`, or the
/// sample point leaves the right image.
pub fn lr_consistency(disp_left: &DispMap, disp_right: &DispMap, threshold: f64) -> Result<Mask> {
    consistency(disp_left, disp_right, -1.0, threshold)
}

/// Right-view counterpart: `D_R(x)` against `D_L(x + D_R(x))`.
pub fn rl_consistency(disp_right: &DispMap, disp_left: &DispMap, threshold: f64) -> Result<Mask> {
    consistency(disp_right, disp_left, 1.0, threshold)
}

/// Both disparity maps from a left-view estimator: the right map comes from
/// running it on the mirrored, swapped pair and mirroring the result back.
pub fn flipped_inference<F>(mut estimate: F, left: &Image, right: &Image, threshold: f64) -> Result<(DispMap, DispMap, Mask)>
where
    F: FnMut(&Image, &Image) -> Result<DispMap>,
{
    let disp_left = estimate(left, right)?;
    let disp_right = estimate(&right.flip_horizontal(), &left.flip_horizontal())?.flip_horizontal();
    let mask = lr_consistency(&disp_left, &disp_right, threshold)?;
    Ok((disp_left, disp_right, mask))
}
