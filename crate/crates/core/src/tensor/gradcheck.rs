use super::{Element, Tape, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central finite differences with step `eps`.
///
/// The relative error of each element uses `max(|g|, |g_fd|, 1e-8)` as its
/// denominator.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    grad_check_with(f, x, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_with<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(&x.detach());
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::NonScalarBackward(y.shape().to_vec()));
    }
    let grads = tape.backward(&y)?;
    let analytic: Vec<f64> = grads.get_or_zeros(&leaf).iter().map(|v| v.as_f64()).collect();

    let base = x.to_vec();
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut v = base.clone();
        v[i] = T::of(v[i].as_f64() + delta);
        let xp = Tensor::from_vec(x.shape().to_vec(), v)?;
        Ok(f(&xp)?.item().as_f64())
    };
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        // Use the perturbation actually representable in T.
        let hi = T::of(base[i].as_f64() + eps).as_f64() - base[i].as_f64();
        let lo = base[i].as_f64() - T::of(base[i].as_f64() - eps).as_f64();
        numeric.push((eval(i, eps)? - eval(i, -eps)?) / (hi + lo));
    }
    Ok(compare(analytic, numeric))
}

/// Checks an f32 tape gradient against central differences of the same
/// function evaluated in f64.
///
/// `f32_fn` and `f64_fn` must compute the same function; the f64 forward
/// keeps the difference quotient free of single-precision rounding, so the
/// comparison isolates errors in the f32 backward pass.
pub fn grad_check_mixed<F, G>(f32_fn: F, f64_fn: G, x: &Tensor<f32>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
    G: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(&x.detach());
    let y = f32_fn(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::NonScalarBackward(y.shape().to_vec()));
    }
    let grads = tape.backward(&y)?;
    let analytic: Vec<f64> = grads.get_or_zeros(&leaf).iter().map(|&v| v as f64).collect();
    let x64: Tensor<f64> = x.cast();
    let numeric = central_differences(&f64_fn, &x64, eps)?;
    Ok(compare(analytic, numeric))
}

fn central_differences<G>(f: &G, x: &Tensor<f64>, eps: f64) -> Result<Vec<f64>>
where
    G: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let base = x.to_vec();
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut v = base.clone();
        v[i] += delta;
        Ok(f(&Tensor::from_vec(x.shape().to_vec(), v)?)?.item())
    };
    (0..base.len())
        .map(|i| Ok((eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps)))
        .collect()
}

fn compare(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheckReport {
    let mut worst = (0.0f64, 0usize);
    for (i, (&g, &fd)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = g.abs().max(fd.abs()).max(1e-8);
        let rel = (g - fd).abs() / denom;
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    }
}
