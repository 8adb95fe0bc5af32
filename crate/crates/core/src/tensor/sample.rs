use super::{Element, Tape, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// Linear interpolation along the last axis.
    ///
    /// `self` is `[.., L]`, `positions` is `[.., K]` with the same leading
    /// axes; `out[.., k] = self[.., positions[.., k]]`, reading zero outside
    /// `[0, L - 1]`. Differentiable in both operands.
    pub fn sample_linear(&self, positions: &Tensor<T>) -> Result<Tensor<T>> {
        let (rv, rp) = (self.rank(), positions.rank());
        if rv == 0 || rp != rv || self.shape()[..rv - 1] != positions.shape()[..rp - 1] {
            return Err(Error::ShapeMismatch {
                op: "sample_linear",
                lhs: self.shape().to_vec(),
                rhs: positions.shape().to_vec(),
            });
        }
        let l = self.dim(rv - 1);
        let k = positions.dim(rp - 1);
        let rows = positions.numel() / k.max(1);
        let v = self.shared_data();
        let p = positions.shared_data();

        // (left index, right weight) per sample
        let lookup = |x: T| -> (isize, T) {
            let f = x.floor();
            (f.to_isize().unwrap_or(isize::MIN / 2), x - f)
        };
        let read = move |v: &[T], row: usize, i: isize| -> T {
            if i >= 0 && (i as usize) < l {
                v[row * l + i as usize]
            } else {
                T::zero()
            }
        };
        let mut out = vec![T::zero(); rows * k];
        for r in 0..rows {
            for j in 0..k {
                let (i0, w1) = lookup(p[r * k + j]);
                out[r * k + j] = (T::one() - w1) * read(&v, r, i0) + w1 * read(&v, r, i0 + 1);
            }
        }
        let mut shape = positions.shape().to_vec();
        shape[rp - 1] = k;
        let vlen = v.len();
        Tape::record(shape, out, &[self, positions], move |g, needs| {
            let mut gv = needs[0].then(|| vec![T::zero(); vlen]);
            let mut gp = needs[1].then(|| vec![T::zero(); rows * k]);
            for r in 0..rows {
                for j in 0..k {
                    let gk = g[r * k + j];
                    let (i0, w1) = lookup(p[r * k + j]);
                    if let Some(gv) = gv.as_mut() {
                        if i0 >= 0 && (i0 as usize) < l {
                            gv[r * l + i0 as usize] += gk * (T::one() - w1);
                        }
                        let i1 = i0 + 1;
                        if i1 >= 0 && (i1 as usize) < l {
                            gv[r * l + i1 as usize] += gk * w1;
                        }
                    }
                    if let Some(gp) = gp.as_mut() {
                        gp[r * k + j] = gk * (read(&v, r, i0 + 1) - read(&v, r, i0));
                    }
                }
            }
            vec![gv, gp]
        })
    }
}
