use std::rc::Rc;

use super::{check_axis, split_axis, Element, Tape, Tensor};
use crate::error::Result;

impl<T: Element> Tensor<T> {
    /// Softmax along `axis`, with the slice maximum subtracted first.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", axis, self.rank())?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for l in 0..len {
                    m = m.max(x[base + l * inner]);
                }
                let mut s = T::zero();
                for l in 0..len {
                    let e = (x[base + l * inner] - m).exp();
                    y[base + l * inner] = e;
                    s += e;
                }
                let inv = s.recip();
                for l in 0..len {
                    y[base + l * inner] *= inv;
                }
            }
        }
        let ys = Rc::new(y.clone());
        Tape::record(self.shape().to_vec(), y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for l in 0..len {
                        dot += g[base + l * inner] * ys[base + l * inner];
                    }
                    for l in 0..len {
                        let k = base + l * inner;
                        gx[k] = ys[k] * (g[k] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Normalizes every slice along the last axis to zero mean and unit
    /// variance (no affine parameters).
    pub fn layer_norm(&self, eps: f64) -> Tensor<T> {
        let c = *self.shape().last().expect("layer_norm needs rank >= 1");
        let rows = self.numel() / c.max(1);
        let x = self.data();
        let eps = T::of(eps);
        let cn = T::of(c as f64);
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for (o, &v) in y[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let ys = Rc::new(y.clone());
        Tape::record(self.shape().to_vec(), y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let yr = &ys[r * c..(r + 1) * c];
                let mg = gr.iter().copied().sum::<T>() / cn;
                let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / cn;
                for k in 0..c {
                    gx[r * c + k] = inv_std[r] * (gr[k] - mg - yr[k] * mgy);
                }
            }
            vec![Some(gx)]
        })
        .expect("single input")
    }
}
