use super::{check_axis, split_axis, Element, Tape, Tensor};
use crate::error::Result;

impl<T: Element> Tensor<T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        // f64 accumulation keeps f32 finite differences usable.
        let s = self.data().iter().map(|v| v.as_f64()).sum::<f64>();
        let n = self.numel();
        Tape::record(Vec::new(), vec![T::of(s)], &[self], move |g, _| vec![Some(vec![g[0]; n])])
            .expect("single input")
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel().max(1) as f64)
    }

    /// Sum over `axis`; the axis is kept with length 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis("sum_axis", axis, self.rank())?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tape::record(shape, out, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis("mean_axis", axis, self.rank())?;
        let len = self.dim(axis).max(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }
}
