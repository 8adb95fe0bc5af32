use super::elementwise::{broadcast_map, broadcast_shape};
use super::{gemm, Element, MatView, Tape, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    ///
    /// Batch axes broadcast like elementwise ops; gradients of broadcast
    /// operands are summed over the broadcast batches.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.dim(ra - 2), self.dim(ra - 1));
        let (k2, n) = (other.dim(rb - 2), other.dim(rb - 1));
        if k != k2 {
            return Err(mismatch());
        }
        let abatch = &self.shape()[..ra - 2];
        let bbatch = &other.shape()[..rb - 2];
        let batch = broadcast_shape(abatch, bbatch).ok_or_else(mismatch)?;
        let amap = broadcast_map(&batch, abatch);
        let bmap = broadcast_map(&batch, bbatch);
        let nb = amap.len();

        let a = self.shared_data();
        let b = other.shared_data();
        let mut out = vec![T::zero(); nb * m * n];
        for (bi, c) in out.chunks_mut(m * n).enumerate() {
            let av = MatView::new(&a[amap[bi] * m * k..], m, k);
            let bv = MatView::new(&b[bmap[bi] * k * n..], k, n);
            gemm(av, bv, T::zero(), c);
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let (na, nbn) = (a.len(), b.len());
        Tape::record(shape, out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); na];
                for bi in 0..nb {
                    let gv = MatView::new(&g[bi * m * n..], m, n);
                    let bv = MatView::new(&b[bmap[bi] * k * n..], k, n).t();
                    gemm(gv, bv, T::one(), &mut ga[amap[bi] * m * k..(amap[bi] + 1) * m * k]);
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); nbn];
                for bi in 0..nb {
                    let av = MatView::new(&a[amap[bi] * m * k..], m, k).t();
                    let gv = MatView::new(&g[bi * m * n..], m, n);
                    gemm(av, gv, T::one(), &mut gb[bmap[bi] * k * n..(bmap[bi] + 1) * k * n]);
                }
                gb
            });
            vec![ga, gb]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};

    #[test]
    fn hand_arithmetic() {
        let a = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_is_exact() {
        let a = Tensor::<f64>::from_fn(&[3, 3], |i| (i as f64 * 1.7).sin() * 10.0);
        let i3 = Tensor::<f64>::eye(3);
        assert_eq!(i3.matmul(&a).unwrap().data(), a.data());
        assert_eq!(a.matmul(&i3).unwrap().data(), a.data());
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gradient_of_sum_is_broadcast_transpose() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = Tensor::from_fn(&[3, 4], |i| (i as f64) * 0.5 - 1.0);
        let g = a.matmul(&b).unwrap().sum().backward().unwrap();
        // d sum(AB) / dA[i,k] = sum_j B[k,j]
        let row: Vec<f64> = (0..3).map(|k| (0..4).map(|j| b.at(&[k, j])).sum()).collect();
        let ga = g.get(&a).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                assert!((ga[i * 3 + k] - row[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_broadcast_gradients() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[4, 5], |i| (i as f64 * 0.91).cos());
        let err = grad_check(|a| Ok(a.matmul(&b)?.square().sum()), &a, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(|b| Ok(a.matmul(b)?.square().sum()), &b, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
