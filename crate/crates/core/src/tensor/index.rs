use std::rc::Rc;

use super::{check_axis, split_axis, strides, Element, Tape, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// `out[k] = self[map[k]]`; the backward pass scatter-adds into the
    /// gathered positions.
    fn take(&self, shape: Vec<usize>, map: Vec<usize>) -> Tensor<T> {
        let x = self.data();
        let out: Vec<T> = map.iter().map(|&i| x[i]).collect();
        let n = self.numel();
        Tape::record(shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (&i, &gk) in map.iter().zip(g) {
                gx[i] += gk;
            }
            vec![Some(gx)]
        })
        .expect("single input")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.shared_data();
        Ok(match self.var() {
            None => Tensor::from_shared(shape.to_vec(), data),
            Some(_) => Tape::record(shape.to_vec(), data.as_ref().clone(), &[self], |g, _| {
                vec![Some(g.to_vec())]
            })?,
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                reason: format!("{axes:?} is not a permutation of its axes"),
            });
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = strides(self.shape());
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        Ok(self.take(shape.clone(), strided_map(&shape, &perm_strides, 0)))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        check_axis("transpose", a.max(b), self.rank())?;
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        check_axis("slice", axis, self.rank())?;
        let len = self.dim(axis);
        if start > end || end > len {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: end.max(start),
                len,
            });
        }
        let idx: Vec<usize> = (start..end).collect();
        self.gather_axis(axis, &idx)
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather_axis(&self, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        check_axis("gather_axis", axis, self.rank())?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange {
                op: "gather_axis",
                index: bad,
                len,
            });
        }
        let mut map = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let base = (o * len + ix) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        Ok(self.take(shape, map))
    }

    /// Reverses the order along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("flip", axis, self.rank())?;
        let len = self.dim(axis);
        let idx: Vec<usize> = (0..len).rev().collect();
        self.gather_axis(axis, &idx)
    }

    /// Materializes a broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        match super::elementwise::broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {
                let map = super::elementwise::broadcast_map(shape, self.shape());
                Ok(self.take(shape.to_vec(), map))
            }
            _ => Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            }),
        }
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            shape: Vec::new(),
            reason: "no inputs".into(),
        })?;
        check_axis("concat", axis, first.rank())?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let lens = Rc::new(lens);
        Tape::record(shape, out, parts, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(lens.iter())
                .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(lens.iter()) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let expanded = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend_from_slice(p.shape());
                p.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = expanded.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Replicates the first and last `pad` entries along `axis`.
    pub fn pad_replicate(&self, axis: usize, pad: usize) -> Result<Tensor<T>> {
        check_axis("pad_replicate", axis, self.rank())?;
        let len = self.dim(axis);
        if len == 0 {
            return Err(Error::InvalidShape {
                op: "pad_replicate",
                shape: self.shape().to_vec(),
                reason: "empty axis".into(),
            });
        }
        let idx: Vec<usize> = (0..len + 2 * pad)
            .map(|i| i.saturating_sub(pad).min(len - 1))
            .collect();
        self.gather_axis(axis, &idx)
    }
}

/// Flat source offsets for iterating `shape` with per-axis source strides.
fn strided_map(shape: &[usize], src_strides: &[usize], base: usize) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = base;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}
