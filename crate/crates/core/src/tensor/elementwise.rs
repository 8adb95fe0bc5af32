use std::rc::Rc;

use super::{strides, Element, Tape, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of `input` it reads under
/// broadcasting.
pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; rank];
    for (k, (&d, &s)) in input.iter().zip(&in_strides).enumerate() {
        if d != 1 {
            eff[rank - input.len() + k] = s;
        }
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

impl<T: Element> Tensor<T> {
    fn unary<F, D>(&self, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let y: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.shared_data();
        let y_saved = Rc::new(y.clone());
        Tape::record(self.shape().to_vec(), y, &[self], move |g, _| {
            let gx = g
                .iter()
                .zip(x.iter())
                .zip(y_saved.iter())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
        .expect("unary op on a single tape")
    }

    fn binary<F, DA, DB>(&self, other: &Tensor<T>, op: &'static str, f: F, da: DA, db: DB) -> Result<Tensor<T>>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T) -> T + 'static,
        DB: Fn(T, T) -> T + 'static,
    {
        let a = self.shared_data();
        let b = other.shared_data();
        let (ashape, bshape) = (self.shape().to_vec(), other.shape().to_vec());
        if ashape == bshape {
            let out: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
            return Tape::record(ashape, out, &[self, other], move |g, needs| {
                let ga = needs[0].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&g, (&x, &y))| g * da(x, y))
                        .collect()
                });
                let gb = needs[1].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&g, (&x, &y))| g * db(x, y))
                        .collect()
                });
                vec![ga, gb]
            });
        }
        let shape = broadcast_shape(&ashape, &bshape).ok_or(Error::ShapeMismatch {
            op,
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        })?;
        let ma = broadcast_map(&shape, &ashape);
        let mb = broadcast_map(&shape, &bshape);
        let out: Vec<T> = ma.iter().zip(&mb).map(|(&i, &j)| f(a[i], b[j])).collect();
        let (na, nb) = (a.len(), b.len());
        Tape::record(shape, out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); na];
                for (k, &gk) in g.iter().enumerate() {
                    ga[ma[k]] += gk * da(a[ma[k]], b[mb[k]]);
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); nb];
                for (k, &gk) in g.iter().enumerate() {
                    gb[mb[k]] += gk * db(a[ma[k]], b[mb[k]]);
                }
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "div", |a, b| a / b, |_, b| b.recip(), |a, b| -a / (b * b))
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::of(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::of(s);
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Tensor<T> {
        self.unary(|x| T::one() - x, |_, _| -T::one())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let k = T::of((2.0 / std::f64::consts::PI).sqrt());
        let a = T::of(0.044715);
        let half = T::of(0.5);
        let three = T::of(3.0);
        self.unary(
            move |x| half * x * (T::one() + (k * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let t = (k * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
            },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), |x, _| x.recip())
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// `max(x, lo)`; the gradient is passed only where `x > lo`.
    pub fn clamp_min(&self, lo: f64) -> Tensor<T> {
        let lo = T::of(lo);
        self.unary(
            move |x| if x > lo { x } else { lo },
            move |x, _| if x > lo { T::one() } else { T::zero() },
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::one() } else { T::zero() },
        )
    }
}
