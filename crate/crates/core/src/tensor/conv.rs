use std::rc::Rc;

use super::{gemm, Element, MatView, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Element>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// 2-D cross-correlation `[B,C,H,W] * [O,C,kh,kw] -> [B,O,H',W']` with
    /// zero padding, computed as im2col followed by a matrix product.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let bad = |reason: &str| Error::InvalidShape {
            op: "conv2d",
            shape: weight.shape().to_vec(),
            reason: reason.to_string(),
        };
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (o, wc, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d (channels)",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(bad("kernel sizes must be odd"));
        }
        if stride == 0 {
            return Err(bad("stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(bad("kernel larger than padded input"));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let g = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let (rows, ncols) = (g.rows(), g.cols());
        let x = self.data();
        let wt = weight.shared_data();
        let mut cols = vec![T::zero(); b * rows * ncols];
        let mut out = vec![T::zero(); b * o * ncols];
        for bi in 0..b {
            let cb = &mut cols[bi * rows * ncols..(bi + 1) * rows * ncols];
            im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, cb);
            gemm(
                MatView::new(&wt, o, rows),
                MatView::new(cb, rows, ncols),
                T::zero(),
                &mut out[bi * o * ncols..(bi + 1) * o * ncols],
            );
        }
        let cols = Rc::new(cols);
        let in_len = self.numel();
        Tape::record(vec![b, o, ho, wo], out, &[self, weight], move |gout, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); in_len];
                let mut gcols = vec![T::zero(); rows * ncols];
                for bi in 0..b {
                    gemm(
                        MatView::new(&wt, o, rows).t(),
                        MatView::new(&gout[bi * o * ncols..], o, ncols),
                        T::zero(),
                        &mut gcols,
                    );
                    col2im(&gcols, &g, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); o * rows];
                for bi in 0..b {
                    gemm(
                        MatView::new(&gout[bi * o * ncols..], o, ncols),
                        MatView::new(&cols[bi * rows * ncols..], rows, ncols).t(),
                        T::one(),
                        &mut gw,
                    );
                }
                gw
            });
            vec![gx, gw]
        })
    }
}
