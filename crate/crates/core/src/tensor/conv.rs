//! Convolution and spatial rearrangement operations (NCHW layout).

use super::{Graph, Var};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, ArrayD, ArrayView3, ArrayView4, Ix4};

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image into a (Cin*kh*kw, Ho*Wo) patch matrix.
fn im2col<T: Scalar>(
    x: ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<T>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[c, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch-matrix gradient back onto the input image.
fn col2im<T: Scalar>(
    gcols: &Array2<T>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<T> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut gx = ndarray::Array3::<T>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[[c, ii as usize, jj as usize]] =
                            gx[[c, ii as usize, jj as usize]] + gcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    gx
}

fn conv_forward<T: Scalar>(
    x: ArrayView4<'_, T>,
    w: ArrayView4<'_, T>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (b, _cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(x.shape()[1], cin_w, "conv2d: channel mismatch");
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let w2 = w
        .to_shape((cout, cin_w * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let mut out = Array4::<T>::zeros((b, cout, ho, wo));
    for bi in 0..b {
        let cols = im2col(x.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad);
        let y = w2.dot(&cols); // (Cout, Ho*Wo)
        let y4 = y.to_shape((cout, ho, wo)).expect("output reshape");
        out.index_axis_mut(ndarray::Axis(0), bi).assign(&y4);
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// 2-D convolution, NCHW input, OIHW weight, optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let value = conv_forward(xv, wv, stride, pad);
        let y = self.push_op(
            value.into_dyn(),
            vec![x, w],
            Box::new(move |ctx| {
                let xp = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let wp = ctx.parents[1].view().into_dimensionality::<Ix4>().unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let (b, cin, h, wd) = (xp.shape()[0], xp.shape()[1], xp.shape()[2], xp.shape()[3]);
                let (cout, _, kh, kw) = (wp.shape()[0], wp.shape()[1], wp.shape()[2], wp.shape()[3]);
                let k = cin * kh * kw;
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let w2 = wp.to_shape((cout, k)).unwrap().to_owned();
                let mut gx = Array4::<T>::zeros((b, cin, h, wd));
                let mut gw2 = Array2::<T>::zeros((cout, k));
                for bi in 0..b {
                    let g2 = g
                        .index_axis(ndarray::Axis(0), bi)
                        .to_shape((cout, ho * wo))
                        .unwrap()
                        .to_owned();
                    let cols = im2col(xp.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad);
                    gw2 = gw2 + g2.dot(&cols.t());
                    let gcols = w2.t().dot(&g2); // (K, Ho*Wo)
                    let gxb = col2im(&gcols, cin, h, wd, kh, kw, stride, pad);
                    gx.index_axis_mut(ndarray::Axis(0), bi).assign(&gxb);
                }
                let gw = gw2.to_shape((cout, cin, kh, kw)).unwrap().to_owned();
                vec![Some(gx.into_dyn()), Some(gw.into_dyn())]
            }),
            "conv2d",
        );
        match bias {
            Some(b) => self.bias_add(y, b),
            None => y,
        }
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = Array4::<T>::zeros((b, c, h * factor, w * factor));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h * factor {
                    for j in 0..w * factor {
                        out[[bi, ci, i, j]] = xv[[bi, ci, i / factor, j / factor]];
                    }
                }
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<T>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h * factor {
                            for j in 0..w * factor {
                                gx[[bi, ci, i / factor, j / factor]] =
                                    gx[[bi, ci, i / factor, j / factor]] + g[[bi, ci, i, j]];
                            }
                        }
                    }
                }
                vec![Some(gx.into_dyn())]
            }),
            "upsample_nearest",
        )
    }

    /// Average pooling with a square window and equal stride.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(
            h % factor == 0 && w % factor == 0,
            "avg_pool: dims not divisible by factor"
        );
        let inv = T::one() / T::from_usize(factor * factor);
        let (ho, wo) = (h / factor, w / factor);
        let mut out = Array4::<T>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = T::zero();
                        for di in 0..factor {
                            for dj in 0..factor {
                                s = s + xv[[bi, ci, i * factor + di, j * factor + dj]];
                            }
                        }
                        out[[bi, ci, i, j]] = s * inv;
                    }
                }
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<T>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = g[[bi, ci, i, j]] * inv;
                                for di in 0..factor {
                                    for dj in 0..factor {
                                        gx[[bi, ci, i * factor + di, j * factor + dj]] = gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx.into_dyn())]
            }),
            "avg_pool",
        )
    }

    /// Spatial crop of an NCHW tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        assert!(
            top + h <= xv.shape()[2] && left + w <= xv.shape()[3],
            "crop: window out of bounds"
        );
        let value = xv
            .slice(ndarray::s![.., .., top..top + h, left..left + w])
            .to_owned();
        let full = self.value(x).raw_dim();
        self.push_op(
            value.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let mut gx = ArrayD::<T>::zeros(full.clone());
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                gx.view_mut()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .slice_mut(ndarray::s![.., .., top..top + h, left..left + w])
                    .assign(&g);
                vec![Some(gx)]
            }),
            "crop",
        )
    }

    /// Place `rows*cols` equally shaped NCHW blocks side by side in row-major
    /// grid order, producing one tensor of `rows*ph x cols*pw` spatial size.
    pub fn grid_concat(&mut self, parts: &[Var], rows: usize, cols: usize) -> Var {
        assert_eq!(parts.len(), rows * cols, "grid_concat: grid/part mismatch");
        let p0 = self.value(parts[0]).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, ph, pw) = (p0.shape()[0], p0.shape()[1], p0.shape()[2], p0.shape()[3]);
        let mut out = Array4::<T>::zeros((b, c, rows * ph, cols * pw));
        for (i, part) in parts.iter().enumerate() {
            let pv = self.value(*part).view().into_dimensionality::<Ix4>().unwrap();
            assert_eq!(pv.shape(), p0.shape(), "grid_concat: block shape mismatch");
            let (r, cc) = (i / cols, i % cols);
            out.slice_mut(ndarray::s![
                ..,
                ..,
                r * ph..(r + 1) * ph,
                cc * pw..(cc + 1) * pw
            ])
            .assign(&pv);
        }
        self.push_op(
            out.into_dyn(),
            parts.to_vec(),
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut grads = Vec::with_capacity(rows * cols);
                for i in 0..rows * cols {
                    let (r, cc) = (i / cols, i % cols);
                    let gp = g
                        .slice(ndarray::s![
                            ..,
                            ..,
                            r * ph..(r + 1) * ph,
                            cc * pw..(cc + 1) * pw
                        ])
                        .to_owned();
                    grads.push(Some(gp.into_dyn()));
                }
                grads
            }),
            "grid_concat",
        )
    }
}
