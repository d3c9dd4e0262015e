//! Elementwise, reduction, and structural operations.

use super::{Graph, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

fn two<T: Scalar>() -> T {
    T::one() + T::one()
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
            "add",
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(-ctx.grad.clone())]),
            "sub",
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad * ctx.parents[1]),
                    Some(ctx.grad * ctx.parents[0]),
                ]
            }),
            "mul",
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).mapv(|x| x + s);
        self.push_op(
            value,
            vec![a],
            Box::new(|ctx| vec![Some(ctx.grad.clone())]),
            "add_scalar",
        )
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).mapv(|x| x * s);
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad.mapv(|g| g * s))]),
            "mul_scalar",
        )
    }

    /// `x + bias` where `x` is NCHW and `bias` has one entry per channel.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(bias);
        assert_eq!(bv.shape(), &[xv.shape()[1]], "bias_add: channel mismatch");
        let mut value = xv.to_owned();
        for (c, b) in bv.iter().enumerate() {
            value.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + *b);
        }
        self.push_op(
            value.into_dyn(),
            vec![x, bias],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                vec![Some(ctx.grad.clone()), Some(gb.into_dyn())]
            }),
            "bias_add",
        )
    }

    /// `x + bias` broadcast over rows: `x` is `[n, d]`, `bias` is `[d]`.
    pub fn row_add(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(bias);
        assert_eq!(bv.shape(), &[xv.shape()[1]], "row_add: width mismatch");
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let mut value = xv.to_owned();
        for mut row in value.rows_mut() {
            row.zip_mut_with(&b1, |v, b| *v = *v + *b);
        }
        self.push_op(
            value.into_dyn(),
            vec![x, bias],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let gb = g.sum_axis(Axis(0));
                vec![Some(ctx.grad.clone()), Some(gb.into_dyn())]
            }),
            "row_add",
        )
    }

    /// Fixed per-channel affine `x * scale[c] + shift[c]` on NCHW input.
    /// Scale and shift are constants, not graph variables.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let c = xv.shape()[1];
        assert_eq!(scale.len(), c, "channel_affine: scale length mismatch");
        assert_eq!(shift.len(), c, "channel_affine: shift length mismatch");
        let mut value = xv.to_owned();
        for ci in 0..c {
            let (s, b) = (scale[ci], shift[ci]);
            value.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * s + b);
        }
        let scale = scale.to_vec();
        self.push_op(
            value.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let mut g = ctx
                    .grad
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                for (ci, s) in scale.iter().enumerate() {
                    g.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * *s);
                }
                vec![Some(g.into_dyn())]
            }),
            "channel_affine",
        )
    }

    /// Mean over the spatial axes of an NCHW tensor, yielding `[N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let value = xv
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|v| v * T::from_usize(h * w).recip());
        self.push_op(
            value.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let inv = T::from_usize(h * w).recip();
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[n, c, h, w]));
                {
                    let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let v = g[[ni, ci]] * inv;
                            gx4.index_axis_mut(Axis(0), ni)
                                .index_axis_mut(Axis(0), ci)
                                .fill(v);
                        }
                    }
                }
                vec![Some(gx)]
            }),
            "mean_spatial",
        )
    }

    fn unary(
        &mut self,
        a: Var,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Var {
        let value = self.value(a).mapv(&f);
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gv, &x| *gv = *gv * df(x));
                vec![Some(g)]
            }),
            op,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            "relu",
            |x| x.max(T::zero()),
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * slope },
            move |x| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            "silu",
            |x| x * sigmoid_scalar(x),
            |x| {
                let s = sigmoid_scalar(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, "tanh", |x| x.tanh(), |x| {
            let y = x.tanh();
            T::one() - y * y
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, "sigmoid", sigmoid_scalar, |x| {
            let y = sigmoid_scalar(x);
            y * (T::one() - y)
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, "softplus", softplus_scalar, sigmoid_scalar)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, "abs", |x| x.abs(), |x| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, "square", |x| x * x, |x| two::<T>() * x)
    }

    /// Clamp to `[lo, hi]`; the gradient passes through inside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gv, &x| {
                    if x < lo || x > hi {
                        *gv = T::zero();
                    }
                });
                vec![Some(g)]
            }),
            "clamp",
        )
    }

    /// Mean over all elements; result is 0-d.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len());
        let mean = self.value(a).sum() / n;
        let parent_dim = self.value(a).raw_dim();
        self.push_op(
            ndarray::arr0(mean).into_dyn(),
            vec![a],
            Box::new(move |ctx| {
                let g = *ctx.grad.iter().next().unwrap() / n;
                vec![Some(ArrayD::from_elem(parent_dim.clone(), g))]
            }),
            "mean_all",
        )
    }

    /// Mean binary cross-entropy with logits against a constant target
    /// (every element labeled `target`, typically 0 or 1).
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: T) -> Var {
        let lv = self.value(logits);
        let n = T::from_usize(lv.len());
        let loss = lv.iter().map(|&l| softplus_scalar(l) - target * l).fold(T::zero(), |a, b| a + b) / n;
        self.push_op(
            ndarray::arr0(loss).into_dyn(),
            vec![logits],
            Box::new(move |ctx| {
                let g = *ctx.grad.iter().next().unwrap() / n;
                vec![Some(ctx.parents[0].mapv(|l| (sigmoid_scalar(l) - target) * g))]
            }),
            "bce_with_logits_mean",
        )
    }

    /// Scale every channel vector to unit L2 norm: `y = x / sqrt(sum_c x^2 + eps)`
    /// per (batch, h, w) position of an NCHW tensor.
    pub fn channel_unit_normalize(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut value = xv.to_owned();
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let mut nsq = eps;
                    for ci in 0..c {
                        let v = value[[bi, ci, hi, wi]];
                        nsq = nsq + v * v;
                    }
                    let n = nsq.sqrt();
                    for ci in 0..c {
                        value[[bi, ci, hi, wi]] = value[[bi, ci, hi, wi]] / n;
                    }
                }
            }
        }
        self.push_op(
            value.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let xp = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let y = ctx.value.view().into_dimensionality::<Ix4>().unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut out = ndarray::Array4::<T>::zeros(xp.raw_dim());
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            let mut nsq = eps;
                            let mut gy = T::zero();
                            for ci in 0..c {
                                let v = xp[[bi, ci, hi, wi]];
                                nsq = nsq + v * v;
                                gy = gy + g[[bi, ci, hi, wi]] * y[[bi, ci, hi, wi]];
                            }
                            let n = nsq.sqrt();
                            for ci in 0..c {
                                out[[bi, ci, hi, wi]] =
                                    (g[[bi, ci, hi, wi]] - y[[bi, ci, hi, wi]] * gy) / n;
                            }
                        }
                    }
                }
                vec![Some(out.into_dyn())]
            }),
            "channel_unit_normalize",
        )
    }

    /// Cut the value out of the tape: same data, no gradient history.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Horizontal flip of an NCHW tensor (differentiable; used as an
    /// optional discriminator augmentation).
    pub fn flip_w(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.invert_axis(Axis(value.ndim() - 1));
        self.push_op(
            value,
            vec![a],
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.invert_axis(Axis(g.ndim() - 1));
                vec![Some(g)]
            }),
            "flip_w",
        )
    }

    /// Concatenate along the batch (first) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_batch: no parts");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_batch: shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[0]).collect();
        self.push_op(
            value,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &len in &sizes {
                    let slice = ctx
                        .grad
                        .slice_axis(Axis(0), ndarray::Slice::from(start..start + len));
                    out.push(Some(slice.to_owned()));
                    start += len;
                }
                out
            }),
            "concat_batch",
        )
    }

    /// Slice `len` entries of the batch axis starting at `start`.
    pub fn slice_batch(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let full = self.value(a).raw_dim();
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ArrayD::<T>::zeros(full.clone());
                g.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                    .assign(ctx.grad);
                vec![Some(g)]
            }),
            "slice_batch",
        )
    }
}
