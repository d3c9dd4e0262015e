//! Matrix products and shape manipulation.

use super::{Graph, Var};
use crate::scalar::Scalar;
use ndarray::{Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};

fn reshaped<T: Scalar>(value: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let flat: Vec<T> = value.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape: element count mismatch")
}

impl<T: Scalar> Graph<T> {
    /// 2-D matrix product `(M,K) x (K,N) -> (M,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let value = av.dot(&bv);
        self.push_op(
            value.into_dyn(),
            vec![a, b],
            Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let ap = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let bp = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    Some(g.dot(&bp.t()).into_dyn()),
                    Some(ap.t().dot(&g).into_dyn()),
                ]
            }),
            "matmul",
        )
    }

    /// Batched matrix product `(B,M,K) x (B,K,N) -> (B,M,N)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm: batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm: inner dim mismatch");
        let (nb, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut out = Array3::<T>::zeros((nb, m, n));
        for i in 0..nb {
            let y = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        self.push_op(
            out.into_dyn(),
            vec![a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let ap = ctx.parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let bp = ctx.parents[1].view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = Array3::<T>::zeros(ap.raw_dim());
                let mut gb = Array3::<T>::zeros(bp.raw_dim());
                for i in 0..nb {
                    let gi = g.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bp.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&ap.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
            }),
            "bmm",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = reshaped(self.value(a), shape);
        let parent_shape: Vec<usize> = self.shape(a).to_vec();
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| vec![Some(reshaped(ctx.grad, &parent_shape))]),
            "reshape",
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_owned: Vec<usize> = axes.to_vec();
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_owned.len()];
        for (i, &ax) in axes_owned.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                vec![Some(g)]
            }),
            "permute",
        )
    }

    /// Softmax along the last axis with max-shift stabilization.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let last = self.value(a).ndim() - 1;
        let mut value = self.value(a).clone();
        for mut lane in value.lanes_mut(Axis(last)) {
            let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
            lane.mapv_inplace(|x| (x - max).exp());
            let sum = lane.iter().copied().fold(T::zero(), |acc, x| acc + x);
            lane.mapv_inplace(|x| x / sum);
        }
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                let y = ctx.value;
                for (mut glane, ylane) in g.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                {
                    let dot = glane
                        .iter()
                        .zip(ylane.iter())
                        .fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                    glane
                        .iter_mut()
                        .zip(ylane.iter())
                        .for_each(|(gv, &yv)| *gv = yv * (*gv - dot));
                }
                vec![Some(g)]
            }),
            "softmax_lastdim",
        )
    }
}
