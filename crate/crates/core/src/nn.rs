//! Convolution and linear layers with optional low-rank weight deltas.

use crate::scalar::Scalar;
use crate::tensor::{Graph, Initializer, Param, Var};

/// Identifies a layer that can host a low-rank adapter. `in_features` is the
/// flattened fan-in (`cin * kh * kw` for convolutions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterSlot {
    pub layer: String,
    pub out_features: usize,
    pub in_features: usize,
}

/// Low-rank weight delta `scaling * up @ down`. `up` starts at zero, so a
/// wrapped layer computes exactly its base output until training moves it.
#[derive(Clone)]
pub struct LoraDelta<T: Scalar> {
    pub down: Param<T>,
    pub up: Param<T>,
    pub scaling: f64,
}

impl<T: Scalar> LoraDelta<T> {
    pub fn new(
        name: &str,
        out_features: usize,
        in_features: usize,
        rank: usize,
        scaling: f64,
        init: &mut Initializer,
    ) -> Self {
        LoraDelta {
            down: Param::new(
                format!("{name}.down"),
                init.normal(&[rank, in_features], 0.02),
                true,
            ),
            up: Param::new(
                format!("{name}.up"),
                Initializer::zeros(&[out_features, rank]),
                true,
            ),
            scaling,
        }
    }

    /// `weight + scaling * reshape(up @ down)`, built in-graph so gradients
    /// reach the factors while the base weight stays untouched.
    pub fn apply(&self, g: &mut Graph<T>, weight: Var) -> Var {
        let shape = g.shape(weight).to_vec();
        let down = g.bind(&self.down);
        let up = g.bind(&self.up);
        let delta = g.matmul(up, down);
        let delta = g.mul_scalar(delta, T::from_f64(self.scaling));
        let delta = g.reshape(delta, &shape);
        g.add(weight, delta)
    }

    pub fn numel(&self) -> usize {
        self.down.numel() + self.up.numel()
    }
}

/// Looks up the delta for a named layer, if any. Implemented by adapter sets;
/// `()` means "no adapters anywhere".
pub trait AdapterLookup<T: Scalar> {
    fn delta_for(&self, layer: &str) -> Option<&LoraDelta<T>>;
}

impl<T: Scalar> AdapterLookup<T> for () {
    fn delta_for(&self, _layer: &str) -> Option<&LoraDelta<T>> {
        None
    }
}

impl<T: Scalar, A: AdapterLookup<T>> AdapterLookup<T> for Option<&A> {
    fn delta_for(&self, layer: &str) -> Option<&LoraDelta<T>> {
        self.and_then(|a| a.delta_for(layer))
    }
}

#[derive(Clone)]
pub struct Conv2d<T: Scalar> {
    pub name: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn seeded(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        trainable: bool,
        init: &mut Initializer,
    ) -> Self {
        let name = name.into();
        let weight = Param::new(
            format!("{name}.weight"),
            init.kaiming(&[cout, cin, k, k], 1.0),
            trainable,
        );
        let bias = Param::new(format!("{name}.bias"), Initializer::zeros(&[cout]), trainable);
        Conv2d {
            name,
            weight,
            bias: Some(bias),
            stride,
            pad,
        }
    }

    /// 1x1 convolution with weights and bias exactly zero; trainable.
    pub fn zeros_1x1(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                Initializer::zeros(&[channels, channels, 1, 1]),
                true,
            ),
            bias: Some(Param::new(
                format!("{name}.bias"),
                Initializer::zeros(&[channels]),
                true,
            )),
            name,
            stride: 1,
            pad: 0,
        }
    }

    pub fn slot(&self) -> AdapterSlot {
        let s = self.weight.shape();
        AdapterSlot {
            layer: self.name.clone(),
            out_features: s[0],
            in_features: s[1] * s[2] * s[3],
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, adapters: &impl AdapterLookup<T>) -> Var {
        let mut w = g.bind(&self.weight);
        if let Some(delta) = adapters.delta_for(&self.name) {
            w = delta.apply(g, w);
        }
        let b = self.bias.as_ref().map(|b| g.bind(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn collect_params(&self, out: &mut Vec<Param<T>>) {
        out.push(self.weight.clone());
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub name: String,
    pub weight: Param<T>, // [out, in]
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn seeded(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
        init: &mut Initializer,
    ) -> Self {
        let name = name.into();
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                init.kaiming(&[fan_out, fan_in], 1.0),
                trainable,
            ),
            bias: Param::new(format!("{name}.bias"), Initializer::zeros(&[fan_out]), trainable),
            name,
        }
    }

    pub fn slot(&self) -> AdapterSlot {
        let s = self.weight.shape();
        AdapterSlot {
            layer: self.name.clone(),
            out_features: s[0],
            in_features: s[1],
        }
    }

    /// `x @ W.T + bias` for 2-d `x` of shape `[n, in]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, adapters: &impl AdapterLookup<T>) -> Var {
        let mut w = g.bind(&self.weight);
        if let Some(delta) = adapters.delta_for(&self.name) {
            w = delta.apply(g, w);
        }
        let wt = g.permute(w, &[1, 0]);
        let y = g.matmul(x, wt);
        let b = g.bind(&self.bias);
        g.row_add(y, b)
    }

    pub fn collect_params(&self, out: &mut Vec<Param<T>>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn lora_delta_is_exact_zero_at_init() {
        let mut init = Initializer::new(3);
        let conv = Conv2d::<f64>::seeded("c", 2, 3, 3, 1, 1, false, &mut init);
        let delta = LoraDelta::new("c.lora", 3, 2 * 9, 4, 1.0, &mut init);

        let x = init.normal::<f64>(&[1, 2, 5, 5], 1.0);
        let mut g = Graph::new();
        let xv = g.input(x);
        let base = conv.forward(&mut g, xv, &());
        let wv = g.bind(&conv.weight);
        let adapted_w = delta.apply(&mut g, wv);
        let bv = g.bind(conv.bias.as_ref().unwrap());
        let adapted = g.conv2d(xv, adapted_w, Some(bv), 1, 1);
        assert_eq!(g.value(base), g.value(adapted), "zero delta must be exact");

        // Moving `up` off zero changes the output.
        delta
            .up
            .set_value(ArrayD::from_elem(IxDyn(&[3, 4]), 0.1f64));
        let mut g = Graph::new();
        let xv = g.input(init.normal::<f64>(&[1, 2, 5, 5], 1.0));
        let base = conv.forward(&mut g, xv, &());
        let wv = g.bind(&conv.weight);
        let adapted_w = delta.apply(&mut g, wv);
        let adapted = g.conv2d(xv, adapted_w, None, 1, 1);
        assert_ne!(g.value(base), g.value(adapted));
    }

    #[test]
    fn lora_param_count_matches_factorization() {
        let mut init = Initializer::new(0);
        let delta = LoraDelta::<f32>::new("l", 640, 320, 8, 1.0, &mut init);
        assert_eq!(delta.numel(), 8 * 320 + 640 * 8);
        assert_eq!(delta.numel(), 7680);
    }

    #[test]
    fn linear_matches_manual_matmul() {
        let mut init = Initializer::new(9);
        let lin = Linear::<f64>::seeded("l", 3, 2, false, &mut init);
        let x = init.normal::<f64>(&[4, 3], 1.0);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = lin.forward(&mut g, xv, &());
        let w = lin.weight.value().clone();
        let b = lin.bias.value().clone();
        for n in 0..4 {
            for o in 0..2 {
                let mut acc = b[[o]];
                for i in 0..3 {
                    acc += x[[n, i]] * w[[o, i]];
                }
                let got = g.value(y)[[n, o]];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_conv_contributes_nothing_at_init() {
        let mut init = Initializer::new(5);
        let zc = Conv2d::<f64>::zeros_1x1("z", 4);
        let x = init.normal::<f64>(&[2, 4, 3, 3], 1.0);
        let mut g = Graph::new();
        let xv = g.input(x);
        let y = zc.forward(&mut g, xv, &());
        assert!(g.value(y).iter().all(|v| *v == 0.0));
        assert!(zc.weight.trainable() && zc.bias.as_ref().unwrap().trainable());
    }
}
