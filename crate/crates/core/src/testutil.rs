//! Shared oracles for the test suite: finite-difference gradient checks and
//! a loop-nest convolution, both independent of the graph engine.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Var};

pub(crate) fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    // Magnitudes bounded away from zero so kinked ops (abs, relu, clamp)
    // are differentiable at every sampled point.
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central-difference gradient check of a scalar-valued graph function.
pub(crate) fn gradcheck(
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    inputs: &[ArrayD<f64>],
    eps: f64,
    tol: f64,
) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).len(), 1, "gradcheck needs a scalar output");
    let grads = g.backward(loss);

    let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| g.input(x.clone())).collect();
        let loss = build(&mut g, &vars);
        g.scalar(loss)
    };

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .unwrap_or_else(|| panic!("no gradient for input {i}"));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < tol,
                "input {i} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Direct nested-loop convolution, independent of the graph engine.
pub(crate) fn naive_conv2d(
    x: &Array4<f64>,
    w: &Array4<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Array4::<f64>::zeros((b, cout, ho, wo));
    for bi in 0..b {
        for co in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = bias.map(|bv| bv[co]).unwrap_or(0.0);
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += x[[bi, ci, ii as usize, jj as usize]]
                                    * w[[co, ci, ki, kj]];
                            }
                        }
                    }
                    out[[bi, co, oi, oj]] = acc;
                }
            }
        }
    }
    out
}
