//! Learned perceptual distance over a small frozen feature network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Initializer, Param, Var};

const NORM_EPS: f64 = 1e-10;

/// Identifies the feature network and per-layer weighting of the distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptualMetricSpec {
    pub network: String,
    pub layer_weights: Vec<f64>,
}

impl Default for PerceptualMetricSpec {
    fn default() -> Self {
        PerceptualMetricSpec {
            network: "tiny".into(),
            layer_weights: vec![1.0, 1.0],
        }
    }
}

/// Frozen feature extractor. Distance is the layer-weighted mean squared gap
/// between channel-normalized features, the LPIPS form.
pub struct PerceptualNet<T: Scalar> {
    layers: Vec<Conv2d<T>>,
    layer_weights: Vec<f64>,
}

impl<T: Scalar> PerceptualNet<T> {
    pub fn from_spec(spec: &PerceptualMetricSpec, seed: u64) -> Result<Self> {
        if spec.network != "tiny" {
            return Err(Error::config(format!(
                "unknown perceptual network `{}` (only `tiny` is built in)",
                spec.network
            )));
        }
        Ok(Self::tiny(&spec.layer_weights, seed))
    }

    pub fn tiny(layer_weights: &[f64], seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let channels = [8usize, 16];
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate().take(layer_weights.len()) {
            layers.push(Conv2d::seeded(
                format!("lpips.conv{i}"),
                cin,
                cout,
                3,
                2,
                1,
                false,
                &mut init,
            ));
            cin = cout;
        }
        let used = layers.len();
        PerceptualNet {
            layers,
            layer_weights: layer_weights[..used].to_vec(),
        }
    }

    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for conv in &self.layers {
            h = conv.forward(g, h, &());
            h = g.relu(h);
            out.push(h);
        }
        out
    }

    /// d(a, b) = Σ_l w_l · mean‖norm(f_l(a)) − norm(f_l(b))‖². Zero iff the
    /// feature stacks agree; symmetric because the gap is squared.
    pub fn distance(&self, g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (g.shape(a), g.shape(b));
        if sa != sb {
            return Err(Error::dim(format!(
                "perceptual distance needs matching shapes, got {sa:?} vs {sb:?}"
            )));
        }
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let eps = T::from_f64(NORM_EPS);
        let mut total: Option<Var> = None;
        for ((xa, xb), &w) in fa.into_iter().zip(fb).zip(&self.layer_weights) {
            let na = g.channel_unit_normalize(xa, eps);
            let nb = g.channel_unit_normalize(xb, eps);
            let diff = g.sub(na, nb);
            let sq = g.square(diff);
            let m = g.mean_all(sq);
            let term = g.mul_scalar(m, T::from_f64(w));
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        Ok(total.expect("perceptual net has at least one layer"))
    }

    pub fn params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        for conv in &self.layers {
            conv.collect_params(&mut out);
        }
        out
    }
}
