//! Realism critics: frozen vision trunks with small trainable heads, plus a
//! fully trainable patch discriminator baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Initializer, Param, Var};

const LEAKY_SLOPE: f64 = 0.2;
/// Trainable head must stay below this fraction of the frozen trunk size.
const HEAD_CAPACITY_BOUND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    /// Frozen pathology vision-language trunk + conv head.
    PathologyVl,
    /// Frozen natural-image vision-language trunk + conv head.
    GenericVl,
    /// From-scratch patch discriminator, trained end to end.
    ConvPatch,
    /// Small frozen trunk for tests.
    TinyRandom,
}

impl fmt::Display for DiscriminatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiscriminatorKind::PathologyVl => "pathology_vl",
            DiscriminatorKind::GenericVl => "generic_vl",
            DiscriminatorKind::ConvPatch => "conv_patch",
            DiscriminatorKind::TinyRandom => "tiny_random",
        };
        f.write_str(s)
    }
}

impl FromStr for DiscriminatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pathology_vl" => Ok(DiscriminatorKind::PathologyVl),
            "generic_vl" => Ok(DiscriminatorKind::GenericVl),
            "conv_patch" => Ok(DiscriminatorKind::ConvPatch),
            "tiny_random" => Ok(DiscriminatorKind::TinyRandom),
            other => Err(Error::config(format!(
                "unknown discriminator kind `{other}` (expected pathology_vl, generic_vl, conv_patch, or tiny_random)"
            ))),
        }
    }
}

/// Per-channel preprocessing constants. Inputs in [-1,1] are mapped to the
/// trunk's expected distribution via ((x+1)/2 - mean) / std, folded into one
/// affine `x * scale + shift` so gradients still reach the generator.
#[derive(Debug, Clone, Copy)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocess {
    fn identity() -> Self {
        Preprocess {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }

    fn clip_like() -> Self {
        Preprocess {
            mean: [0.481, 0.458, 0.408],
            std: [0.269, 0.261, 0.276],
        }
    }

    fn affine<T: Scalar>(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self.std.iter().map(|s| T::from_f64(0.5 / s)).collect();
        let shift: Vec<T> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| T::from_f64((0.5 - m) / s))
            .collect();
        (scale, shift)
    }
}

pub struct Discriminator<T: Scalar> {
    pub name: String,
    pub kind: DiscriminatorKind,
    trunk: Vec<Conv2d<T>>,
    head: Vec<Conv2d<T>>,
    preprocess: Preprocess,
    trunk_frozen: bool,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(name: impl Into<String>, kind: DiscriminatorKind, seed: u64) -> Result<Self> {
        let name = name.into();
        let mut init = Initializer::new(seed);
        let (trunk_channels, head_hidden, preprocess, trunk_frozen) = match kind {
            DiscriminatorKind::PathologyVl => {
                (vec![16, 32, 64, 160], 16, Preprocess::identity(), true)
            }
            DiscriminatorKind::GenericVl => {
                (vec![16, 32, 64, 128], 16, Preprocess::clip_like(), true)
            }
            DiscriminatorKind::ConvPatch => (vec![16, 32, 64], 0, Preprocess::identity(), false),
            DiscriminatorKind::TinyRandom => (vec![8, 16], 2, Preprocess::identity(), true),
        };

        let mut trunk = Vec::new();
        let mut cin = 3;
        for (i, &cout) in trunk_channels.iter().enumerate() {
            let k = if trunk_frozen { 3 } else { 4 };
            trunk.push(Conv2d::seeded(
                format!("{name}.trunk{i}"),
                cin,
                cout,
                k,
                2,
                1,
                !trunk_frozen,
                &mut init,
            ));
            cin = cout;
        }

        let head = if trunk_frozen {
            vec![
                Conv2d::seeded(format!("{name}.head0"), cin, head_hidden, 1, 1, 0, true, &mut init),
                Conv2d::seeded(format!("{name}.head1"), head_hidden, 1, 1, 1, 0, true, &mut init),
            ]
        } else {
            vec![Conv2d::seeded(format!("{name}.head0"), cin, 1, 4, 1, 1, true, &mut init)]
        };

        let d = Discriminator {
            name,
            kind,
            trunk,
            head,
            preprocess,
            trunk_frozen,
        };
        if trunk_frozen {
            let trunk_n = numel(&d.trunk_params());
            let head_n = numel(&d.head_params());
            if (head_n as f64) >= HEAD_CAPACITY_BOUND * trunk_n as f64 {
                return Err(Error::config(format!(
                    "classifier head of `{}` has {head_n} parameters, not small next to its {trunk_n}-parameter trunk",
                    d.name
                )));
            }
        }
        Ok(d)
    }

    /// D(x) = C(Θ(x)): preprocess, frozen trunk, trainable head. Returns a
    /// patch logit map [n, 1, h', w'].
    pub fn score(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dim(format!(
                "discriminator input must be [n, 3, h, w], got {shape:?}"
            )));
        }
        let (scale, shift) = self.preprocess.affine::<T>();
        let mut h = g.channel_affine(x, &scale, &shift);
        for conv in &self.trunk {
            h = conv.forward(g, h, &());
            h = g.leaky_relu(h, T::from_f64(LEAKY_SLOPE));
        }
        for (i, conv) in self.head.iter().enumerate() {
            h = conv.forward(g, h, &());
            if i + 1 < self.head.len() {
                h = g.leaky_relu(h, T::from_f64(LEAKY_SLOPE));
            }
        }
        g.check_finite(h, &format!("{}.logits", self.name))?;
        Ok(h)
    }

    /// Parameters the optimizer may update: head only for frozen trunks,
    /// everything for the patch baseline.
    pub fn trainable_parameters(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        if !self.trunk_frozen {
            for conv in &self.trunk {
                conv.collect_params(&mut out);
            }
        }
        for conv in &self.head {
            conv.collect_params(&mut out);
        }
        out
    }

    /// Every parameter, frozen or not, for checkpointing.
    pub fn all_params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        for conv in self.trunk.iter().chain(&self.head) {
            conv.collect_params(&mut out);
        }
        out
    }

    fn trunk_params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        for conv in &self.trunk {
            conv.collect_params(&mut out);
        }
        out
    }

    fn head_params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        for conv in &self.head {
            conv.collect_params(&mut out);
        }
        out
    }
}

fn numel<T: Scalar>(params: &[Param<T>]) -> usize {
    params.iter().map(|p| p.shape().iter().product::<usize>()).sum()
}
