//! One-step translation generator: a frozen backbone wrapped with trainable
//! low-rank adapters and zero-initialized skip convolutions.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, NoisePredictor, SchedulerSpec};
use crate::error::{Error, Result};
use crate::mff::{assemble_local, fuse, patchify, FeaturePyramid, MffMode, PyramidRole};
use crate::nn::{AdapterLookup, AdapterSlot, Conv2d, LoraDelta};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Initializer, Param, Var};

/// Low-rank deltas for a named subset of a network's layers.
#[derive(Clone)]
pub struct LoraAdapterSet<T: Scalar> {
    pub rank: usize,
    pub scaling: f64,
    pub targets: Vec<String>,
    pub deltas: BTreeMap<String, LoraDelta<T>>,
}

impl<T: Scalar> LoraAdapterSet<T> {
    /// Creates deltas for every slot matched by a target prefix. Each target
    /// must match at least one slot; `all` matches everything.
    pub fn inject(
        namespace: &str,
        slots: &[AdapterSlot],
        targets: &[String],
        rank: usize,
        scaling: f64,
        init: &mut Initializer,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        let mut matched = vec![false; targets.len()];
        let mut deltas = BTreeMap::new();
        for slot in slots {
            let hit = targets.iter().enumerate().any(|(i, t)| {
                if t == "all" || slot.layer.starts_with(t.as_str()) {
                    matched[i] = true;
                    true
                } else {
                    false
                }
            });
            if hit {
                deltas.insert(
                    slot.layer.clone(),
                    LoraDelta::new(
                        &format!("{namespace}.lora.{}", slot.layer),
                        slot.out_features,
                        slot.in_features,
                        rank,
                        scaling,
                        init,
                    ),
                );
            }
        }
        if let Some(idx) = matched.iter().position(|m| !m) {
            return Err(Error::config(format!(
                "unknown target layer `{}` matches nothing",
                targets[idx]
            )));
        }
        Ok(LoraAdapterSet {
            rank,
            scaling,
            targets: targets.to_vec(),
            deltas,
        })
    }

    pub fn params(&self) -> Vec<Param<T>> {
        self.deltas
            .values()
            .flat_map(|d| [d.down.clone(), d.up.clone()])
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.deltas.values().map(|d| d.numel()).sum()
    }
}

impl<T: Scalar> AdapterLookup<T> for LoraAdapterSet<T> {
    fn delta_for(&self, layer: &str) -> Option<&LoraDelta<T>> {
        self.deltas.get(layer)
    }
}

/// One zero-initialized 1x1 convolution per skip connection, indexed like
/// the encoder pyramid (shallow to deep).
#[derive(Clone)]
pub struct ZeroConvSet<T: Scalar> {
    convs: Vec<Conv2d<T>>,
}

impl<T: Scalar> ZeroConvSet<T> {
    pub fn new(namespace: &str, stage_channels: &[usize]) -> Self {
        let convs = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::zeros_1x1(format!("{namespace}.skip{i}"), c))
            .collect();
        ZeroConvSet { convs }
    }

    pub fn len(&self) -> usize {
        self.convs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.convs.is_empty()
    }

    pub fn apply(&self, g: &mut Graph<T>, idx: usize, feature: Var) -> Result<Var> {
        let conv = self.convs.get(idx).ok_or_else(|| {
            Error::config(format!("no zero conv for skip level {idx}"))
        })?;
        Ok(conv.forward(g, feature, &()))
    }

    pub fn params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        for c in &self.convs {
            c.collect_params(&mut out);
        }
        out
    }
}

/// Multi-scale fusion settings carried by each generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MffConfig {
    pub mode: MffMode,
    pub grid: (usize, usize),
    /// When false the local encoder runs with frozen base weights only.
    pub local_adapters: bool,
}

impl Default for MffConfig {
    fn default() -> Self {
        MffConfig {
            mode: MffMode::EachLayer,
            grid: (2, 2),
            local_adapters: true,
        }
    }
}

/// Settings for adapter injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scaling: f64,
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            scaling: 1.0,
            targets: vec!["all".into()],
            seed: 0x5eed,
        }
    }
}

/// A direction-specific generator: frozen backbone plus this direction's
/// trainable pieces and prompt.
pub struct GeneratorSpec<T: Scalar> {
    pub name: String,
    pub backbone: Rc<Backbone<T>>,
    pub enc_adapters: LoraAdapterSet<T>,
    pub dec_adapters: LoraAdapterSet<T>,
    /// Shared between the two directions (cloning aliases the parameters).
    pub unet_adapters: LoraAdapterSet<T>,
    pub local_enc_adapters: Option<LoraAdapterSet<T>>,
    pub zero_convs: ZeroConvSet<T>,
    pub prompt: String,
    prompt_embedding: ArrayD<T>,
    pub mff: MffConfig,
}

impl<T: Scalar> GeneratorSpec<T> {
    /// Builds a generator on `backbone`, injecting fresh adapters everywhere
    /// except the UNet, whose adapter set is supplied so both directions can
    /// share it.
    pub fn new(
        name: &str,
        backbone: Rc<Backbone<T>>,
        unet_adapters: LoraAdapterSet<T>,
        prompt: &str,
        adapter_cfg: &AdapterConfig,
        mff: MffConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        let enc_targets = filter_targets(&adapter_cfg.targets, "enc");
        let dec_targets = filter_targets(&adapter_cfg.targets, "dec");
        let enc_adapters = LoraAdapterSet::inject(
            &format!("{name}.enc"),
            &backbone.encoder.adapter_slots(),
            &enc_targets,
            adapter_cfg.rank,
            adapter_cfg.scaling,
            init,
        )?;
        let dec_adapters = LoraAdapterSet::inject(
            &format!("{name}.dec"),
            &backbone.decoder.adapter_slots(),
            &dec_targets,
            adapter_cfg.rank,
            adapter_cfg.scaling,
            init,
        )?;
        let local_enc_adapters = if mff.mode != MffMode::NotUsed && mff.local_adapters {
            Some(LoraAdapterSet::inject(
                &format!("{name}.local"),
                &backbone.encoder.adapter_slots(),
                &enc_targets,
                adapter_cfg.rank,
                adapter_cfg.scaling,
                init,
            )?)
        } else {
            None
        };
        let zero_convs = ZeroConvSet::new(name, &backbone.encoder.stage_channels());
        let prompt_embedding = backbone.text_encoder.encode(prompt)?;
        Ok(GeneratorSpec {
            name: name.to_string(),
            backbone,
            enc_adapters,
            dec_adapters,
            unet_adapters,
            local_enc_adapters,
            zero_convs,
            prompt: prompt.to_string(),
            prompt_embedding,
            mff,
        })
    }

    /// The cached `[seq, width]` embedding of this generator's prompt.
    pub fn prompt_embedding(&self) -> &ArrayD<T> {
        &self.prompt_embedding
    }

    /// Encodes `x` into the fused feature pyramid and the latent, applying
    /// multi-scale fusion per the configured mode.
    pub fn encode(&self, g: &mut Graph<T>, x: Var) -> Result<(FeaturePyramid, Var)> {
        let enc = &self.backbone.encoder;
        let (global_p, _) = enc.forward(g, x, &self.enc_adapters)?;
        let fused = if self.mff.mode == MffMode::NotUsed {
            fuse(g, &global_p, &global_p, MffMode::NotUsed)?
        } else {
            let (rows, cols) = self.mff.grid;
            let grid = patchify(g, x, rows, cols)?;
            let n = grid.patches.len();
            let batch = g.shape(x)[0];
            let stacked = g.concat_batch(&grid.patches);
            let local_feats: Vec<(String, Var)> = {
                let (lp, _) = match &self.local_enc_adapters {
                    Some(a) => enc.forward(g, stacked, a)?,
                    None => enc.forward(g, stacked, &())?,
                };
                lp.entries
            };
            let mut per_patch = Vec::with_capacity(n);
            for i in 0..n {
                let entries = local_feats
                    .iter()
                    .map(|(name, var)| (name.clone(), g.slice_batch(*var, i * batch, batch)))
                    .collect();
                per_patch.push(FeaturePyramid::new(g, PyramidRole::Local, entries)?);
            }
            let assembled = assemble_local(g, &per_patch, rows, cols)?;
            fuse(g, &global_p, &assembled, self.mff.mode)?
        };
        let z = enc.project(g, fused.deepest(), &self.enc_adapters);
        Ok((fused, z))
    }

    /// Routes the fused pyramid through the zero convolutions, producing the
    /// per-level residuals the decoder adds to its stages.
    pub fn skip_residuals(&self, g: &mut Graph<T>, fused: &FeaturePyramid) -> Result<Vec<Var>> {
        (0..fused.len())
            .map(|l| self.zero_convs.apply(g, l, fused.layer(l)))
            .collect()
    }

    /// Full single-evaluation translation within an existing graph.
    pub fn translate_var(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (fused, z) = self.encode(g, x)?;
        let z_y = one_step_denoise(
            g,
            z,
            &self.prompt_embedding,
            &self.backbone.unet,
            Some(&self.unet_adapters),
            &self.backbone.scheduler,
        )?;
        let skips = self.skip_residuals(g, &fused)?;
        let y = self
            .backbone
            .decoder
            .forward(g, z_y, Some(&skips), &self.dec_adapters)?;
        // checked pre-clamp: clamp would silently squash non-finite values
        g.check_finite(y, &format!("{}.out", self.name))?;
        Ok(g.clamp(y, -T::one(), T::one()))
    }

    /// All trainable parameters owned by this generator.
    pub fn trainable_params(&self) -> Vec<Param<T>> {
        let mut out = self.enc_adapters.params();
        out.extend(self.dec_adapters.params());
        out.extend(self.unet_adapters.params());
        if let Some(local) = &self.local_enc_adapters {
            out.extend(local.params());
        }
        out.extend(self.zero_convs.params());
        out
    }
}

/// Ensures every adapter target matches at least one layer somewhere in the
/// backbone; per-net injection then re-checks its own subset.
pub fn validate_targets<T: Scalar>(backbone: &Backbone<T>, targets: &[String]) -> Result<()> {
    let mut slots = backbone.encoder.adapter_slots();
    slots.extend(backbone.decoder.adapter_slots());
    slots.extend(backbone.unet.adapter_slots());
    for t in targets {
        if t != "all" && !slots.iter().any(|s| s.layer.starts_with(t.as_str())) {
            return Err(Error::config(format!(
                "unknown target layer `{t}` matches nothing"
            )));
        }
    }
    Ok(())
}

pub(crate) fn filter_targets(targets: &[String], net: &str) -> Vec<String> {
    let kept: Vec<String> = targets
        .iter()
        .filter(|t| *t == "all" || t.starts_with(net))
        .cloned()
        .collect();
    if kept.is_empty() {
        // the network is excluded from injection: match nothing
        vec![]
    } else {
        kept
    }
}

/// `z_y = s.step(z_x, eps)` with `eps` predicted by the UNet.
pub fn one_step_denoise<T: Scalar>(
    g: &mut Graph<T>,
    z_x: Var,
    prompt_embedding: &ArrayD<T>,
    unet: &NoisePredictor<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    sched: &SchedulerSpec,
) -> Result<Var> {
    g.check_finite(z_x, "z_x")?;
    let prompt = g.constant(prompt_embedding.clone());
    let eps = unet.forward(g, z_x, prompt, sched.timestep, &adapters)?;
    let z_y = sched.step(g, z_x, eps);
    g.check_finite(z_y, "z_y")?;
    Ok(z_y)
}

/// The unmodified backbone's one-step encode -> denoise -> decode pipeline;
/// the reference the adapted generator must reproduce at initialization.
pub fn plain_backbone_translate<T: Scalar>(
    backbone: &Backbone<T>,
    g: &mut Graph<T>,
    x: Var,
    prompt: &str,
) -> Result<Var> {
    let (_, pre) = backbone.encoder.forward(g, x, &())?;
    let z = backbone.encoder.project(g, pre, &());
    let embedding = backbone.text_encoder.encode(prompt)?;
    let z_y = one_step_denoise(g, z, &embedding, &backbone.unet, None, &backbone.scheduler)?;
    let y = backbone.decoder.forward(g, z_y, None, &())?;
    Ok(g.clamp(y, -T::one(), T::one()))
}

/// Anything that can translate an image batch. Implemented by the real
/// generator and by the identity stub used in loss and plumbing tests.
pub trait Translator<T: Scalar> {
    fn translate_batch(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;

    fn translate(&self, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.translate_batch(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Scalar> Translator<T> for GeneratorSpec<T> {
    fn translate_batch(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if g.shape(x)[0] == 0 {
            return Err(Error::dim("batch size 0"));
        }
        self.translate_var(g, x)
    }
}

/// Translator that returns its input unchanged.
pub struct IdentityStub;

impl<T: Scalar> Translator<T> for IdentityStub {
    fn translate_batch(&self, _g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(x)
    }
}
