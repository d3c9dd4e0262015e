//! The frozen one-step latent-diffusion backbone: VAE encoder/decoder, a
//! small cross-attention UNet, a hash-token prompt encoder, and the
//! single-step noise scheduler.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::mff::{FeaturePyramid, PyramidRole};
use crate::nn::{AdapterLookup, AdapterSlot, Conv2d, Linear};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Initializer, Param, Var};

/// Structural description of a backbone. The default is the tiny test-scale
/// configuration; real-scale weights load through the same shape contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneArch {
    pub img_channels: usize,
    /// Channels per encoder stage, shallow to deep; each stage halves the
    /// spatial dims, so the downsampling factor is 2^len.
    pub enc_channels: Vec<usize>,
    pub latent_channels: usize,
    /// (outer, inner) channel widths of the UNet.
    pub unet_channels: (usize, usize),
    pub prompt_width: usize,
    pub prompt_vocab: usize,
    pub prompt_max_len: usize,
    pub time_dim: usize,
    pub num_train_timesteps: usize,
    /// Encoder convolution kernel size (odd). 1 makes every encoder stage
    /// exactly translation equivariant, which some tests rely on.
    #[serde(default = "default_enc_kernel")]
    pub enc_kernel: usize,
}

fn default_enc_kernel() -> usize {
    3
}

impl Default for BackboneArch {
    fn default() -> Self {
        BackboneArch {
            img_channels: 3,
            enc_channels: vec![8, 16, 24],
            latent_channels: 4,
            unet_channels: (12, 16),
            prompt_width: 16,
            prompt_vocab: 64,
            prompt_max_len: 8,
            time_dim: 8,
            num_train_timesteps: 8,
            enc_kernel: 3,
        }
    }
}

impl BackboneArch {
    pub fn downsampling_factor(&self) -> usize {
        1 << self.enc_channels.len()
    }
}

pub struct EncoderNet<T: Scalar> {
    stages: Vec<[Conv2d<T>; 2]>,
    latent: Conv2d<T>,
}

impl<T: Scalar> EncoderNet<T> {
    fn seeded(arch: &BackboneArch, init: &mut Initializer) -> Self {
        let (k, p) = (arch.enc_kernel, arch.enc_kernel / 2);
        let mut stages = Vec::new();
        let mut cin = arch.img_channels;
        for (i, &c) in arch.enc_channels.iter().enumerate() {
            stages.push([
                Conv2d::seeded(format!("enc.stage{i}.conv0"), cin, c, k, 2, p, false, init),
                Conv2d::seeded(format!("enc.stage{i}.conv1"), c, c, k, 1, p, false, init),
            ]);
            cin = c;
        }
        let latent = Conv2d::seeded("enc.latent", cin, arch.latent_channels, k, 1, p, false, init);
        EncoderNet { stages, latent }
    }

    pub fn downsampling_factor(&self) -> usize {
        1 << self.stages.len()
    }

    /// Runs every stage, returning the per-stage feature pyramid and the
    /// pre-latent feature `F^L` (the deepest entry).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        adapters: &impl AdapterLookup<T>,
    ) -> Result<(FeaturePyramid, Var)> {
        let s = g.shape(x).to_vec();
        let f = self.downsampling_factor();
        if s.len() != 4 || s[2] % f != 0 || s[3] % f != 0 {
            return Err(Error::dim(format!(
                "encoder input {s:?} not divisible by downsampling factor {f}"
            )));
        }
        if s[0] == 0 {
            return Err(Error::dim("batch size 0"));
        }
        let mut h = x;
        let mut entries = Vec::with_capacity(self.stages.len());
        for (i, [c0, c1]) in self.stages.iter().enumerate() {
            h = c0.forward(g, h, adapters);
            h = g.silu(h);
            h = c1.forward(g, h, adapters);
            h = g.silu(h);
            entries.push((format!("enc.stage{i}"), h));
        }
        let pyramid = FeaturePyramid::new(g, PyramidRole::Global, entries)?;
        Ok((pyramid, h))
    }

    /// The last encoder layer: projects the (fused) deepest feature to the
    /// latent tensor.
    pub fn project(&self, g: &mut Graph<T>, pre_latent: Var, adapters: &impl AdapterLookup<T>) -> Var {
        self.latent.forward(g, pre_latent, adapters)
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|[_, c1]| c1.out_channels()).collect()
    }

    pub fn adapter_slots(&self) -> Vec<AdapterSlot> {
        let mut slots = Vec::new();
        for [c0, c1] in &self.stages {
            slots.push(c0.slot());
            slots.push(c1.slot());
        }
        slots.push(self.latent.slot());
        slots
    }

    pub fn collect_params(&self, out: &mut Vec<Param<T>>) {
        for [c0, c1] in &self.stages {
            c0.collect_params(out);
            c1.collect_params(out);
        }
        self.latent.collect_params(out);
    }
}

pub struct DecoderNet<T: Scalar> {
    latent_in: Conv2d<T>,
    stages: Vec<[Conv2d<T>; 2]>,
    head: Conv2d<T>,
}

impl<T: Scalar> DecoderNet<T> {
    fn seeded(arch: &BackboneArch, init: &mut Initializer) -> Self {
        let rev: Vec<usize> = arch.enc_channels.iter().rev().copied().collect();
        let latent_in =
            Conv2d::seeded("dec.latent", arch.latent_channels, rev[0], 3, 1, 1, false, init);
        let mut stages = Vec::new();
        for i in 0..rev.len() {
            let cin = rev[i];
            let cout = if i + 1 < rev.len() { rev[i + 1] } else { rev[rev.len() - 1] };
            stages.push([
                Conv2d::seeded(format!("dec.stage{i}.conv0"), cin, cout, 3, 1, 1, false, init),
                Conv2d::seeded(format!("dec.stage{i}.conv1"), cout, cout, 3, 1, 1, false, init),
            ]);
        }
        let last = *arch.enc_channels.first().expect("at least one stage");
        let head = Conv2d::seeded("dec.head", last, arch.img_channels, 3, 1, 1, false, init);
        DecoderNet { latent_in, stages, head }
    }

    /// Decodes a latent back to image space. `skip_adds`, when present,
    /// carries one residual per encoder stage (shallow to deep, matching the
    /// pyramid); entry `l` is added where the decoder reaches the resolution
    /// and width of encoder stage `l`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        z: Var,
        skip_adds: Option<&[Var]>,
        adapters: &impl AdapterLookup<T>,
    ) -> Result<Var> {
        let depth = self.stages.len();
        if let Some(skips) = skip_adds {
            if skips.len() != depth {
                return Err(Error::config(format!(
                    "expected {depth} skip inputs, got {}",
                    skips.len()
                )));
            }
        }
        let mut h = self.latent_in.forward(g, z, adapters);
        h = g.silu(h);
        if let Some(skips) = skip_adds {
            h = g.add(h, skips[depth - 1]);
        }
        for (i, [c0, c1]) in self.stages.iter().enumerate() {
            h = g.upsample_nearest(h, 2);
            h = c0.forward(g, h, adapters);
            h = g.silu(h);
            h = c1.forward(g, h, adapters);
            h = g.silu(h);
            // stage i lands at encoder stage depth-2-i's resolution; the
            // final stage reaches full resolution, which has no mirror
            if let (Some(skips), true) = (skip_adds, i + 2 <= depth) {
                h = g.add(h, skips[depth - 2 - i]);
            }
        }
        let y = self.head.forward(g, h, adapters);
        Ok(g.tanh(y))
    }

    pub fn adapter_slots(&self) -> Vec<AdapterSlot> {
        let mut slots = vec![self.latent_in.slot()];
        for [c0, c1] in &self.stages {
            slots.push(c0.slot());
            slots.push(c1.slot());
        }
        slots.push(self.head.slot());
        slots
    }

    pub fn collect_params(&self, out: &mut Vec<Param<T>>) {
        self.latent_in.collect_params(out);
        for [c0, c1] in &self.stages {
            c0.collect_params(out);
            c1.collect_params(out);
        }
        self.head.collect_params(out);
    }
}

pub struct NoisePredictor<T: Scalar> {
    conv_in: Conv2d<T>,
    down: Conv2d<T>,
    time: Linear<T>,
    q: Linear<T>,
    k: Linear<T>,
    v: Linear<T>,
    attn_out: Linear<T>,
    mid: Conv2d<T>,
    up: Conv2d<T>,
    conv_out: Conv2d<T>,
    prompt_width: usize,
    time_dim: usize,
}

impl<T: Scalar> NoisePredictor<T> {
    fn seeded(arch: &BackboneArch, init: &mut Initializer) -> Self {
        let (u0, u1) = arch.unet_channels;
        NoisePredictor {
            conv_in: Conv2d::seeded("unet.conv_in", arch.latent_channels, u0, 3, 1, 1, false, init),
            down: Conv2d::seeded("unet.down", u0, u1, 3, 2, 1, false, init),
            time: Linear::seeded("unet.time", arch.time_dim, u1, false, init),
            q: Linear::seeded("unet.attn.q", u1, u1, false, init),
            k: Linear::seeded("unet.attn.k", arch.prompt_width, u1, false, init),
            v: Linear::seeded("unet.attn.v", arch.prompt_width, u1, false, init),
            attn_out: Linear::seeded("unet.attn.out", u1, u1, false, init),
            mid: Conv2d::seeded("unet.mid", u1, u1, 3, 1, 1, false, init),
            up: Conv2d::seeded("unet.up", u1, u0, 3, 1, 1, false, init),
            conv_out: Conv2d::seeded("unet.conv_out", u0, arch.latent_channels, 3, 1, 1, false, init),
            prompt_width: arch.prompt_width,
            time_dim: arch.time_dim,
        }
    }

    /// Predicts the noise for latent `z` conditioned on a prompt embedding
    /// `[seq, width]` and the scheduler timestep.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        z: Var,
        prompt: Var,
        timestep: usize,
        adapters: &impl AdapterLookup<T>,
    ) -> Result<Var> {
        let ps = g.shape(prompt).to_vec();
        if ps.len() != 2 || ps[1] != self.prompt_width {
            return Err(Error::dim(format!(
                "prompt embedding {ps:?} does not match cross-attention width {}",
                self.prompt_width
            )));
        }
        let zs = g.shape(z).to_vec();
        if zs[2] % 2 != 0 || zs[3] % 2 != 0 {
            return Err(Error::dim(format!("latent dims {zs:?} not divisible by 2")));
        }

        let h0 = self.conv_in.forward(g, z, adapters);
        let h0 = g.silu(h0);
        let mut h = self.down.forward(g, h0, adapters);
        h = g.silu(h);

        // timestep conditioning as a per-channel shift
        let temb = g.constant(sinusoidal_embedding::<T>(timestep, self.time_dim));
        let temb = self.time.forward(g, temb, adapters);
        let u1 = g.shape(h)[1];
        let temb = g.reshape(temb, &[u1]);
        h = g.bias_add(h, temb);

        // cross-attention between latent positions and prompt tokens
        let (b, hh, hw) = (g.shape(h)[0], g.shape(h)[2], g.shape(h)[3]);
        let seq = ps[0];
        let tokens = g.reshape(h, &[b, u1, hh * hw]);
        let tokens = g.permute(tokens, &[0, 2, 1]);
        let tokens2 = g.reshape(tokens, &[b * hh * hw, u1]);
        let qm = self.q.forward(g, tokens2, adapters);
        let qm = g.reshape(qm, &[b, hh * hw, u1]);
        let km = self.k.forward(g, prompt, adapters);
        let vm = self.v.forward(g, prompt, adapters);
        let km = g.reshape(km, &[1, seq, u1]);
        let vm = g.reshape(vm, &[1, seq, u1]);
        let (km, vm) = if b > 1 {
            (
                g.concat_batch(&vec![km; b]),
                g.concat_batch(&vec![vm; b]),
            )
        } else {
            (km, vm)
        };
        let kt = g.permute(km, &[0, 2, 1]);
        let scores = g.bmm(qm, kt);
        let scores = g.mul_scalar(scores, T::from_f64(1.0 / (u1 as f64).sqrt()));
        let attn = g.softmax_lastdim(scores);
        let ctx = g.bmm(attn, vm);
        let ctx2 = g.reshape(ctx, &[b * hh * hw, u1]);
        let ctx2 = self.attn_out.forward(g, ctx2, adapters);
        let ctx3 = g.reshape(ctx2, &[b, hh * hw, u1]);
        let ctx3 = g.permute(ctx3, &[0, 2, 1]);
        let ctx3 = g.reshape(ctx3, &[b, u1, hh, hw]);
        h = g.add(h, ctx3);

        let m = self.mid.forward(g, h, adapters);
        let m = g.silu(m);
        let m = g.upsample_nearest(m, 2);
        let m = self.up.forward(g, m, adapters);
        let m = g.silu(m);
        let m = g.add(m, h0);
        Ok(self.conv_out.forward(g, m, adapters))
    }

    pub fn adapter_slots(&self) -> Vec<AdapterSlot> {
        vec![
            self.conv_in.slot(),
            self.down.slot(),
            self.time.slot(),
            self.q.slot(),
            self.k.slot(),
            self.v.slot(),
            self.attn_out.slot(),
            self.mid.slot(),
            self.up.slot(),
            self.conv_out.slot(),
        ]
    }

    pub fn collect_params(&self, out: &mut Vec<Param<T>>) {
        self.conv_in.collect_params(out);
        self.down.collect_params(out);
        self.time.collect_params(out);
        self.q.collect_params(out);
        self.k.collect_params(out);
        self.v.collect_params(out);
        self.attn_out.collect_params(out);
        self.mid.collect_params(out);
        self.up.collect_params(out);
        self.conv_out.collect_params(out);
    }
}

fn sinusoidal_embedding<T: Scalar>(t: usize, dim: usize) -> ArrayD<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        data.push(T::from_f64((t as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        data.push(T::from_f64((t as f64 * freq).cos()));
    }
    ArrayD::from_shape_vec(IxDyn(&[1, dim]), data).unwrap()
}

/// Frozen token-embedding text encoder. Tokens hash into a fixed vocabulary,
/// so any prompt string maps to a deterministic embedding without external
/// tokenizer data.
pub struct PromptEncoder<T: Scalar> {
    table: Param<T>, // [vocab, width]
    pos: Param<T>,   // [max_len, width]
    vocab: usize,
    max_len: usize,
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl<T: Scalar> PromptEncoder<T> {
    fn seeded(arch: &BackboneArch, init: &mut Initializer) -> Self {
        PromptEncoder {
            table: Param::frozen(
                "text.table",
                init.normal(&[arch.prompt_vocab, arch.prompt_width], 1.0),
            ),
            pos: Param::frozen(
                "text.pos",
                init.normal(&[arch.prompt_max_len, arch.prompt_width], 0.1),
            ),
            vocab: arch.prompt_vocab,
            max_len: arch.prompt_max_len,
        }
    }

    pub fn token_ids(&self, prompt: &str) -> Vec<usize> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| (fnv1a64(&t.to_lowercase()) % self.vocab as u64) as usize)
            .take(self.max_len)
            .collect()
    }

    /// `[seq, width]` embedding of a prompt; fixed per string.
    pub fn encode(&self, prompt: &str) -> Result<ArrayD<T>> {
        let ids = self.token_ids(prompt);
        if ids.is_empty() {
            return Err(Error::config(format!("prompt `{prompt}` has no tokens")));
        }
        let table = self.table.value();
        let pos = self.pos.value();
        let width = table.shape()[1];
        let mut out = ArrayD::<T>::zeros(IxDyn(&[ids.len(), width]));
        for (i, id) in ids.iter().enumerate() {
            for j in 0..width {
                out[[i, j]] = table[[*id, j]] + pos[[i, j]];
            }
        }
        Ok(out)
    }

    pub fn collect_params(&self, out: &mut Vec<Param<T>>) {
        out.push(self.table.clone());
        out.push(self.pos.clone());
    }
}

/// Single-step denoising schedule. `alphas_cumprod` follows a linear beta
/// schedule over the trained timestep range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerSpec {
    pub num_train_timesteps: usize,
    pub timestep: usize,
    alphas_cumprod: Vec<f64>,
}

impl SchedulerSpec {
    pub fn new(num_train_timesteps: usize, timestep: usize) -> Result<Self> {
        if num_train_timesteps == 0 {
            return Err(Error::config("scheduler needs at least one timestep"));
        }
        if timestep >= num_train_timesteps {
            return Err(Error::config(format!(
                "timestep {timestep} outside trained schedule range 0..{num_train_timesteps}"
            )));
        }
        let mut alphas_cumprod = Vec::with_capacity(num_train_timesteps);
        let mut acc = 1.0f64;
        for i in 0..num_train_timesteps {
            let beta = if num_train_timesteps == 1 {
                1e-4
            } else {
                1e-4 + (0.02 - 1e-4) * i as f64 / (num_train_timesteps - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Ok(SchedulerSpec {
            num_train_timesteps,
            timestep,
            alphas_cumprod,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alphas_cumprod[self.timestep].sqrt()
    }

    pub fn sigma(&self) -> f64 {
        (1.0 - self.alphas_cumprod[self.timestep]).sqrt()
    }

    /// One denoising step: `z_y = (z_x - sigma * eps) / alpha`.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, z: Var, eps: Var) -> Var {
        let scaled = g.mul_scalar(eps, T::from_f64(self.sigma() / self.alpha()));
        let z = g.mul_scalar(z, T::from_f64(1.0 / self.alpha()));
        g.sub(z, scaled)
    }
}

/// Everything frozen: the generator wraps this with trainable deltas.
pub struct Backbone<T: Scalar> {
    pub arch: BackboneArch,
    pub encoder: EncoderNet<T>,
    pub decoder: DecoderNet<T>,
    pub unet: NoisePredictor<T>,
    pub text_encoder: PromptEncoder<T>,
    pub scheduler: SchedulerSpec,
    /// Where the weights came from, for checkpoint manifests.
    pub descriptor: BackboneDescriptor,
}

/// Serializable recipe for reconstructing a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneDescriptor {
    TinyRandom {
        seed: u64,
        #[serde(default)]
        arch: BackboneArch,
    },
    Pretrained { path: String },
}

impl<T: Scalar> Backbone<T> {
    /// Small randomly initialized backbone with the same structural contract
    /// as a real pre-trained one; all weights frozen.
    pub fn tiny_random(arch: BackboneArch, seed: u64) -> Result<Self> {
        let mut init = Initializer::new(seed);
        let encoder = EncoderNet::seeded(&arch, &mut init);
        let decoder = DecoderNet::seeded(&arch, &mut init);
        let unet = NoisePredictor::seeded(&arch, &mut init);
        let text_encoder = PromptEncoder::seeded(&arch, &mut init);
        let scheduler = SchedulerSpec::new(arch.num_train_timesteps, arch.num_train_timesteps - 1)?;
        Ok(Backbone {
            descriptor: BackboneDescriptor::TinyRandom { seed, arch: arch.clone() },
            arch,
            encoder,
            decoder,
            unet,
            text_encoder,
            scheduler,
        })
    }

    pub fn set_timestep(&mut self, timestep: usize) -> Result<()> {
        self.scheduler = SchedulerSpec::new(self.arch.num_train_timesteps, timestep)?;
        Ok(())
    }

    pub fn all_params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.encoder.collect_params(&mut out);
        self.decoder.collect_params(&mut out);
        self.unet.collect_params(&mut out);
        self.text_encoder.collect_params(&mut out);
        out
    }

    pub fn param_map(&self) -> BTreeMap<String, Param<T>> {
        self.all_params()
            .into_iter()
            .map(|p| (p.name(), p))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<String, ArrayD<T>> = self
            .param_map()
            .into_iter()
            .map(|(n, p)| (n, p.value().clone()))
            .collect();
        let extra = serde_json::json!({
            "arch": self.arch,
            "timestep": self.scheduler.timestep,
        });
        checkpoint::write_archive(path, "backbone", extra, &tensors)
    }

    /// Loads pre-trained weights from a backbone archive.
    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::read_archive::<T>(path)?;
        if manifest.kind != "backbone" {
            return Err(Error::Load {
                path: path.to_path_buf(),
                detail: format!("archive kind `{}` is not a backbone", manifest.kind),
            });
        }
        let arch: BackboneArch = serde_json::from_value(manifest.extra["arch"].clone())
            .map_err(|e| Error::Load {
                path: path.to_path_buf(),
                detail: format!("bad arch manifest: {e}"),
            })?;
        let timestep = manifest.extra["timestep"]
            .as_u64()
            .unwrap_or((arch.num_train_timesteps - 1) as u64) as usize;
        let mut backbone = Backbone::tiny_random(arch, 0)?;
        backbone.set_timestep(timestep)?;
        backbone.descriptor = BackboneDescriptor::Pretrained {
            path: path.display().to_string(),
        };
        for (name, param) in backbone.param_map() {
            let t = tensors.get(&name).ok_or_else(|| Error::Load {
                path: path.to_path_buf(),
                detail: format!("missing tensor `{name}`"),
            })?;
            if t.shape() != param.shape().as_slice() {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    detail: format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), param.shape()),
                });
            }
            param.set_value(t.clone());
        }
        Ok(backbone)
    }

    /// Builds a backbone from its descriptor.
    pub fn from_descriptor(desc: &BackboneDescriptor) -> Result<Self> {
        match desc {
            BackboneDescriptor::TinyRandom { seed, arch } => {
                Backbone::tiny_random(arch.clone(), *seed)
            }
            BackboneDescriptor::Pretrained { path } => Backbone::load(Path::new(path)),
        }
    }
}
