//! Training configuration: TOML surface, validation, and hashing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneDescriptor;
use crate::data::PatchSpec;
use crate::discriminator::DiscriminatorKind;
use crate::error::{Error, Result};
use crate::generator::{AdapterConfig, MffConfig};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: "adam".into(),
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prompts {
    pub c_x: String,
    pub c_y: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Prompts {
            c_x: "frozen section".into(),
            c_y: "paraffin section".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub backbone: BackboneDescriptor,
    pub adapters: AdapterConfig,
    pub mff: MffConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            backbone: BackboneDescriptor::Pretrained {
                path: "checkpoints/backbone.ht".into(),
            },
            adapters: AdapterConfig::default(),
            mff: MffConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscSection {
    pub backbone: DiscriminatorKind,
    pub seed: u64,
}

impl Default for DiscSection {
    fn default() -> Self {
        DiscSection {
            backbone: DiscriminatorKind::PathologyVl,
            seed: 0xD15C,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir_x: String,
    pub dir_y: String,
    pub val_x: Option<String>,
    pub val_y: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir_x: "data/ff".into(),
            dir_y: "data/ffpe".into(),
            val_x: None,
            val_y: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    pub checkpoint_every: usize,
    pub validate_every: usize,
    /// Cap on validation images per side, keeping periodic FID/KID cheap.
    pub val_max_images: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/default".into(),
            checkpoint_every: 2500,
            validate_every: 2500,
            val_max_images: 64,
        }
    }
}

/// Full training configuration; defaults mirror the paper's setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub losses: LossWeights,
    pub prompts: Prompts,
    pub generator: GeneratorSection,
    pub disc: DiscSection,
    pub data: DataSection,
    pub output: OutputSection,
    pub patches: PatchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_size: 1,
            seed: 17,
            optimizer: OptimizerConfig::default(),
            losses: LossWeights::default(),
            prompts: Prompts::default(),
            generator: GeneratorSection::default(),
            disc: DiscSection::default(),
            data: DataSection::default(),
            output: OutputSection::default(),
            patches: PatchSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::load(path, format!("config: {e}")))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.optimizer.name != "adam" {
            return Err(Error::config(format!(
                "unsupported optimizer `{}` (only adam)",
                self.optimizer.name
            )));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.optimizer.lr
            )));
        }
        for (name, b) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        self.losses.validate()?;
        if self.prompts.c_x.trim().is_empty() || self.prompts.c_y.trim().is_empty() {
            return Err(Error::config("prompts must be non-empty"));
        }
        if self.generator.adapters.rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        if self.generator.adapters.targets.is_empty() {
            return Err(Error::config("adapter targets must not be empty"));
        }
        let (gx, gy) = self.generator.mff.grid;
        if gx == 0 || gy == 0 {
            return Err(Error::config(format!(
                "mff grid must be at least 1x1, got {gx}x{gy}"
            )));
        }
        if self.output.checkpoint_every == 0 || self.output.validate_every == 0 {
            return Err(Error::config("cadences must be positive"));
        }
        self.patches.validate()?;
        Ok(())
    }

    /// Hash of the canonical serialized form; recorded in checkpoints and
    /// metric reports so artifacts are traceable to a configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_sha256(&json)
    }

    /// Hash of the fields that determine checkpoint compatibility. Run
    /// length, data locations, and output paths are excluded so a run can be
    /// resumed with more steps or from a relocated workspace.
    pub fn state_hash(&self) -> String {
        let v = serde_json::json!({
            "batch_size": self.batch_size,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "losses": self.losses,
            "prompts": self.prompts,
            "generator": self.generator,
            "disc": self.disc,
        });
        hex_sha256(v.to_string().as_bytes())
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
