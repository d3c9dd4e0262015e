//! Dual-generator adversarial training: the per-step update, resumable
//! checkpoints, and the run loop with loss logging and periodic validation.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{image_to_tensor, list_images, tensor_to_image, LoaderState, UnpairedLoader};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{
    filter_targets, validate_targets, GeneratorSpec, LoraAdapterSet, Translator,
};
use crate::losses::{
    adversarial_losses, cycle_from_fakes, identity_loss, total_loss, LossBundle,
};
use crate::metrics::{fid, kid, EmbeddingExtractor, MetricReport, KID_SUBSET_DEFAULT,
    KID_SUBSETS_DEFAULT};
use crate::optim::{Adam, AdamConfig};
use crate::perceptual::PerceptualNet;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Initializer, Param, Var};

pub const TRAIN_KIND: &str = "train";

/// The perceptual net and validation embedding extractor are frozen, so
/// fixed seeds keep them identical across save/load and across processes.
const LPIPS_SEED: u64 = 0x1b5;
const VAL_EXTRACTOR_SEED: u64 = 0xe7a1;

/// Builds the two direction-specific generators over one frozen backbone.
/// The UNet adapter set is injected once and cloned into both, so its
/// parameters are shared; encoder/decoder adapters stay per-direction.
pub fn build_dual_generators<T: Scalar>(
    cfg: &TrainConfig,
) -> Result<(Rc<Backbone<T>>, GeneratorSpec<T>, GeneratorSpec<T>)> {
    let backbone = Rc::new(Backbone::from_descriptor(&cfg.generator.backbone)?);
    validate_targets(&backbone, &cfg.generator.adapters.targets)?;
    let ad = &cfg.generator.adapters;
    let mut init = Initializer::new(ad.seed);
    let unet_adapters = LoraAdapterSet::inject(
        "shared",
        &backbone.unet.adapter_slots(),
        &filter_targets(&ad.targets, "unet"),
        ad.rank,
        ad.scaling,
        &mut init,
    )?;
    let gen_x = GeneratorSpec::new(
        "gx",
        backbone.clone(),
        unet_adapters.clone(),
        &cfg.prompts.c_x,
        ad,
        cfg.generator.mff.clone(),
        &mut init,
    )?;
    let gen_y = GeneratorSpec::new(
        "gy",
        backbone.clone(),
        unet_adapters,
        &cfg.prompts.c_y,
        ad,
        cfg.generator.mff.clone(),
        &mut init,
    )?;
    Ok((backbone, gen_x, gen_y))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainExtra {
    step: u64,
    state_hash: String,
    opt_g_t: u64,
    opt_d_t: u64,
    loader: LoaderState,
    config: TrainConfig,
}

/// The state-relevant slice of a config as embedded in checkpoints: run
/// length and file-system sections are reset so archives stay portable and
/// byte-identical across relocated runs.
fn embedded_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        steps: 1,
        data: Default::default(),
        output: Default::default(),
        patches: Default::default(),
        ..cfg.clone()
    }
}

/// Training configuration stored inside a checkpoint, sufficient to rebuild
/// the generators for translation without the original config file.
pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let manifest = checkpoint::read_manifest(path)?;
    if manifest.kind != TRAIN_KIND {
        return Err(Error::load(
            path,
            format!("kind `{}` is not a training checkpoint", manifest.kind),
        ));
    }
    let extra: TrainExtra = serde_json::from_value(manifest.extra)
        .map_err(|e| Error::load(path, format!("bad train metadata: {e}")))?;
    Ok(extra.config)
}

/// Both generators, both discriminators, and their optimizers.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub backbone: Rc<Backbone<T>>,
    pub gen_x: GeneratorSpec<T>,
    pub gen_y: GeneratorSpec<T>,
    pub disc_x: Discriminator<T>,
    pub disc_y: Discriminator<T>,
    pub lpips: PerceptualNet<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    /// Completed optimization steps.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (backbone, gen_x, gen_y) = build_dual_generators::<T>(cfg)?;
        let disc_x = Discriminator::new("dx", cfg.disc.backbone, cfg.disc.seed)?;
        let disc_y = Discriminator::new("dy", cfg.disc.backbone, cfg.disc.seed.wrapping_add(1))?;
        let lpips = PerceptualNet::tiny(&[1.0, 1.0], LPIPS_SEED);
        let adam = AdamConfig {
            lr: cfg.optimizer.lr,
            beta1: cfg.optimizer.beta1,
            beta2: cfg.optimizer.beta2,
            ..AdamConfig::default()
        };
        let mut gen_params = gen_x.trainable_params();
        gen_params.extend(gen_y.trainable_params());
        let opt_g = Adam::new(gen_params, adam);
        let mut disc_params = disc_x.trainable_parameters();
        disc_params.extend(disc_y.trainable_parameters());
        let opt_d = Adam::new(disc_params, adam);
        Ok(Trainer {
            cfg: cfg.clone(),
            backbone,
            gen_x,
            gen_y,
            disc_x,
            disc_y,
            lpips,
            opt_g,
            opt_d,
            step: 0,
        })
    }

    /// Every trainable parameter, deduplicated by name (the shared UNet
    /// adapters appear in both generators).
    pub fn trainable_params(&self) -> Vec<Param<T>> {
        let mut seen: BTreeMap<String, Param<T>> = BTreeMap::new();
        for p in self
            .gen_x
            .trainable_params()
            .into_iter()
            .chain(self.gen_y.trainable_params())
            .chain(self.disc_x.trainable_parameters())
            .chain(self.disc_y.trainable_parameters())
        {
            seen.entry(p.name()).or_insert(p);
        }
        seen.into_values().collect()
    }

    /// One optimization step on an unpaired batch. The generators update
    /// first from the full objective; the discriminators then update from
    /// the adversarial term, which scores the fakes detached so only the
    /// heads receive that gradient.
    pub fn train_step(&mut self, x: ArrayD<T>, y: ArrayD<T>) -> Result<LossBundle> {
        let w = self.cfg.losses.clone();
        let mut g = Graph::new();
        let xv = g.input(x);
        let yv = g.input(y);
        let fake_y = self.gen_y.translate_batch(&mut g, xv)?;
        let fake_x = self.gen_x.translate_batch(&mut g, yv)?;
        let (adv_g, adv_d) =
            adversarial_losses(&mut g, &self.disc_x, &self.disc_y, xv, yv, fake_x, fake_y)?;
        let cyc = cycle_from_fakes(
            &mut g, &self.gen_x, &self.gen_y, &self.lpips, xv, yv, fake_x, fake_y, &w,
        )?;
        let idt = identity_loss(&mut g, &self.gen_x, &self.gen_y, &self.lpips, xv, yv, &w)?;
        let total = total_loss(&mut g, adv_g, cyc.total, idt.total, &w);
        for (v, name) in [
            (adv_g, "loss.adv_g"),
            (adv_d, "loss.adv_d"),
            (cyc.total, "loss.cyc"),
            (idt.total, "loss.idt"),
            (total, "loss.total"),
        ] {
            g.check_finite(v, name)?;
        }
        let bundle = LossBundle {
            adv_g: scalar_f64(&g, adv_g),
            adv_d: scalar_f64(&g, adv_d),
            cyc: scalar_f64(&g, cyc.total),
            idt: scalar_f64(&g, idt.total),
            cyc_x: cyc.x_side.parts(&g),
            cyc_y: cyc.y_side.parts(&g),
            idt_x: idt.x_side.parts(&g),
            idt_y: idt.y_side.parts(&g),
            total: scalar_f64(&g, total),
        };
        self.opt_g.zero_grads();
        self.opt_d.zero_grads();
        g.backward(total);
        self.opt_g.step();
        // the generator pass routed gradients through the discriminator
        // heads; drop them so the head update sees only its own term
        self.opt_d.zero_grads();
        g.backward(adv_d);
        self.opt_d.step();
        self.step += 1;
        Ok(bundle)
    }

    /// Writes trainable weights, optimizer moments, and bookkeeping. The
    /// frozen backbone is reconstructed from the config on load and is
    /// deliberately absent from the archive.
    pub fn save_checkpoint(&self, path: &Path, loader: &LoaderState) -> Result<()> {
        let mut tensors: BTreeMap<String, ArrayD<T>> = BTreeMap::new();
        for p in self.trainable_params() {
            tensors.insert(p.name(), p.value().clone());
        }
        let (opt_g_t, gm) = self.opt_g.export_state();
        let (opt_d_t, dm) = self.opt_d.export_state();
        for (prefix, entries) in [("opt_g", gm), ("opt_d", dm)] {
            for (name, m, v) in entries {
                tensors.insert(format!("{prefix}.m.{name}"), m);
                tensors.insert(format!("{prefix}.v.{name}"), v);
            }
        }
        let extra = serde_json::to_value(TrainExtra {
            step: self.step,
            state_hash: self.cfg.state_hash(),
            opt_g_t,
            opt_d_t,
            loader: *loader,
            config: embedded_config(&self.cfg),
        })
        .expect("train metadata serializes");
        checkpoint::write_archive(path, TRAIN_KIND, extra, &tensors)
    }

    /// Restores weights, optimizer moments, and the step counter; returns
    /// the loader position stored alongside them.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<LoaderState> {
        let (manifest, tensors) = checkpoint::read_archive::<T>(path)?;
        if manifest.kind != TRAIN_KIND {
            return Err(Error::load(
                path,
                format!("kind `{}` is not a training checkpoint", manifest.kind),
            ));
        }
        let extra: TrainExtra = serde_json::from_value(manifest.extra)
            .map_err(|e| Error::load(path, format!("malformed train metadata: {e}")))?;
        if extra.state_hash != self.cfg.state_hash() {
            return Err(Error::config(
                "checkpoint was produced under an incompatible configuration",
            ));
        }
        for p in self.trainable_params() {
            let name = p.name();
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::load(path, format!("missing tensor `{name}`")))?;
            if t.shape() != p.value().shape() {
                return Err(Error::load(path, format!("tensor `{name}` shape mismatch")));
            }
            p.set_value(t.clone());
        }
        let gm = moment_entries(path, &tensors, "opt_g", self.opt_g.params())?;
        self.opt_g.import_state(extra.opt_g_t, gm)?;
        let dm = moment_entries(path, &tensors, "opt_d", self.opt_d.params())?;
        self.opt_d.import_state(extra.opt_d_t, dm)?;
        self.step = extra.step;
        Ok(extra.loader)
    }
}

fn scalar_f64<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.scalar(v).to_f64().unwrap_or(f64::NAN)
}

fn moment_entries<T: Scalar>(
    path: &Path,
    tensors: &BTreeMap<String, ArrayD<T>>,
    prefix: &str,
    params: &[Param<T>],
) -> Result<Vec<(String, ArrayD<T>, ArrayD<T>)>> {
    params
        .iter()
        .map(|p| {
            let name = p.name();
            let m = tensors
                .get(&format!("{prefix}.m.{name}"))
                .ok_or_else(|| Error::load(path, format!("missing moment `{prefix}.m.{name}`")))?
                .clone();
            let v = tensors
                .get(&format!("{prefix}.v.{name}"))
                .ok_or_else(|| Error::load(path, format!("missing moment `{prefix}.v.{name}`")))?
                .clone();
            Ok((name, m, v))
        })
        .collect()
}

/// FID/KID of X→Y translations of `val_x` images against `val_y` images.
fn validate<T: Scalar>(
    gen_y: &GeneratorSpec<T>,
    extractor: &EmbeddingExtractor,
    val_x: &Path,
    val_y: &Path,
    cap: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MetricReport> {
    let mut xs = list_images(val_x)?;
    xs.truncate(cap);
    let mut ys = list_images(val_y)?;
    ys.truncate(cap);
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::data(
            "validation needs at least two images per side",
        ));
    }
    let mut generated = Vec::with_capacity(xs.len());
    for f in &xs {
        let img = image::open(f)
            .map_err(|e| Error::load(f, e.to_string()))?
            .to_rgb8();
        let t = image_to_tensor::<T>(&img).insert_axis(Axis(0));
        let out = gen_y.translate(&t)?;
        generated.push(tensor_to_image(&out)?);
    }
    let mut references = Vec::with_capacity(ys.len());
    for f in &ys {
        references.push(
            image::open(f)
                .map_err(|e| Error::load(f, e.to_string()))?
                .to_rgb8(),
        );
    }
    let ea = extractor.embed_images(&generated)?;
    let eb = extractor.embed_images(&references)?;
    let fid_value = fid(&ea, &eb)?;
    let subset = KID_SUBSET_DEFAULT.min(ea.len()).min(eb.len());
    let (kid_mean, kid_std) = kid(&ea, &eb, subset, KID_SUBSETS_DEFAULT, seed)?;
    Ok(MetricReport {
        fid: fid_value,
        kid_mean_x1000: kid_mean * 1000.0,
        kid_std_x1000: kid_std * 1000.0,
        n_generated: ea.len(),
        n_reference: eb.len(),
        extractor: extractor.id.clone(),
        config_hash: config_hash.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct ValPoint {
    pub step: u64,
    pub report: MetricReport,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps_completed: u64,
    pub rows: Vec<(u64, LossBundle)>,
    pub csv_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub cadence_checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub validations: Vec<ValPoint>,
}

/// Runs (or resumes) training to `cfg.steps`, appending per-step losses to
/// `losses.csv` and checkpointing on the configured cadence. Validation
/// runs when both validation directories are set; the checkpoint with the
/// best validation FID is kept as `best.ht`.
pub fn run<T: Scalar>(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainReport> {
    run_with_progress::<T>(cfg, resume, |_, _| {})
}

/// [`run`], invoking `progress` with each completed step and its losses.
pub fn run_with_progress<T: Scalar>(
    cfg: &TrainConfig,
    resume: Option<&Path>,
    mut progress: impl FnMut(u64, &LossBundle),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut loader = UnpairedLoader::new(
        Path::new(&cfg.data.dir_x),
        Path::new(&cfg.data.dir_y),
        cfg.batch_size,
        cfg.seed,
    )?;
    if let Some(path) = resume {
        let state = trainer.load_checkpoint(path)?;
        loader.set_state(state)?;
    }
    let out_dir = Path::new(&cfg.output.dir);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("losses.csv");
    let fresh = resume.is_none() || !csv_path.exists();
    let mut opts = OpenOptions::new();
    if fresh {
        opts.write(true).create(true).truncate(true);
    } else {
        opts.append(true);
    }
    let mut csv = opts.open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    if fresh {
        writeln!(csv, "step,adv_g,adv_d,cyc,idt,total").map_err(|e| Error::io(&csv_path, e))?;
    }

    let extractor = EmbeddingExtractor::tiny(VAL_EXTRACTOR_SEED);
    let cfg_hash = cfg.hash();
    let total_steps = cfg.steps as u64;
    let mut rows = Vec::new();
    let mut cadence_checkpoints = Vec::new();
    let mut validations = Vec::new();
    let mut best: Option<(f64, PathBuf)> = None;
    while trainer.step < total_steps {
        let (x, y) = loader.next_batch::<T>()?;
        let bundle = trainer.train_step(x, y)?;
        let step = trainer.step;
        writeln!(
            csv,
            "{step},{},{},{},{},{}",
            bundle.adv_g, bundle.adv_d, bundle.cyc, bundle.idt, bundle.total
        )
        .map_err(|e| Error::io(&csv_path, e))?;
        progress(step, &bundle);
        rows.push((step, bundle));
        if step % cfg.output.checkpoint_every as u64 == 0 {
            let p = out_dir.join(format!("step_{step:06}.ht"));
            trainer.save_checkpoint(&p, &loader.state())?;
            cadence_checkpoints.push(p);
        }
        if step % cfg.output.validate_every as u64 == 0 {
            if let (Some(vx), Some(vy)) = (&cfg.data.val_x, &cfg.data.val_y) {
                let report = validate(
                    &trainer.gen_y,
                    &extractor,
                    Path::new(vx),
                    Path::new(vy),
                    cfg.output.val_max_images,
                    cfg.seed,
                    &cfg_hash,
                )?;
                let log_path = out_dir.join("val_metrics.jsonl");
                let mut log = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&log_path)
                    .map_err(|e| Error::io(&log_path, e))?;
                writeln!(
                    log,
                    "{}",
                    serde_json::json!({ "step": step, "fid": report.fid,
                        "kid_mean_x1000": report.kid_mean_x1000,
                        "kid_std_x1000": report.kid_std_x1000 })
                )
                .map_err(|e| Error::io(&log_path, e))?;
                if best.as_ref().map_or(true, |(b, _)| report.fid < *b) {
                    let p = out_dir.join("best.ht");
                    trainer.save_checkpoint(&p, &loader.state())?;
                    best = Some((report.fid, p));
                }
                validations.push(ValPoint { step, report });
            }
        }
    }
    let final_checkpoint = out_dir.join("final.ht");
    trainer.save_checkpoint(&final_checkpoint, &loader.state())?;
    Ok(TrainReport {
        steps_completed: trainer.step,
        rows,
        csv_path,
        final_checkpoint,
        cadence_checkpoints,
        best_checkpoint: best.map(|(_, p)| p),
        validations,
    })
}
