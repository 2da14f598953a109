//! Stage 2: adversarial training of `G` and `D` against a frozen style
//! encoder, with checkpointing and exact resume.
//!
//! All randomness is derived from the run seed: batch order from
//! `(seed, epoch)` and references from `(seed, epoch, step)`. A checkpoint
//! therefore only needs weights, optimizer moments, spectral-norm vectors
//! and the step counter to continue bit-for-bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use octmorph_autograd::{Adam, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{params_digest, Checkpoint, CheckpointMeta};
use crate::config::TrainConfig;
use crate::data::{load_domains, DatasetManifest, DomainImages, DomainLabel, Split};
use crate::discriminator::{Discriminator, DiscriminatorArch};
use crate::error::{ensure_finite, Error, Result};
use crate::generator::{Generator, GeneratorArch};
use crate::losses::{adv_loss_d, adv_loss_g, cycle_loss, style_loss, weighted_total, LossReport, CSV_HEADER};
use crate::rng::{child_rng, stream};
use crate::style::StyleEncoder;

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const LOSS_FILE: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One training batch: normals `x`, references `y` and the target label of
/// each pair.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub labels: Vec<DomainLabel>,
}

/// Training images grouped by domain label (index 0 holds the normals).
#[derive(Clone, Debug)]
pub struct TrainData {
    pub domains: Vec<DomainImages>,
}

impl TrainData {
    pub fn load(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self> {
        let domains = load_domains(manifest, Some(Split::Train), cfg.resolution, cfg.channels)?;
        let data = Self { domains };
        data.check(cfg)?;
        Ok(data)
    }

    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Data("training needs the source domain and at least one target".into()));
        }
        if self.domains[0].len() < cfg.batch_size {
            return Err(Error::Data(format!(
                "{} normal training images cannot fill one batch of {}",
                self.domains[0].len(),
                cfg.batch_size
            )));
        }
        if let Some(i) = (1..self.domains.len()).find(|&i| self.domains[i].is_empty()) {
            return Err(Error::Data(format!("target domain {i} has no training images")));
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.domains.len() - 1
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.domains[0].len() / batch_size
    }

    /// Target labels of every pair in `epoch`: each target domain repeated
    /// equally often, then shuffled, so every domain is drawn each epoch
    /// once the epoch holds at least one pair per domain.
    fn epoch_labels(&self, seed: u64, epoch: u64, pairs: usize) -> Vec<usize> {
        let n = self.num_targets();
        let mut labels: Vec<usize> = (0..pairs.div_ceil(n) * n).map(|i| 1 + i % n).collect();
        labels.shuffle(&mut child_rng(seed, &[stream::REFERENCES, epoch]));
        labels.truncate(pairs);
        labels
    }

    /// The batch of step `index` within `epoch`.
    pub fn batch(&self, cfg: &TrainConfig, epoch: u64, index: usize) -> StepBatch {
        let b = cfg.batch_size;
        let mut order: Vec<usize> = (0..self.domains[0].len()).collect();
        order.shuffle(&mut child_rng(cfg.seed, &[stream::EPOCH_ORDER, epoch]));
        let x = self.domains[0].batch(&order[index * b..(index + 1) * b]);
        let pairs = self.steps_per_epoch(b) * b;
        let labels = &self.epoch_labels(cfg.seed, epoch, pairs)[index * b..(index + 1) * b];
        let mut rng = child_rng(cfg.seed, &[stream::REFERENCES, epoch, index as u64]);
        let refs: Vec<Tensor> = labels
            .iter()
            .map(|&l| {
                let d = &self.domains[l];
                d.images[rng.random_range(0..d.len())].clone()
            })
            .collect();
        StepBatch {
            x,
            y: Tensor::stack(&refs),
            labels: labels.iter().map(|&l| DomainLabel(l)).collect(),
        }
    }
}

/// Generator, discriminator and their optimizers.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    /// Number of completed steps.
    pub step: u64,
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        ..AdamConfig::default()
    }
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, num_domains: usize, style_dim: usize) -> Self {
        let generator = Generator::new(
            GeneratorArch::from_config(&cfg.generator, cfg.resolution, cfg.channels, style_dim),
            cfg.seed,
        );
        let discriminator = Discriminator::new(
            DiscriminatorArch::from_config(&cfg.discriminator, cfg.resolution, cfg.channels, num_domains),
            cfg.seed,
        );
        let g_opt = Adam::new(adam_config(cfg), &generator.params);
        let d_opt = Adam::new(adam_config(cfg), &discriminator.params);
        Self {
            generator,
            discriminator,
            g_opt,
            d_opt,
            step: 0,
        }
    }

    fn meta(&self, cfg: &TrainConfig, domains: &[String], epoch: u64) -> CheckpointMeta {
        let mut meta = CheckpointMeta {
            step: self.step,
            epoch,
            config_hash: cfg.hash(),
            domains: domains.to_vec(),
            ..Default::default()
        };
        meta.rng_states.insert("seed".into(), cfg.seed);
        meta
    }

    pub fn generator_checkpoint(&self, cfg: &TrainConfig, domains: &[String], epoch: u64) -> Checkpoint {
        let mut ck = self.generator.to_checkpoint(self.meta(cfg, domains, epoch));
        ck.push_adam("adam.", &self.generator.params, &self.g_opt);
        ck
    }

    pub fn discriminator_checkpoint(&self, cfg: &TrainConfig, domains: &[String], epoch: u64) -> Checkpoint {
        let mut ck = self.discriminator.to_checkpoint(self.meta(cfg, domains, epoch));
        ck.push_adam("adam.", &self.discriminator.params, &self.d_opt);
        ck
    }

    pub fn save(&self, dir: &Path, cfg: &TrainConfig, domains: &[String], epoch: u64) -> Result<()> {
        self.generator_checkpoint(cfg, domains, epoch).save(&dir.join(GENERATOR_FILE))?;
        self.discriminator_checkpoint(cfg, domains, epoch).save(&dir.join(DISCRIMINATOR_FILE))
    }

    /// Restores a state written by [`TrainState::save`].
    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let gck = Checkpoint::load(&dir.join(GENERATOR_FILE))?;
        let dck = Checkpoint::load(&dir.join(DISCRIMINATOR_FILE))?;
        if gck.meta.step != dck.meta.step {
            return Err(Error::Checkpoint(format!(
                "generator (step {}) and discriminator (step {}) checkpoints disagree",
                gck.meta.step, dck.meta.step
            )));
        }
        let generator = Generator::from_checkpoint(&gck)?;
        let discriminator = Discriminator::from_checkpoint(&dck)?;
        let mut g_opt = Adam::new(adam_config(cfg), &generator.params);
        let mut d_opt = Adam::new(adam_config(cfg), &discriminator.params);
        gck.load_adam("adam.", &generator.params, &mut g_opt)?;
        dck.load_adam("adam.", &discriminator.params, &mut d_opt)?;
        Ok(Self {
            generator,
            discriminator,
            g_opt,
            d_opt,
            step: gck.meta.step,
        })
    }
}

fn add_grads(into: &mut [Option<Tensor>], extra: Vec<Option<Tensor>>) {
    for (slot, e) in into.iter_mut().zip(extra) {
        match (slot.as_mut(), e) {
            (Some(a), Some(b)) => a.add_assign(&b),
            (None, Some(b)) => *slot = Some(b),
            _ => {}
        }
    }
}

/// One discriminator update followed by one generator update. `encoder`
/// is only ever read; no gradient is accumulated for it.
pub fn training_step(
    state: &mut TrainState,
    encoder: &StyleEncoder,
    batch: &StepBatch,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let step = state.step;
    let branches = batch
        .labels
        .iter()
        .map(|&l| state.discriminator.arch.branch_of(l))
        .collect::<Result<Vec<_>>>()?;
    let s = encoder.encode_tensor(&batch.y)?;
    let s_tilde = encoder.encode_tensor(&batch.x)?;

    // Generator forward, kept for the generator update.
    let g_graph = Graph::new();
    let gp = state.generator.params.bind(&g_graph, true);
    let x = g_graph.constant(batch.x.clone());
    let s_var = g_graph.constant(s.clone());
    let fake = state.generator.forward(&gp, x, s_var)?;

    // Discriminator update.
    state.discriminator.update_spectral(1);
    let (adv_d, r1) = {
        let d = &state.discriminator;
        let graph = Graph::new();
        let dp = d.params.bind(&graph, true);
        let d_real = d.forward(&dp, graph.constant(batch.y.clone()), &branches)?;
        let d_fake = d.forward(&dp, graph.constant((*fake.value()).clone()), &branches)?;
        let loss = adv_loss_d(d_fake, d_real)?;
        let adv_d = ensure_finite("adv_d", loss.item())?;
        let mut grads = graph.backward(loss);
        let mut grads = dp.grads(&mut grads);
        let mut r1 = 0.0;
        if cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0 {
            let (penalty, r1_grads) = d.r1(&batch.y, &branches, cfg.r1_gamma, cfg.discriminator.r1_fd_step)?;
            r1 = ensure_finite("r1", penalty)?;
            // Lazy regularization: scale up so the average strength matches
            // applying it every step.
            let k = cfg.r1_interval as f32;
            add_grads(&mut grads, r1_grads.into_iter().map(|g| g.map(|t| t.scale(k))).collect());
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("discriminator gradient is not finite".into()));
        }
        state.d_opt.step(&mut state.discriminator.params, &grads);
        (adv_d, r1)
    };

    // Generator update against the updated discriminator.
    let d = &state.discriminator;
    let dp = d.params.bind(&g_graph, false);
    let d_fake = d.forward(&dp, fake, &branches)?;
    let d_real = d.forward(&dp, g_graph.constant(batch.y.clone()), &branches)?;
    let adv_g = adv_loss_g(d_fake, d_real)?;
    let x_rec = state.generator.forward(&gp, fake, g_graph.constant(s_tilde))?;
    let cyc = cycle_loss(x, x_rec)?;
    let ep = encoder.params.bind(&g_graph, false);
    let s_rec = encoder.forward(&ep, fake)?;
    let sty = style_loss(s_var, s_rec)?;
    let (adv_g_v, cyc_v, sty_v) = (
        ensure_finite("adv_g", adv_g.item())?,
        ensure_finite("cyc", cyc.item())?,
        ensure_finite("sty", sty.item())?,
    );
    let total = weighted_total(adv_g, cyc, sty, &cfg.weights);
    let mut grads = g_graph.backward(total);
    let grads = gp.grads(&mut grads);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("generator gradient is not finite".into()));
    }
    state.g_opt.step(&mut state.generator.params, &grads);
    state.step += 1;
    LossReport::compose(step, adv_d, adv_g_v, cyc_v, sty_v, r1, &cfg.weights)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory holding `generator.ckpt` and `discriminator.ckpt` to
    /// continue from.
    pub resume_from: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Reports of the steps run by this invocation.
    pub reports: Vec<LossReport>,
    /// Digest of the encoder parameters at the start and after every epoch.
    pub encoder_digests: Vec<String>,
    pub steps_per_epoch: usize,
}

/// Reads a loss CSV written by [`run_training`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data(format!("{} lacks the loss CSV header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(LossReport::parse_csv_row).collect()
}

/// Runs Stage 2 into `out_dir`: `losses.csv`, the latest `generator.ckpt`
/// and `discriminator.ckpt`, periodic copies under `checkpoints/`, and a
/// copy of the encoder checkpoint.
pub fn run_training(
    train: &DatasetManifest,
    encoder_ckpt: &Checkpoint,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if encoder_ckpt.meta.domains != train.domains {
        return Err(Error::Data(format!(
            "encoder was trained on domains {:?} but the dataset has {:?}",
            encoder_ckpt.meta.domains, train.domains
        )));
    }
    let encoder = StyleEncoder::from_checkpoint(encoder_ckpt)?;
    if encoder.arch.resolution != cfg.resolution || encoder.arch.channels != cfg.channels {
        return Err(Error::Config(format!(
            "encoder expects {}-channel {}px images, config asks for {}-channel {}px",
            encoder.arch.channels, encoder.arch.resolution, cfg.channels, cfg.resolution
        )));
    }
    let data = TrainData::load(train, cfg)?;
    run_training_on(&data, &encoder, encoder_ckpt, &train.domains, cfg, out_dir, opts)
}

/// [`run_training`] on already loaded data.
pub fn run_training_on(
    data: &TrainData,
    encoder: &StyleEncoder,
    encoder_ckpt: &Checkpoint,
    domains: &[String],
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    data.check(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    encoder_ckpt.save(&out_dir.join(ENCODER_FILE))?;

    let mut state = match &opts.resume_from {
        Some(dir) => {
            let s = TrainState::load(dir, cfg)?;
            log::info!("resuming from step {} ({})", s.step, dir.display());
            s
        }
        None => TrainState::new(cfg, domains.len(), encoder.style_dim()),
    };
    if state.discriminator.arch.branches != data.num_targets() + usize::from(cfg.discriminator.normal_as_target) {
        return Err(Error::Checkpoint("discriminator branch count does not match the dataset".into()));
    }

    // Loss CSV: keep rows before the resume point, then append.
    let csv_path = out_dir.join(LOSS_FILE);
    let mut kept = Vec::new();
    if opts.resume_from.is_some() && csv_path.exists() {
        kept = read_loss_csv(&csv_path)?
            .into_iter()
            .filter(|r| r.step < state.step)
            .collect();
    }
    let mut csv = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut write_row = |line: &str| -> Result<()> {
        writeln!(csv, "{line}").map_err(|e| Error::io(&csv_path, e))
    };
    write_row(CSV_HEADER)?;
    for r in &kept {
        write_row(&r.csv_row())?;
    }

    let spe = data.steps_per_epoch(cfg.batch_size);
    let total_steps = (cfg.epochs * spe) as u64;
    let stop = if cfg.max_steps > 0 { cfg.max_steps.min(total_steps) } else { total_steps };
    let frozen = params_digest(&encoder.params);
    let mut digests = vec![frozen.clone()];
    let mut reports = Vec::new();

    while state.step < stop {
        let epoch = state.step / spe as u64;
        let index = (state.step % spe as u64) as usize;
        let batch = data.batch(cfg, epoch, index);
        let report = training_step(&mut state, encoder, &batch, cfg)?;
        write_row(&report.csv_row())?;
        if report.step % 50 == 0 {
            log::info!(
                "step {} epoch {epoch}: adv_d {:.4} adv_g {:.4} cyc {:.4} sty {:.4} r1 {:.4}",
                report.step,
                report.adv_d,
                report.adv_g,
                report.cyc,
                report.sty,
                report.r1
            );
        }
        reports.push(report);
        if index + 1 == spe {
            digests.push(params_digest(&encoder.params));
        }
        if cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 {
            let dir = out_dir.join(CHECKPOINT_DIR).join(format!("step_{:08}", state.step));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            state.save(&dir, cfg, domains, state.step / spe as u64)?;
        }
    }
    if digests.last() != Some(&frozen) {
        return Err(Error::Numerical("style encoder parameters changed during training".into()));
    }
    state.save(out_dir, cfg, domains, state.step / spe.max(1) as u64)?;
    Ok(TrainOutcome {
        state,
        reports,
        encoder_digests: digests,
        steps_per_epoch: spe,
    })
}
