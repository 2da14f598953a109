//! Command-line driver: one subcommand per pipeline stage, each writing into
//! its `--out` directory together with the effective configuration.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use octmorph::checkpoint::Checkpoint;
use octmorph::data::{
    load_domains, load_manifest, sample_split_with_quota, save_png, AugmentConfig, DatasetManifest,
    DomainImages, QuotaOptions, Split, MANIFEST_FILE,
};
use octmorph::evaluation::{
    evaluate_synthesis, reference_grid, reference_synthesis, train_toy_classifier, ClassifierConfig,
    FeatureExtractor, PixelFeatures, ToyClassifier,
};
use octmorph::generator::Generator;
use octmorph::style::{encoder_checkpoint, pretrain_style_encoder, StyleEncoder};
use octmorph::toy::{generate_toy, ToySpec, SOURCE_DOMAIN};
use octmorph::training::{run_training, TrainOptions, ENCODER_FILE, GENERATOR_FILE};
use octmorph::{Error, Result, TrainConfig};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const RUN_FILE: &str = "run.json";
pub const DEVICE_ENV: &str = "OCTMORPH_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "octmorph", version, about = "Multi-domain image translation with a pre-trained style encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override of a configuration field (dotted keys for nested
    /// fields). May be repeated.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic toy dataset.
    Toy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        domains: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 40)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Scan an image tree and draw fixed-size train/test splits.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Root with one directory per domain.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fill short domains with augmented copies.
        #[arg(long)]
        quota: bool,
        /// Allow augmenting the source domain too.
        #[arg(long)]
        augment_source: bool,
        #[arg(long, default_value = SOURCE_DOMAIN)]
        source_domain: String,
    },
    /// Stage 1: pre-train the style encoder.
    PretrainStyle {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest, or a directory holding `manifest.jsonl`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 2: adversarial training with the frozen encoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint written by `pretrain-style`.
        #[arg(long)]
        encoder: PathBuf,
        /// Directory with generator/discriminator checkpoints to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reference-guided synthesis of every test normal in every domain.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Synthesis plus FID and diversity scores.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Extractor::Toy)]
        extractor: Extractor,
        /// Trained classifier checkpoint for the `toy` extractor; trained on
        /// the training split when omitted.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Grid montages: references across the top, sources down the side.
    Grid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 4)]
        sources: usize,
        #[arg(long, default_value_t = 5)]
        references: usize,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Training output directory (or its `generator.ckpt`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Extractor {
    /// Small classifier trained on the dataset's domains.
    Toy,
    /// Average-pooled raw pixels.
    Pixels,
    /// The frozen style encoder.
    Style,
}

/// Exit code of an error category.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 3,
        Error::Numerical(_) => 5,
        _ => 4,
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Toy { common, .. }
            | Command::Prepare { common, .. }
            | Command::PretrainStyle { common, .. }
            | Command::Train { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Grid { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Toy { .. } => "toy",
            Command::Prepare { .. } => "prepare",
            Command::PretrainStyle { .. } => "pretrain-style",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Grid { .. } => "grid",
        }
    }
}

/// Config file (or defaults), then the device variable, then overrides.
pub fn effective_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Ok(device) = std::env::var(DEVICE_ENV) {
        cfg.device = device;
    }
    cfg.with_overrides(&common.overrides)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A manifest file, or a directory holding one.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(Error::Data(format!(
            "no dataset manifest at {} (run `toy` or `prepare` first)",
            file.display()
        )));
    }
    DatasetManifest::load(&file)
}

struct Model {
    generator: Generator,
    encoder: StyleEncoder,
    manifest: DatasetManifest,
    test: Vec<DomainImages>,
}

fn load_model(args: &ModelArgs) -> Result<Model> {
    let dir = if args.checkpoint.is_dir() {
        args.checkpoint.clone()
    } else {
        args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let gck = Checkpoint::load(&dir.join(GENERATOR_FILE))?;
    let eck = Checkpoint::load(&dir.join(ENCODER_FILE))?;
    let manifest = load_dataset(&args.data)?;
    if gck.meta.domains != manifest.domains {
        return Err(Error::Data(format!(
            "checkpoint domains {:?} differ from dataset domains {:?}",
            gck.meta.domains, manifest.domains
        )));
    }
    let generator = Generator::from_checkpoint(&gck)?;
    let encoder = StyleEncoder::from_checkpoint(&eck)?;
    let test = load_domains(&manifest, Some(Split::Test), generator.arch.resolution, generator.arch.channels)?;
    if test[0].is_empty() {
        return Err(Error::Data("the test split has no normal images".into()));
    }
    Ok(Model {
        generator,
        encoder,
        manifest,
        test,
    })
}

/// Runs one parsed invocation.
pub fn dispatch(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let cfg = effective_config(common)?;
    let out = &common.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(EFFECTIVE_CONFIG_FILE), &cfg.to_toml_string())?;
    let run = serde_json::json!({
        "command": cli.command.name(),
        "arguments": format!("{:?}", cli.command),
        "config_hash": cfg.hash(),
    });
    write(&out.join(RUN_FILE), &serde_json::to_string_pretty(&run).expect("serializable"))?;

    match &cli.command {
        Command::Toy {
            domains,
            seed,
            train,
            test,
            resolution,
            ..
        } => {
            let spec = ToySpec {
                n_domains: *domains,
                train_per_domain: *train,
                test_per_domain: *test,
                resolution: *resolution,
                seed: *seed,
                ..Default::default()
            };
            let m = generate_toy(&spec, out)?;
            log::info!("wrote {} toy images in {} domains to {}", m.records.len(), m.domains.len(), out.display());
        }
        Command::Prepare {
            data,
            train,
            test,
            seed,
            quota,
            augment_source,
            source_domain,
            ..
        } => {
            let (scanned, report) = load_manifest(&absolute(data)?, None, source_domain)?;
            if !report.skipped.is_empty() {
                log::warn!("{} unreadable images skipped", report.skipped.len());
            }
            let opts = quota.then(|| -> Result<QuotaOptions> {
                Ok(QuotaOptions {
                    augment: AugmentConfig {
                        seed: *seed,
                        ..AugmentConfig::default()
                    },
                    out_dir: absolute(&out.join("augmented"))?,
                    augment_source: *augment_source,
                })
            });
            let opts = opts.transpose()?;
            let m = sample_split_with_quota(&scanned, *train, *test, *seed, opts.as_ref())?;
            m.save(&out.join(MANIFEST_FILE))?;
            log::info!("wrote {} records to {}", m.records.len(), out.join(MANIFEST_FILE).display());
        }
        Command::PretrainStyle { data, .. } => {
            let m = load_dataset(data)?;
            let (enc, report) = pretrain_style_encoder(&m, &cfg)?;
            write(&out.join("pretrain.jsonl"), &report.to_jsonl())?;
            encoder_checkpoint(&enc, &m.domains, &cfg, cfg.encoder.epochs).save(&out.join(ENCODER_FILE))?;
            if let Some(q) = report.epochs.last().map(|e| &e.quality) {
                log::info!("final held-out nearest-centroid accuracy {:.3}", q.accuracy);
            }
        }
        Command::Train {
            data, encoder, resume, ..
        } => {
            let m = load_dataset(data)?;
            let eck = Checkpoint::load(encoder)?;
            let opts = TrainOptions {
                resume_from: resume.clone(),
            };
            let o = run_training(&m, &eck, &cfg, out, &opts)?;
            log::info!("trained to step {}", o.state.step);
        }
        Command::Generate { model, k, .. } => {
            let mdl = load_model(model)?;
            let synth = reference_synthesis(
                &mdl.generator,
                &mdl.encoder,
                &mdl.test[0],
                &mdl.test,
                &mdl.manifest.domains,
                *k,
                cfg.seed,
                Some(out),
            )?;
            let n: usize = synth.iter().map(|s| s.count()).sum();
            log::info!("wrote {n} images to {}", out.display());
        }
        Command::Evaluate {
            model,
            k,
            extractor,
            classifier,
            ..
        } => {
            let mdl = load_model(model)?;
            let clf;
            let pixels = PixelFeatures { grid: 8 };
            let fx: &dyn FeatureExtractor = match extractor {
                Extractor::Pixels => &pixels,
                Extractor::Style => &mdl.encoder,
                Extractor::Toy => {
                    clf = match classifier {
                        Some(p) => ToyClassifier::from_checkpoint(&Checkpoint::load(p)?)?,
                        None => {
                            let train = load_domains(
                                &mdl.manifest,
                                Some(Split::Train),
                                mdl.generator.arch.resolution,
                                mdl.generator.arch.channels,
                            )?;
                            let c = train_toy_classifier(
                                &train,
                                &ClassifierConfig {
                                    seed: cfg.seed,
                                    ..ClassifierConfig::default()
                                },
                            )?;
                            c.to_checkpoint(Default::default()).save(&out.join("classifier.ckpt"))?;
                            c
                        }
                    };
                    &clf
                }
            };
            let synth = reference_synthesis(
                &mdl.generator,
                &mdl.encoder,
                &mdl.test[0],
                &mdl.test,
                &mdl.manifest.domains,
                *k,
                cfg.seed,
                Some(&out.join("generated")),
            )?;
            let report = evaluate_synthesis(&synth, &mdl.test[0], &mdl.test, fx)?;
            write(&out.join("report.json"), &report.to_json())?;
            let dataset = model.data.file_name().map_or("data".into(), |s| s.to_string_lossy().into_owned());
            write(&out.join("table.csv"), &report.table_csv("octmorph", &dataset))?;
            log::info!("FID {:.4}, diversity {:.4} ({})", report.fid, report.diversity, report.extractor);
        }
        Command::Grid {
            model,
            sources,
            references,
            ..
        } => {
            let mdl = load_model(model)?;
            let src: Vec<_> = mdl.test[0].images.iter().take(*sources).cloned().collect();
            for (l, name) in mdl.manifest.domains.iter().enumerate().skip(1) {
                let refs: Vec<_> = mdl.test[l].images.iter().take(*references).cloned().collect();
                let grid = reference_grid(&mdl.generator, &mdl.encoder, &src, &refs)?;
                save_png(&grid, &out.join(format!("grid_{name}.png")))?;
            }
        }
    }
    Ok(())
}

/// Parses `argv`, runs it, and returns the process exit code. Failures are
/// reported as one `error[<category>]: <message>` line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            exit_code(&e)
        }
    }
}
