//! Stage 1: metric-learning pre-training of the style encoder, and the
//! cluster diagnostics used to judge it.

use octmorph_autograd::{Adam, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderArch, StyleCode, StyleEncoder};
use super::mining::{batch_triplet_loss, mine_ephn};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::TrainConfig;
use crate::data::{load_domains, DatasetManifest, DomainImages, Split};
use crate::error::{Error, Result};
use crate::rng::{child_rng, stream};

/// Images per class used for the per-epoch diagnostics.
const DIAGNOSTIC_PER_CLASS: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    /// Nearest-centroid label accuracy of the query codes.
    pub accuracy: f64,
    /// Mean cosine similarity over same-label query pairs.
    pub intra: f64,
    /// Mean cosine similarity over different-label query pairs.
    pub inter: f64,
    pub gap: f64,
}

/// Builds class centroids from `reference` and scores `query` against them.
pub fn cluster_quality(
    reference: &[StyleCode],
    reference_labels: &[usize],
    query: &[StyleCode],
    query_labels: &[usize],
) -> Result<ClusterQuality> {
    if reference.len() != reference_labels.len() || query.len() != query_labels.len() {
        return Err(Error::Shape("cluster_quality: codes and labels differ in length".into()));
    }
    if reference.is_empty() || query.is_empty() {
        return Err(Error::Data("cluster_quality needs reference and query codes".into()));
    }
    let d = reference[0].dim();
    let classes = reference_labels.iter().max().unwrap() + 1;
    let mut centroids = vec![vec![0.0f64; d]; classes];
    let mut counts = vec![0usize; classes];
    for (code, &l) in reference.iter().zip(reference_labels) {
        counts[l] += 1;
        for (c, &v) in centroids[l].iter_mut().zip(&code.vector) {
            *c += v as f64;
        }
    }
    for c in centroids.iter_mut() {
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        c.iter_mut().for_each(|v| *v /= n);
    }

    let mut correct = 0usize;
    for (code, &l) in query.iter().zip(query_labels) {
        let mut best: Option<(usize, f64)> = None;
        for (k, c) in centroids.iter().enumerate() {
            if counts[k] == 0 {
                continue;
            }
            let s: f64 = c.iter().zip(&code.vector).map(|(&a, &b)| a * b as f64).sum();
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((k, s));
            }
        }
        correct += usize::from(best.map(|(k, _)| k) == Some(l));
    }

    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..query.len() {
        for j in i + 1..query.len() {
            let s = query[i].dot(&query[j]) / (query[i].norm() * query[j].norm()).max(1e-300);
            if query_labels[i] == query_labels[j] {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    let intra = if n_intra > 0 { intra / n_intra as f64 } else { 0.0 };
    let inter = if n_inter > 0 { inter / n_inter as f64 } else { 0.0 };
    Ok(ClusterQuality {
        accuracy: correct as f64 / query.len() as f64,
        intra,
        inter,
        gap: intra - inter,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainStatus {
    Untrained,
    Trained,
    /// A non-finite loss or parameter appeared; the encoder holds the last
    /// finite state.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
    pub quality: ClusterQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub status: PretrainStatus,
    pub initial: ClusterQuality,
    pub epochs: Vec<EpochStats>,
}

impl PretrainReport {
    /// One JSON object per line: the initial diagnostics, then each epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({"status": self.status, "initial": self.initial}).to_string();
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Up to `per_class` images of every class, with their labels.
fn diagnostic_set(domains: &[DomainImages], per_class: usize) -> (Vec<Tensor>, Vec<usize>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, d) in domains.iter().enumerate() {
        for img in d.images.iter().take(per_class) {
            images.push(img.clone());
            labels.push(label);
        }
    }
    (images, labels)
}

fn self_quality(enc: &StyleEncoder, images: &[Tensor], labels: &[usize]) -> Result<ClusterQuality> {
    let codes = enc.encode_images(images, 64)?;
    cluster_quality(&codes, labels, &codes, labels)
}

/// Trains a fresh encoder on the training split of `train` (every domain,
/// the source domain included, is one class).
pub fn pretrain_style_encoder(
    train: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<(StyleEncoder, PretrainReport)> {
    cfg.validate()?;
    if train.num_domains() < 2 {
        return Err(Error::Data("style pre-training needs at least two domains".into()));
    }
    let domains = load_domains(train, Some(Split::Train), cfg.resolution, cfg.channels)?;
    pretrain_on_images(&domains, cfg)
}

/// [`pretrain_style_encoder`] on already loaded images, one entry per class.
pub fn pretrain_on_images(
    domains: &[DomainImages],
    cfg: &TrainConfig,
) -> Result<(StyleEncoder, PretrainReport)> {
    let ec = &cfg.encoder;
    for (label, d) in domains.iter().enumerate() {
        if d.len() < 2 {
            return Err(Error::Data(format!(
                "class {label} has {} training images; style pre-training needs at least 2",
                d.len()
            )));
        }
    }
    let arch = EncoderArch::from_config(ec, cfg.resolution, cfg.channels);
    let mut enc = StyleEncoder::new(arch, cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: ec.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            ..AdamConfig::default()
        },
        &enc.params,
    );
    let (diag_images, diag_labels) = diagnostic_set(domains, DIAGNOSTIC_PER_CLASS);
    let initial = self_quality(&enc, &diag_images, &diag_labels)?;
    let mut report = PretrainReport {
        status: if ec.epochs == 0 { PretrainStatus::Untrained } else { PretrainStatus::Trained },
        initial,
        epochs: Vec::new(),
    };

    let n_classes = domains.len();
    let per_step = if ec.classes_per_batch == 0 { n_classes } else { ec.classes_per_batch.min(n_classes) };
    let k = ec.samples_per_class;
    let largest = domains.iter().map(DomainImages::len).max().unwrap_or(0);
    let steps_per_epoch = largest.div_ceil(k) * n_classes / per_step;

    'epochs: for epoch in 0..ec.epochs {
        let orders: Vec<Vec<usize>> = (0..n_classes)
            .map(|c| {
                let mut o: Vec<usize> = (0..domains[c].len()).collect();
                o.shuffle(&mut child_rng(cfg.seed, &[stream::PRETRAIN_BATCH, epoch as u64, c as u64]));
                o
            })
            .collect();
        let mut class_rng = child_rng(cfg.seed, &[stream::PRETRAIN_BATCH, epoch as u64, u64::MAX]);
        let mut cursors = vec![0usize; n_classes];
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for _ in 0..steps_per_epoch {
            let mut classes: Vec<usize> = (0..n_classes).collect();
            if per_step < n_classes {
                classes.shuffle(&mut class_rng);
                classes.truncate(per_step);
                classes.sort_unstable();
            }
            let mut images = Vec::with_capacity(per_step * k);
            let mut labels = Vec::with_capacity(per_step * k);
            for &c in &classes {
                for _ in 0..k {
                    let order = &orders[c];
                    images.push(domains[c].images[order[cursors[c] % order.len()]].clone());
                    labels.push(c);
                    cursors[c] += 1;
                }
            }

            let graph = Graph::new();
            let p = enc.params.bind(&graph, true);
            let z = enc.forward(&p, graph.constant(Tensor::stack(&images)))?;
            let triplets = mine_ephn(&z.value(), &labels)?;
            if triplets.is_empty() {
                continue;
            }
            let loss = batch_triplet_loss(z, &triplets, ec.loss, ec.temperature, ec.margin)?;
            let value = loss.item();
            if !value.is_finite() {
                log::error!("style pre-training diverged at epoch {epoch} (loss {value})");
                report.status = PretrainStatus::Diverged;
                break 'epochs;
            }
            let mut grads = graph.backward(loss);
            let grads = p.grads(&mut grads);
            let before = enc.params.clone();
            adam.step(&mut enc.params, &grads);
            if !enc.params.tensors().iter().all(Tensor::is_finite) {
                log::error!("style pre-training produced non-finite weights at epoch {epoch}");
                enc.params = before;
                report.status = PretrainStatus::Diverged;
                break 'epochs;
            }
            loss_sum += value as f64;
            steps += 1;
        }
        let quality = self_quality(&enc, &diag_images, &diag_labels)?;
        let stats = EpochStats {
            epoch,
            loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            steps,
            quality,
        };
        log::info!(
            "stage 1 epoch {epoch}: loss {:.4} acc {:.3} gap {:.3}",
            stats.loss,
            quality.accuracy,
            quality.gap
        );
        report.epochs.push(stats);
    }
    Ok((enc, report))
}

/// Checkpoint of a pre-trained encoder, tagged with the manifest's domain
/// order and the config hash.
pub fn encoder_checkpoint(enc: &StyleEncoder, domains: &[String], cfg: &TrainConfig, epochs: usize) -> Checkpoint {
    enc.to_checkpoint(CheckpointMeta {
        epoch: epochs as u64,
        config_hash: cfg.hash(),
        domains: domains.to_vec(),
        ..Default::default()
    })
}
