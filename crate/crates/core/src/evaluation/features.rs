//! Pluggable feature extractors for FID and diversity, including a small
//! classifier trained on the toy domains.

use octmorph_autograd::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, STAGE_CLASSIFIER};
use crate::data::DomainImages;
use crate::error::{Error, Result};
use crate::nn::{Conv, Dense, LEAKY_SLOPE};
use crate::rng::{child_rng, stream};
use crate::style::StyleEncoder;

/// Maps a `[B, C, H, W]` batch to one embedding per image. Scores computed
/// with different extractors are not comparable, so each names itself.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn features(&self, batch: &Tensor) -> Result<Vec<Vec<f32>>>;
}

/// Embeds `[C, H, W]` images in chunks.
pub fn extract(extractor: &dyn FeatureExtractor, images: &[Tensor], chunk: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        out.extend(extractor.features(&Tensor::stack(part))?);
    }
    Ok(out)
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    let (_, d) = t.dims2();
    t.data().chunks_exact(d).map(<[f32]>::to_vec).collect()
}

/// Raw pixels, average-pooled to a `grid×grid` layout per channel.
#[derive(Clone, Debug)]
pub struct PixelFeatures {
    pub grid: usize,
}

impl FeatureExtractor for PixelFeatures {
    fn id(&self) -> String {
        format!("pixels-{g}x{g}", g = self.grid)
    }

    fn features(&self, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
        let (b, c, h, w) = batch.dims4();
        let g = self.grid;
        if g == 0 || h % g != 0 || w % g != 0 {
            return Err(Error::Shape(format!("cannot pool {h}×{w} images onto a {g}×{g} grid")));
        }
        let (ch, cw) = (h / g, w / g);
        let norm = (ch * cw) as f32;
        Ok((0..b)
            .map(|s| {
                let img = &batch.data()[s * c * h * w..(s + 1) * c * h * w];
                let mut f = vec![0.0; c * g * g];
                for (i, v) in img.iter().enumerate() {
                    let (k, y, x) = (i / (h * w), (i / w) % h, i % w);
                    f[k * g * g + (y / ch) * g + x / cw] += v / norm;
                }
                f
            })
            .collect())
    }
}

/// Style codes of the frozen encoder.
impl FeatureExtractor for StyleEncoder {
    fn id(&self) -> String {
        format!("style-encoder-d{}", self.style_dim())
    }

    fn features(&self, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
        Ok(rows(&self.encode_tensor(batch)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub resolution: usize,
    pub channels: usize,
    pub stages: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub stages: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            stages: vec![16, 32],
            epochs: 40,
            learning_rate: 5e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Strided convolutions, a global average pool (the embedding) and a linear
/// domain classifier on top.
#[derive(Clone, Debug)]
pub struct ToyClassifier {
    pub arch: ClassifierArch,
    pub params: ParamStore,
    convs: Vec<Conv>,
    head: Dense,
}

impl ToyClassifier {
    pub fn new(arch: ClassifierArch, seed: u64) -> Self {
        let mut rng = child_rng(seed, &[stream::CLASSIFIER_INIT]);
        let mut params = ParamStore::new();
        let mut cin = arch.channels;
        let mut convs = Vec::new();
        for (i, &cout) in arch.stages.iter().enumerate() {
            convs.push(Conv::new(&mut params, &format!("conv.{i}"), cin, cout, 3, 2, true, &mut rng));
            cin = cout;
        }
        let head = Dense::new(&mut params, "head", cin, arch.classes, &mut rng);
        Self {
            arch,
            params,
            convs,
            head,
        }
    }

    pub fn embed<'g>(&self, p: &octmorph_autograd::Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let a = &self.arch;
        match x.shape().as_slice() {
            [_, c, h, w] if *c == a.channels && *h == a.resolution && *w == a.resolution => {}
            s => return Err(Error::Shape(format!("classifier expects {}×{r}×{r} images, got {s:?}", a.channels, r = a.resolution))),
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(p, h).leaky_relu(LEAKY_SLOPE);
        }
        Ok(h.spatial_mean())
    }

    pub fn logits<'g>(&self, p: &octmorph_autograd::Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.head.forward(p, self.embed(p, x)?))
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let z = self.logits(&p, graph.constant(batch.clone()))?.value();
        Ok(z.data()
            .chunks_exact(self.arch.classes)
            .map(|r| (0..r.len()).fold(0, |best, i| if r[i] > r[best] { i } else { best }))
            .collect())
    }

    /// Fraction of correctly labeled images; `domains[l]` holds class `l`.
    pub fn accuracy(&self, domains: &[DomainImages]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for (label, d) in domains.iter().enumerate() {
            for part in d.images.chunks(64) {
                let pred = self.predict(&Tensor::stack(part))?;
                hit += pred.iter().filter(|&&p| p == label).count();
                total += part.len();
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.stage = STAGE_CLASSIFIER.to_string();
        meta.resolution = self.arch.resolution;
        meta.extra = serde_json::to_value(&self.arch).expect("serializable");
        let mut ck = Checkpoint::new(meta);
        ck.push_params("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(STAGE_CLASSIFIER)?;
        let arch: ClassifierArch = serde_json::from_value(ck.meta.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("bad classifier architecture: {e}")))?;
        let mut c = Self::new(arch, 0);
        ck.load_params("", &mut c.params)?;
        Ok(c)
    }
}

impl FeatureExtractor for ToyClassifier {
    fn id(&self) -> String {
        format!("toy-classifier-{}", self.arch.stages.iter().map(usize::to_string).collect::<Vec<_>>().join("-"))
    }

    fn features(&self, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        Ok(rows(&self.embed(&p, graph.constant(batch.clone()))?.value()))
    }
}

/// Trains a [`ToyClassifier`] with cross-entropy on `domains` (index =
/// class label).
pub fn train_toy_classifier(domains: &[DomainImages], cfg: &ClassifierConfig) -> Result<ToyClassifier> {
    let first = domains
        .iter()
        .find_map(|d| d.images.first())
        .ok_or_else(|| Error::Data("no images to train the classifier on".into()))?;
    let shape = first.shape();
    let mut clf = ToyClassifier::new(
        ClassifierArch {
            resolution: shape[1],
            channels: shape[0],
            stages: cfg.stages.clone(),
            classes: domains.len(),
        },
        cfg.seed,
    );
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &clf.params,
    );
    let all: Vec<(usize, usize)> = domains
        .iter()
        .enumerate()
        .flat_map(|(l, d)| (0..d.len()).map(move |i| (l, i)))
        .collect();
    for epoch in 0..cfg.epochs {
        let mut order = all.clone();
        order.shuffle(&mut child_rng(cfg.seed, &[stream::CLASSIFIER_BATCH, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = Tensor::stack(&chunk.iter().map(|&(l, i)| domains[l].images[i].clone()).collect::<Vec<_>>());
            let graph = Graph::new();
            let p = clf.params.bind(&graph, true);
            let logp = clf.logits(&p, graph.constant(x))?.log_softmax_rows();
            let k = clf.arch.classes;
            let picks: Vec<usize> = chunk.iter().enumerate().map(|(r, &(l, _))| r * k + l).collect();
            let loss = logp.gather(picks, &[chunk.len()]).mean().scale(-1.0);
            total += loss.item();
            let mut g = graph.backward(loss);
            let grads = p.grads(&mut g);
            adam.step(&mut clf.params, &grads);
        }
        log::info!("classifier epoch {epoch}: mean loss {:.4}", total / order.len().div_ceil(cfg.batch_size.max(1)) as f32);
    }
    Ok(clf)
}

/// Mean pairwise RMS feature distance within each group of `k ≥ 2` outputs
/// of one input, averaged over groups.
pub fn diversity_score(groups: &[Tensor], extractor: &dyn FeatureExtractor) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Data("diversity needs at least one group".into()));
    }
    let mut sum = 0.0;
    for g in groups {
        let k = g.shape()[0];
        if k < 2 {
            return Err(Error::Data(format!("diversity needs k ≥ 2 outputs per input, got {k}")));
        }
        let f = extractor.features(g)?;
        let mut acc = 0.0f64;
        for i in 0..k {
            for j in i + 1..k {
                let sq: f64 = f[i].iter().zip(&f[j]).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                acc += (sq / f[i].len() as f64).sqrt();
            }
        }
        sum += acc / (k * (k - 1) / 2) as f64;
    }
    Ok(sum / groups.len() as f64)
}
