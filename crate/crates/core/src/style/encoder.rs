//! The style encoder `E`: a strided convolutional trunk whose Gram statistics
//! are projected to a unit-norm style code.

use octmorph_autograd::{Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::gram::upper_triangle_indices;
use crate::checkpoint::{Checkpoint, CheckpointMeta, STAGE_STYLE_ENCODER};
use crate::config::EncoderConfig;
use crate::data::DomainLabel;
use crate::error::{Error, Result};
use crate::nn::{Conv, Dense, LEAKY_SLOPE};
use crate::rng::{child_rng, stream};

/// Epsilon guarding the final L2 normalization.
pub const STYLE_NORM_EPS: f32 = 1e-12;

/// A unit-norm style embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode {
    pub vector: Vec<f32>,
    pub source_label: Option<DomainLabel>,
}

impl StyleCode {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &StyleCode) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    /// Stacks codes into a `[B, d]` tensor.
    pub fn stack(codes: &[StyleCode]) -> Tensor {
        let d = codes.first().map_or(0, StyleCode::dim);
        let data = codes.iter().flat_map(|c| c.vector.iter().copied()).collect();
        Tensor::new(&[codes.len(), d], data)
    }
}

/// Everything needed to rebuild the encoder's parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub resolution: usize,
    pub channels: usize,
    pub stages: Vec<usize>,
    pub gram_stages: usize,
    pub style_dim: usize,
}

impl EncoderArch {
    pub fn from_config(cfg: &EncoderConfig, resolution: usize, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            stages: cfg.channels.clone(),
            gram_stages: cfg.gram_stages,
            style_dim: cfg.style_dim,
        }
    }

    fn gram_features(&self) -> usize {
        self.stages[self.stages.len() - self.gram_stages..]
            .iter()
            .map(|c| c * (c + 1) / 2)
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub arch: EncoderArch,
    pub params: ParamStore,
    convs: Vec<Conv>,
    proj: Dense,
}

impl StyleEncoder {
    pub fn new(arch: EncoderArch, seed: u64) -> Self {
        let mut rng = child_rng(seed, &[stream::ENCODER_INIT]);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = arch.channels;
        for (i, &cout) in arch.stages.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv::new(&mut params, &format!("trunk.{i}"), cin, cout, 3, stride, true, &mut rng));
            cin = cout;
        }
        let proj = Dense::new(&mut params, "proj", arch.gram_features(), arch.style_dim, &mut rng);
        Self {
            arch,
            params,
            convs,
            proj,
        }
    }

    pub fn style_dim(&self) -> usize {
        self.arch.style_dim
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        match shape {
            [_, c, h, w] if *c == a.channels && *h == a.resolution && *w == a.resolution => Ok(()),
            _ => Err(Error::Shape(format!(
                "style encoder trained for [B, {}, {r}, {r}] inputs, got {shape:?}",
                a.channels,
                r = a.resolution
            ))),
        }
    }

    /// `[B, C, H, W]` images to `[B, d]` unit-norm codes.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.check_input(&x.shape())?;
        let batch = x.shape()[0];
        let first_gram = self.convs.len() - self.arch.gram_stages;
        let mut h = x;
        let mut grams = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(p, h).leaky_relu(LEAKY_SLOPE);
            if i >= first_gram {
                let c = conv.out_channels;
                let g = h.gram();
                let n = c * (c + 1) / 2;
                grams.push(g.gather(upper_triangle_indices(batch, c), &[batch, n]));
            }
        }
        let feats = if grams.len() == 1 { grams[0] } else { Var::concat_cols(&grams) };
        Ok(self.proj.forward(p, feats).l2_normalize_rows(STYLE_NORM_EPS))
    }

    /// Inference-mode encoding to a `[B, d]` tensor.
    pub fn encode_tensor(&self, batch: &Tensor) -> Result<Tensor> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let z = self.forward(&p, graph.constant(batch.clone()))?;
        let out = (*z.value()).clone();
        if !out.is_finite() {
            return Err(Error::Numerical("style code is not finite".into()));
        }
        Ok(out)
    }

    pub fn encode(&self, batch: &Tensor) -> Result<Vec<StyleCode>> {
        let z = self.encode_tensor(batch)?;
        let d = self.style_dim();
        Ok(z.data()
            .chunks_exact(d)
            .map(|row| StyleCode {
                vector: row.to_vec(),
                source_label: None,
            })
            .collect())
    }

    /// Encodes a list of `[C, H, W]` images in chunks of `chunk`.
    pub fn encode_images(&self, images: &[Tensor], chunk: usize) -> Result<Vec<StyleCode>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            out.extend(self.encode(&Tensor::stack(part))?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.stage = STAGE_STYLE_ENCODER.to_string();
        meta.resolution = self.arch.resolution;
        meta.extra = serde_json::to_value(&self.arch).expect("serializable");
        let mut ck = Checkpoint::new(meta);
        ck.push_params("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(STAGE_STYLE_ENCODER)?;
        let arch: EncoderArch = serde_json::from_value(ck.meta.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("bad encoder architecture: {e}")))?;
        let mut enc = Self::new(arch, 0);
        ck.load_params("", &mut enc.params)?;
        Ok(enc)
    }
}
