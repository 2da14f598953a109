//! The generator `G(x, s)`: an instance-normalized content encoder, residual
//! bottleneck, and a decoder whose normalizations are modulated by the style
//! code through AdaIN.

use octmorph_autograd::{Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, STAGE_GENERATOR};
use crate::config::GeneratorConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv, Dense, NORM_EPS};
use crate::rng::{child_rng, stream};
use crate::style::StyleCode;

/// Bound on the initial weights of the AdaIN heads, so an untrained mapping
/// stays close to the identity modulation for any style code.
const HEAD_INIT_BOUND: f32 = 1e-2;

/// `γ · (f − μ) / sqrt(σ² + eps) + β` per sample and channel, with `μ` and
/// biased `σ²` taken over spatial positions. `gamma` and `beta` have one
/// entry per channel and are shared across the batch.
pub fn adain(content: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    if content.ndim() != 4 {
        return Err(Error::Shape(format!("adain expects [B, C, H, W], got {:?}", content.shape())));
    }
    let (b, c, h, w) = content.dims4();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "adain: {c} channels but gamma/beta have {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    if h * w < 2 {
        return Err(Error::Shape("adain needs at least two spatial positions".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config("adain eps must be positive".into()));
    }
    let graph = Graph::new();
    let x = graph.constant(content.clone());
    let g = graph.constant(Tensor::from_fn(&[b, c], |i| gamma[i % c]));
    let be = graph.constant(Tensor::from_fn(&[b, c], |i| beta[i % c]));
    Ok((*x.instance_norm(eps).channel_affine(&g, &be).value()).clone())
}

/// One `(γ, β)` pair per decoder AdaIN layer, for a single style code.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaINParams {
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub resolution: usize,
    pub channels: usize,
    /// Encoder widths; each stage after the first halves the resolution.
    pub stages: Vec<usize>,
    pub res_blocks: usize,
    pub mapping_hidden: usize,
    pub style_dim: usize,
}

impl GeneratorArch {
    pub fn from_config(cfg: &GeneratorConfig, resolution: usize, channels: usize, style_dim: usize) -> Self {
        Self {
            resolution,
            channels,
            stages: cfg.channels.clone(),
            res_blocks: cfg.res_blocks,
            mapping_hidden: cfg.mapping_hidden,
            style_dim,
        }
    }

    /// Channel count of every AdaIN layer, in decoder order.
    pub fn adain_schedule(&self) -> Vec<usize> {
        self.stages[..self.stages.len() - 1].iter().rev().copied().collect()
    }
}

#[derive(Clone, Debug)]
struct AdaINHead {
    gamma: Dense,
    beta: Dense,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub params: ParamStore,
    stem: Conv,
    down: Vec<Conv>,
    res: Vec<(Conv, Conv)>,
    up: Vec<Conv>,
    out: Conv,
    mapping: Vec<Dense>,
    heads: Vec<AdaINHead>,
}

impl Generator {
    pub fn new(arch: GeneratorArch, seed: u64) -> Self {
        let mut rng = child_rng(seed, &[stream::GENERATOR_INIT]);
        let mut p = ParamStore::new();
        let st = &arch.stages;
        let stem = Conv::new(&mut p, "stem", arch.channels, st[0], 3, 1, true, &mut rng);
        let down = (1..st.len())
            .map(|i| Conv::new(&mut p, &format!("down.{i}"), st[i - 1], st[i], 3, 2, true, &mut rng))
            .collect();
        let c = *st.last().expect("at least one stage");
        let res = (0..arch.res_blocks)
            .map(|i| {
                (
                    Conv::new(&mut p, &format!("res.{i}.a"), c, c, 3, 1, true, &mut rng),
                    Conv::new(&mut p, &format!("res.{i}.b"), c, c, 3, 1, true, &mut rng),
                )
            })
            .collect();
        let up = (1..st.len())
            .rev()
            .map(|i| Conv::new(&mut p, &format!("up.{i}"), st[i], st[i - 1], 3, 1, true, &mut rng))
            .collect();
        let out = Conv::new(&mut p, "out", st[0], arch.channels, 3, 1, true, &mut rng);
        let h = arch.mapping_hidden;
        let mapping = vec![
            Dense::new(&mut p, "map.0", arch.style_dim, h, &mut rng),
            Dense::new(&mut p, "map.1", h, h, &mut rng),
        ];
        let heads = arch
            .adain_schedule()
            .iter()
            .enumerate()
            .map(|(i, &ch)| AdaINHead {
                gamma: Dense::with_bound(&mut p, &format!("adain.{i}.gamma"), h, ch, Some(HEAD_INIT_BOUND), &mut rng),
                beta: Dense::with_bound(&mut p, &format!("adain.{i}.beta"), h, ch, Some(HEAD_INIT_BOUND), &mut rng),
            })
            .collect();
        Self {
            arch,
            params: p,
            stem,
            down,
            res,
            up,
            out,
            mapping,
            heads,
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        match shape {
            [_, c, h, w] if *c == a.channels && *h == a.resolution && *w == a.resolution => Ok(()),
            _ => Err(Error::Shape(format!(
                "generator trained for [B, {}, {r}, {r}] inputs, got {shape:?}",
                a.channels,
                r = a.resolution
            ))),
        }
    }

    fn check_style(&self, shape: &[usize], batch: usize) -> Result<()> {
        match shape {
            [b, d] if *d == self.arch.style_dim && (batch == 0 || *b == batch) => Ok(()),
            _ => Err(Error::Shape(format!(
                "expected style codes [{batch}, {}], got {shape:?}",
                self.arch.style_dim
            ))),
        }
    }

    /// `[B, d]` style codes to per-layer `([B, C], [B, C])` modulation.
    pub fn map_style_var<'g>(&self, p: &Bound<'g>, s: Var<'g>) -> Result<Vec<(Var<'g>, Var<'g>)>> {
        self.check_style(&s.shape(), 0)?;
        let mut h = s;
        for layer in &self.mapping {
            h = layer.forward(p, h).relu();
        }
        Ok(self
            .heads
            .iter()
            .map(|head| (head.gamma.forward(p, h).add_scalar(1.0), head.beta.forward(p, h)))
            .collect())
    }

    /// Inference-mode modulation for one style code.
    pub fn map_style(&self, s: &StyleCode) -> Result<AdaINParams> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let sv = graph.constant(Tensor::new(&[1, s.dim()], s.vector.clone()));
        let layers = self
            .map_style_var(&p, sv)?
            .into_iter()
            .map(|(g, b)| (g.value().data().to_vec(), b.value().data().to_vec()))
            .collect();
        Ok(AdaINParams { layers })
    }

    /// `G(x, s)` for images `[B, C, H, W]` and styles `[B, d]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, s: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        self.check_image(&shape)?;
        self.check_style(&s.shape(), shape[0])?;
        let modulation = self.map_style_var(p, s)?;

        let mut h = self.stem.forward(p, x).instance_norm(NORM_EPS).relu();
        for conv in &self.down {
            h = conv.forward(p, h).instance_norm(NORM_EPS).relu();
        }
        for (a, b) in &self.res {
            let r = a.forward(p, h).instance_norm(NORM_EPS).relu();
            h = h + b.forward(p, r).instance_norm(NORM_EPS);
        }
        for (conv, (gamma, beta)) in self.up.iter().zip(&modulation) {
            h = conv
                .forward(p, h.upsample2x())
                .instance_norm(NORM_EPS)
                .channel_affine(gamma, beta)
                .relu();
        }
        Ok(self.out.forward(p, h).tanh())
    }

    /// Inference-mode generation. `s` is `[B, d]`, or `[1, d]` to use one
    /// style for the whole batch.
    pub fn generate(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.check_image(x.shape())?;
        let b = x.shape()[0];
        let s = match s.shape() {
            [1, d] if b > 1 => Tensor::from_fn(&[b, *d], |i| s.data()[i % d]),
            _ => s.clone(),
        };
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let y = self.forward(&p, graph.constant(x.clone()), graph.constant(s))?;
        let out = (*y.value()).clone();
        if !out.is_finite() {
            return Err(Error::Numerical("generator output is not finite".into()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.stage = STAGE_GENERATOR.to_string();
        meta.resolution = self.arch.resolution;
        meta.extra = serde_json::to_value(&self.arch).expect("serializable");
        let mut ck = Checkpoint::new(meta);
        ck.push_params("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(STAGE_GENERATOR)?;
        let arch: GeneratorArch = serde_json::from_value(ck.meta.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("bad generator architecture: {e}")))?;
        let mut g = Self::new(arch, 0);
        ck.load_params("", &mut g.params)?;
        Ok(g)
    }
}
