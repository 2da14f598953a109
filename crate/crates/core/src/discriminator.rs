//! The multi-task discriminator `D`: a spectrally normalized convolutional
//! trunk with one 1×1 output head per target domain, plus R1 regularization.

use octmorph_autograd::{Bound, Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, STAGE_DISCRIMINATOR};
use crate::config::DiscriminatorConfig;
use crate::data::DomainLabel;
use crate::error::{Error, Result};
use crate::nn::{Conv, LEAKY_SLOPE};
use crate::rng::{child_rng, stream};

/// Lower clamp of the estimated singular value and of vector norms in the
/// power iteration.
pub const SN_EPS: f32 = 1e-12;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(SN_EPS as f64);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Runs `n_iter` power iterations on `weight` viewed as a `rows × rest`
/// matrix, updating `u` in place. Returns `(v, σ̂)` with `σ̂ = uᵀ W v`.
pub fn power_iteration(weight: &Tensor, u: &mut [f32], n_iter: usize) -> (Vec<f32>, f32) {
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows;
    assert_eq!(u.len(), rows, "power_iteration: u length");
    let w = weight.data();
    let mut uf: Vec<f64> = u.iter().map(|&x| x as f64).collect();
    let mut vf = vec![0.0f64; cols];
    for _ in 0..n_iter.max(1) {
        vf.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            let ur = uf[r];
            for (vc, &wv) in vf.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wv as f64 * ur;
            }
        }
        normalize(&mut vf);
        for r in 0..rows {
            uf[r] = w[r * cols..(r + 1) * cols]
                .iter()
                .zip(&vf)
                .map(|(&a, &b)| a as f64 * b)
                .sum();
        }
        normalize(&mut uf);
    }
    let sigma: f64 = (0..rows)
        .map(|r| {
            uf[r]
                * w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&vf)
                    .map(|(&a, &b)| a as f64 * b)
                    .sum::<f64>()
        })
        .sum();
    for (o, x) in u.iter_mut().zip(&uf) {
        *o = *x as f32;
    }
    (vf.into_iter().map(|x| x as f32).collect(), sigma as f32)
}

/// `W / σ̂(W)` after `n_power_iter` power iterations warm-started from
/// `u_state`, which is updated for the next call. A zero weight stays zero.
pub fn spectral_normalize(weight: &Tensor, u_state: &mut [f32], n_power_iter: usize) -> Result<(Tensor, f32)> {
    if n_power_iter == 0 {
        return Err(Error::Config("spectral normalization needs at least one power iteration".into()));
    }
    if weight.ndim() < 2 {
        return Err(Error::Shape(format!("cannot spectrally normalize shape {:?}", weight.shape())));
    }
    let (_, sigma) = power_iteration(weight, u_state, n_power_iter);
    let sigma = sigma.max(SN_EPS);
    Ok((weight.scale(1.0 / sigma), sigma))
}

/// Unit vector drawn from a standard normal.
fn random_unit(n: usize, rng: &mut impl rand::Rng) -> Vec<f32> {
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

/// `(γ/2) · mean_i ‖∇ₓ D(xᵢ)‖²` for a scorer mapping `[B, ...]` inputs to
/// `[B]` scores. Samples must be scored independently.
pub fn r1_penalty<F>(discriminate_fn: F, real: &Tensor, gamma: f32) -> Result<f32>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let grads = input_gradients(&discriminate_fn, real)?;
    Ok(penalty_from_gradients(&grads, gamma))
}

/// `∇ₓ Σᵢ D(xᵢ)`, which for independently scored samples stacks the
/// per-sample input gradients.
pub fn input_gradients<F>(discriminate_fn: &F, real: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let x = graph.variable(real.clone());
    let scores = discriminate_fn(&graph, x)?;
    let mut grads = graph.backward(scores.sum());
    Ok(grads.take(x).unwrap_or_else(|| Tensor::zeros(real.shape())))
}

fn per_sample_sq_norms(grads: &Tensor) -> Vec<f64> {
    let b = grads.shape()[0];
    let per = grads.numel() / b.max(1);
    grads
        .data()
        .chunks(per.max(1))
        .map(|c| c.iter().map(|&g| g as f64 * g as f64).sum())
        .collect()
}

fn penalty_from_gradients(grads: &Tensor, gamma: f32) -> f32 {
    let norms = per_sample_sq_norms(grads);
    (gamma as f64 / 2.0 * norms.iter().sum::<f64>() / norms.len() as f64) as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub resolution: usize,
    pub channels: usize,
    pub stages: Vec<usize>,
    pub branches: usize,
    /// Whether branch 0 belongs to the source domain.
    pub normal_as_target: bool,
}

impl DiscriminatorArch {
    pub fn from_config(cfg: &DiscriminatorConfig, resolution: usize, channels: usize, num_domains: usize) -> Self {
        let branches = if cfg.normal_as_target { num_domains } else { num_domains.saturating_sub(1) };
        Self {
            resolution,
            channels,
            stages: cfg.channels.clone(),
            branches,
            normal_as_target: cfg.normal_as_target,
        }
    }

    /// Branch index of a domain label.
    pub fn branch_of(&self, label: DomainLabel) -> Result<usize> {
        let b = if self.normal_as_target {
            Some(label.0)
        } else {
            label.0.checked_sub(1)
        };
        b.filter(|&b| b < self.branches)
            .ok_or_else(|| Error::Data(format!("domain {label} has no discriminator branch")))
    }
}

/// Singular-vector estimates of one normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub params: ParamStore,
    trunk: Vec<Conv>,
    heads: Vec<Conv>,
    /// One entry per trunk layer, then one per head.
    pub spectral: Vec<SpectralState>,
}

impl Discriminator {
    pub fn new(arch: DiscriminatorArch, seed: u64) -> Self {
        let mut rng = child_rng(seed, &[stream::DISCRIMINATOR_INIT]);
        let mut p = ParamStore::new();
        let mut trunk = Vec::new();
        let mut cin = arch.channels;
        for (i, &cout) in arch.stages.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            trunk.push(Conv::new(&mut p, &format!("trunk.{i}"), cin, cout, 3, stride, true, &mut rng));
            cin = cout;
        }
        let heads: Vec<Conv> = (0..arch.branches)
            .map(|b| Conv::new(&mut p, &format!("head.{b}"), cin, 1, 1, 1, true, &mut rng))
            .collect();
        let spectral = trunk
            .iter()
            .chain(&heads)
            .map(|c| {
                let w = p.get(c.weight);
                let rows = w.shape()[0];
                let cols = w.numel() / rows;
                let mut u = random_unit(rows, &mut rng);
                let (v, _) = power_iteration(w, &mut u, 1);
                debug_assert_eq!(v.len(), cols);
                SpectralState { u, v }
            })
            .collect();
        Self {
            arch,
            params: p,
            trunk,
            heads,
            spectral,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Conv> {
        self.trunk.iter().chain(&self.heads)
    }

    pub fn head_weight(&self, branch: usize) -> ParamId {
        self.heads[branch].weight
    }

    pub fn head_bias(&self, branch: usize) -> Option<ParamId> {
        self.heads[branch].bias
    }

    /// One power iteration per normalized weight, warm-started from the
    /// stored estimates.
    pub fn update_spectral(&mut self, n_iter: usize) {
        let weights: Vec<ParamId> = self.layers().map(|c| c.weight).collect();
        for (state, id) in self.spectral.iter_mut().zip(weights) {
            let (v, _) = power_iteration(self.params.get(id), &mut state.u, n_iter);
            state.v = v;
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        match shape {
            [_, c, h, w] if *c == a.channels && *h == a.resolution && *w == a.resolution => Ok(()),
            _ => Err(Error::Shape(format!(
                "discriminator trained for [B, {}, {r}, {r}] inputs, got {shape:?}",
                a.channels,
                r = a.resolution
            ))),
        }
    }

    /// Every branch score, `[B, n]`.
    pub fn all_scores<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.check_image(&x.shape())?;
        let mut h = x;
        for (conv, sn) in self.trunk.iter().zip(&self.spectral) {
            let w = p.var(conv.weight).spectral_scale(&sn.u, &sn.v, SN_EPS);
            h = conv.forward_with(p, w, h).leaky_relu(LEAKY_SLOPE);
        }
        let offset = self.trunk.len();
        let heads: Vec<Var<'g>> = self
            .heads
            .iter()
            .enumerate()
            .map(|(b, conv)| {
                let sn = &self.spectral[offset + b];
                let w = p.var(conv.weight).spectral_scale(&sn.u, &sn.v, SN_EPS);
                conv.forward_with(p, w, h).spatial_mean()
            })
            .collect();
        Ok(if heads.len() == 1 { heads[0] } else { Var::concat_cols(&heads) })
    }

    /// Score of branch `branches[i]` for image `i`, `[B]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, branches: &[usize]) -> Result<Var<'g>> {
        let b = x.shape()[0];
        if branches.len() != b {
            return Err(Error::Shape(format!("{} branch indices for {b} images", branches.len())));
        }
        let n = self.arch.branches;
        if let Some(&bad) = branches.iter().find(|&&k| k >= n) {
            return Err(Error::Data(format!("branch {bad} out of range for {n} branches")));
        }
        let scores = self.all_scores(p, x)?;
        Ok(scores.gather(branches.iter().enumerate().map(|(i, &k)| i * n + k).collect(), &[b]))
    }

    /// Inference-mode scores `D_k(x_i)`.
    pub fn discriminate(&self, images: &Tensor, branches: &[usize]) -> Result<Vec<f32>> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let s = self.forward(&p, graph.constant(images.clone()), branches)?;
        let out = s.value().data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("discriminator score is not finite".into()));
        }
        Ok(out)
    }

    fn param_grads_at(&self, images: Tensor, branches: &[usize]) -> Result<Vec<Option<Tensor>>> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, true);
        let s = self.forward(&p, graph.constant(images), branches)?;
        let mut grads: Gradients = graph.backward(s.sum());
        Ok(p.grads(&mut grads))
    }

    /// R1 penalty on `real` and its parameter gradient.
    ///
    /// The parameter gradient `(γ/B) Σᵢ ∂²D/∂θ∂x · gᵢ` (with `gᵢ = ∇ₓD(xᵢ)`)
    /// is a Hessian-vector product, evaluated as the central difference of
    /// `∇_θ Σ D` at `x ± εg`. `ε` is `fd_step / maxᵢ‖gᵢ‖`, so the largest
    /// input perturbation has norm `fd_step`.
    pub fn r1(
        &self,
        real: &Tensor,
        branches: &[usize],
        gamma: f32,
        fd_step: f32,
    ) -> Result<(f32, Vec<Option<Tensor>>)> {
        let g = input_gradients(
            &|graph: &Graph, x: Var<'_>| self.forward(&self.params.bind(graph, false), x, branches),
            real,
        )?;
        let penalty = penalty_from_gradients(&g, gamma);
        let max_norm = per_sample_sq_norms(&g).into_iter().fold(0.0f64, f64::max).sqrt();
        if max_norm == 0.0 || gamma == 0.0 {
            return Ok((penalty, vec![None; self.params.len()]));
        }
        let eps = fd_step / max_norm as f32;
        let plus = real.zip_map(&g, |x, d| x + eps * d);
        let minus = real.zip_map(&g, |x, d| x - eps * d);
        let gp = self.param_grads_at(plus, branches)?;
        let gm = self.param_grads_at(minus, branches)?;
        let b = real.shape()[0] as f32;
        let coeff = gamma / (b * 2.0 * eps);
        let grads = gp
            .into_iter()
            .zip(gm)
            .map(|(a, m)| match (a, m) {
                (Some(a), Some(m)) => Some(a.zip_map(&m, |x, y| (x - y) * coeff)),
                _ => None,
            })
            .collect();
        Ok((penalty, grads))
    }

    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.stage = STAGE_DISCRIMINATOR.to_string();
        meta.resolution = self.arch.resolution;
        meta.extra = serde_json::to_value(&self.arch).expect("serializable");
        let mut ck = Checkpoint::new(meta);
        ck.push_params("", &self.params);
        self.push_spectral(&mut ck);
        ck
    }

    pub fn push_spectral(&self, ck: &mut Checkpoint) {
        for (i, s) in self.spectral.iter().enumerate() {
            ck.push(format!("sn.{i}.u"), Tensor::new(&[s.u.len()], s.u.clone()));
            ck.push(format!("sn.{i}.v"), Tensor::new(&[s.v.len()], s.v.clone()));
        }
    }

    pub fn load_spectral(&mut self, ck: &Checkpoint) -> Result<()> {
        for (i, s) in self.spectral.iter_mut().enumerate() {
            let u = ck.get(&format!("sn.{i}.u"))?;
            let v = ck.get(&format!("sn.{i}.v"))?;
            if u.numel() != s.u.len() || v.numel() != s.v.len() {
                return Err(Error::Checkpoint(format!("spectral state {i} has the wrong size")));
            }
            s.u = u.data().to_vec();
            s.v = v.data().to_vec();
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(STAGE_DISCRIMINATOR)?;
        let arch: DiscriminatorArch = serde_json::from_value(ck.meta.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("bad discriminator architecture: {e}")))?;
        let mut d = Self::new(arch, 0);
        ck.load_params("", &mut d.params)?;
        d.load_spectral(ck)?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn top_singular(t: &Tensor) -> f64 {
        let rows = t.shape()[0];
        let cols = t.numel() / rows;
        DMatrix::from_row_slice(rows, cols, &t.data().iter().map(|&v| v as f64).collect::<Vec<_>>())
            .singular_values()
            .max()
    }

    fn small(branches: usize) -> Discriminator {
        let cfg = DiscriminatorConfig {
            channels: vec![3, 4, 5],
            ..Default::default()
        };
        Discriminator::new(DiscriminatorArch::from_config(&cfg, 8, 1, branches + 1), 5)
    }

    #[test]
    fn diag_and_orthonormal() {
        let w = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]);
        let mut u = vec![0.6, 0.8];
        let (n, sigma) = spectral_normalize(&w, &mut u, 20).unwrap();
        assert!((sigma - 3.0).abs() < 1e-4);
        assert!((top_singular(&n) - 1.0).abs() < 1e-4);

        let (s, c) = (0.6f32, 0.8f32);
        let q = Tensor::new(&[2, 2], vec![c, -s, s, c]);
        let mut u = vec![1.0, 0.0];
        let (n, _) = spectral_normalize(&q, &mut u, 5).unwrap();
        assert!(n.zip_map(&q, |a, b| (a - b).abs()).max_abs() < 1e-4);
    }

    #[test]
    fn zero_weight_stays_zero() {
        let mut u = vec![1.0, 0.0, 0.0];
        let (n, _) = spectral_normalize(&Tensor::zeros(&[3, 4]), &mut u, 3).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        assert!(spectral_normalize(&Tensor::zeros(&[3, 4]), &mut u, 0).is_err());
    }

    #[test]
    fn random_square_matches_svd() {
        // Fifty iterations from a cold start are not always enough for
        // Gaussian matrices, whose top two singular values can be close.
        for seed in 0..40 {
            let mut rng = child_rng(seed, &[]);
            let w = Tensor::from_fn(&[64, 64], |_| StandardNormal.sample(&mut rng));
            let mut u = random_unit(64, &mut rng);
            let (_, sigma) = spectral_normalize(&w, &mut u, 500).unwrap();
            let exact = top_singular(&w);
            assert!(((sigma as f64 - exact) / exact).abs() < 1e-3, "seed {seed}: {sigma} vs {exact}");
        }
    }

    #[test]
    fn branch_selection_and_isolation() {
        let d = small(5);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f32 * 0.37).sin());
        let graph = Graph::new();
        let p = d.params.bind(&graph, false);
        let all = d.all_scores(&p, graph.constant(x.clone())).unwrap();
        assert_eq!(all.shape(), vec![2, 5]);
        let picked = d.discriminate(&x, &[3, 3]).unwrap();
        assert_eq!(picked, vec![all.value().data()[3], all.value().data()[8]]);
        assert!(d.discriminate(&x, &[5, 0]).is_err());

        let graph = Graph::new();
        let p = d.params.bind(&graph, true);
        let s = d.forward(&p, graph.constant(x), &[2, 2]).unwrap();
        let mut grads = graph.backward(s.sum());
        let grads = p.grads(&mut grads);
        for b in 0..5 {
            let gw = grads[d.head_weight(b).index()].as_ref();
            if b == 2 {
                assert!(gw.unwrap().max_abs() > 0.0);
            } else {
                assert!(gw.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
            }
        }
    }

    #[test]
    fn r1_of_constant_scorer_is_zero() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.1);
        let penalty = r1_penalty(
            |g: &Graph, x: Var<'_>| {
                let zero = g.constant(Tensor::zeros(&[4, 1]));
                Ok(x.matmul(&zero).add_scalar(2.0).reshape(&[3]))
            },
            &x,
            1.0,
        );
        assert_eq!(penalty.unwrap(), 0.0);
    }

    #[test]
    fn spectral_state_round_trips() {
        let mut d = small(2);
        d.update_spectral(3);
        let ck = Checkpoint::from_bytes(&d.to_checkpoint(CheckpointMeta::default()).to_bytes()).unwrap();
        let back = Discriminator::from_checkpoint(&ck).unwrap();
        assert_eq!(back.spectral, d.spectral);
        let x = Tensor::full(&[1, 1, 8, 8], 0.3);
        assert_eq!(back.discriminate(&x, &[1]).unwrap(), d.discriminate(&x, &[1]).unwrap());
    }

    #[test]
    fn branch_mapping() {
        let cfg = DiscriminatorConfig::default();
        let a = DiscriminatorArch::from_config(&cfg, 8, 1, 4);
        assert_eq!(a.branches, 3);
        assert_eq!(a.branch_of(DomainLabel(2)).unwrap(), 1);
        assert!(a.branch_of(DomainLabel(0)).is_err());
        let b = DiscriminatorArch::from_config(
            &DiscriminatorConfig {
                normal_as_target: true,
                ..cfg
            },
            8,
            1,
            4,
        );
        assert_eq!(b.branches, 4);
        assert_eq!(b.branch_of(DomainLabel(0)).unwrap(), 0);
    }
}
