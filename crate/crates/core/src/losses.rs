//! Adversarial, cycle, style and total losses.
//!
//! The graph versions take [`Var`]s so they can be differentiated; the
//! `*_values` versions evaluate the same formulas on plain slices.

use octmorph_autograd::Var;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f32,
    pub lambda_sty: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 1.0,
            lambda_sty: 1.0,
        }
    }
}

/// Every component of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adv_d: f32,
    pub adv_g: f32,
    pub cyc: f32,
    pub sty: f32,
    pub r1: f32,
    pub total: f32,
}

pub const CSV_HEADER: &str = "step,adv_d,adv_g,cyc,sty,r1,total";

impl LossReport {
    /// Builds a report whose `total` is composed from its own generator-side
    /// components.
    pub fn compose(
        step: u64,
        adv_d: f32,
        adv_g: f32,
        cyc: f32,
        sty: f32,
        r1: f32,
        w: &LossWeights,
    ) -> Result<Self> {
        ensure_finite("adv_d", adv_d)?;
        ensure_finite("r1", r1)?;
        let total = total_loss(adv_g, cyc, sty, w)?;
        Ok(Self {
            step,
            adv_d,
            adv_g,
            cyc,
            sty,
            r1,
            total,
        })
    }

    /// One CSV row; floats use the shortest representation that round-trips.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.adv_d, self.adv_g, self.cyc, self.sty, self.r1, self.total
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed loss row '{line}'"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f32>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            adv_d: num(1)?,
            adv_g: num(2)?,
            cyc: num(3)?,
            sty: num(4)?,
            r1: num(5)?,
            total: num(6)?,
        })
    }
}

fn same_shape(name: &str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{name}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

/// Discriminator hinge on paired scores: `mean(max(0, 1 + fake − real))`.
/// The caller scores a detached fake image, so no gradient reaches G.
pub fn adv_loss_d<'g>(d_fake: Var<'g>, d_real: Var<'g>) -> Result<Var<'g>> {
    same_shape("adv_loss_d", &d_fake, &d_real)?;
    Ok((d_fake - d_real).add_scalar(1.0).relu().mean())
}

/// Generator hinge on paired scores: `mean(max(0, 1 + real − fake))`, with
/// the real scores treated as constants.
pub fn adv_loss_g<'g>(d_fake: Var<'g>, d_real: Var<'g>) -> Result<Var<'g>> {
    same_shape("adv_loss_g", &d_fake, &d_real)?;
    Ok((d_real.detach() - d_fake).add_scalar(1.0).relu().mean())
}

/// Mean absolute difference between an image batch and its reconstruction.
pub fn cycle_loss<'g>(x: Var<'g>, x_rec: Var<'g>) -> Result<Var<'g>> {
    same_shape("cycle_loss", &x, &x_rec)?;
    Ok((x - x_rec).abs().mean())
}

/// Mean absolute difference between style codes and their re-encodings.
pub fn style_loss<'g>(s: Var<'g>, s_rec: Var<'g>) -> Result<Var<'g>> {
    same_shape("style_loss", &s, &s_rec)?;
    Ok((s - s_rec).abs().mean())
}

fn pairwise_mean(name: &str, a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Result<f32> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "{name}: lengths {} and {} must match and be non-empty",
            a.len(),
            b.len()
        )));
    }
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| f(x, y) as f64).sum();
    Ok((sum / a.len() as f64) as f32)
}

pub fn adv_loss_d_values(d_fake: &[f32], d_real: &[f32]) -> Result<f32> {
    pairwise_mean("adv_loss_d", d_fake, d_real, |f, r| (1.0 + (f - r)).max(0.0))
}

pub fn adv_loss_g_values(d_fake: &[f32], d_real: &[f32]) -> Result<f32> {
    pairwise_mean("adv_loss_g", d_fake, d_real, |f, r| (1.0 + (r - f)).max(0.0))
}

pub fn l1_mean_values(a: &[f32], b: &[f32]) -> Result<f32> {
    pairwise_mean("l1", a, b, |x, y| (x - y).abs())
}

/// `adv + λ_cyc·cyc + λ_sty·sty`, refusing non-finite components.
pub fn total_loss(adv: f32, cyc: f32, sty: f32, w: &LossWeights) -> Result<f32> {
    ensure_finite("adv", adv)?;
    ensure_finite("cyc", cyc)?;
    ensure_finite("sty", sty)?;
    ensure_finite("total", adv + w.lambda_cyc * cyc + w.lambda_sty * sty)
}

/// Graph counterpart of [`total_loss`].
pub fn weighted_total<'g>(adv: Var<'g>, cyc: Var<'g>, sty: Var<'g>, w: &LossWeights) -> Var<'g> {
    adv + cyc.scale(w.lambda_cyc) + sty.scale(w.lambda_sty)
}
