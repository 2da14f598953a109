//! FID, diversity and the reference-guided synthesis protocol.

mod features;
mod fid;
mod synthesis;

pub use features::{
    diversity_score, extract, train_toy_classifier, ClassifierArch, ClassifierConfig, FeatureExtractor,
    PixelFeatures, ToyClassifier,
};
pub use fid::{fid, frechet_distance, moments, sqrt_product, sqrt_psd};
pub use synthesis::{assign_references, reference_grid, reference_synthesis, DomainSynthesis};

use serde::{Deserialize, Serialize};

use crate::data::DomainImages;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    /// FID between generated images and real images of the domain.
    pub fid: f64,
    /// FID between the untranslated normal inputs and the same real images.
    pub baseline_fid: f64,
    pub diversity: f64,
    pub generated: usize,
    pub real: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractor: String,
    pub k: usize,
    pub sources: usize,
    pub domains: Vec<DomainMetrics>,
    /// Means over domains.
    pub fid: f64,
    pub diversity: f64,
    pub generated: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// One-row CSV with an FID (lower is better) and diversity (higher is
    /// better) column for `dataset`.
    pub fn table_csv(&self, model: &str, dataset: &str) -> String {
        format!(
            "model,{dataset}_fid,{dataset}_diversity,extractor\n{model},{:.4},{:.5},{}\n",
            self.fid, self.diversity, self.extractor
        )
    }
}

/// Scores a synthesis run. `real[l]` holds the real images of label `l`
/// (index 0 are the normals used as the baseline).
pub fn evaluate_synthesis(
    synth: &[DomainSynthesis],
    normals: &DomainImages,
    real: &[DomainImages],
    extractor: &dyn FeatureExtractor,
) -> Result<MetricReport> {
    if synth.is_empty() {
        return Err(Error::Data("nothing was generated".into()));
    }
    let normal_feats = extract(extractor, &normals.images, 64)?;
    let mut domains = Vec::new();
    for s in synth {
        let target = real
            .get(s.label.0)
            .ok_or_else(|| Error::Data(format!("no real images for domain {}", s.name)))?;
        let real_feats = extract(extractor, &target.images, 64)?;
        let fake_feats = extract(extractor, &s.images(), 64)?;
        let k = s.outputs.first().map_or(0, |t| t.shape()[0]);
        let diversity = if k >= 2 { diversity_score(&s.outputs, extractor)? } else { 0.0 };
        domains.push(DomainMetrics {
            domain: s.name.clone(),
            fid: fid(&real_feats, &fake_feats)?,
            baseline_fid: fid(&real_feats, &normal_feats)?,
            diversity,
            generated: s.count(),
            real: target.len(),
        });
    }
    let n = domains.len() as f64;
    Ok(MetricReport {
        extractor: extractor.id(),
        k: synth[0].outputs.first().map_or(0, |t| t.shape()[0]),
        sources: normals.len(),
        fid: domains.iter().map(|d| d.fid).sum::<f64>() / n,
        diversity: domains.iter().map(|d| d.diversity).sum::<f64>() / n,
        generated: domains.iter().map(|d| d.generated).sum(),
        domains,
    })
}
