//! Procedural toy dataset: a "normal" domain of smooth horizontal bands and
//! target domains that each add one localized signature on top.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, DomainLabel, Record, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::rng::{child_rng, stream};

pub const SOURCE_DOMAIN: &str = "normal";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signature {
    /// A bright Gaussian blob.
    Bump,
    /// A dark elliptical gap.
    Hole,
    /// Scattered bright dots.
    Speckle,
}

impl Signature {
    const ALL: [Signature; 3] = [Signature::Bump, Signature::Hole, Signature::Speckle];

    fn name(self) -> &'static str {
        match self {
            Signature::Bump => "bump",
            Signature::Hole => "hole",
            Signature::Speckle => "speckle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_domains: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub resolution: usize,
    /// Peak brightness added by a bump, in `[0, 1]` intensity units.
    pub bump_amplitude: f32,
    /// Hole semi-major axis as a fraction of the image size.
    pub hole_radius: f32,
    /// Fraction of pixels that carry a speckle dot.
    pub speckle_density: f32,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_domains: 3,
            train_per_domain: 200,
            test_per_domain: 40,
            resolution: 64,
            bump_amplitude: 0.45,
            hole_radius: 0.14,
            speckle_density: 0.015,
            seed: 0,
        }
    }
}

impl ToySpec {
    /// `normal` followed by one name per target domain. Domains beyond the
    /// three base signatures reuse them with a numeric suffix.
    pub fn domain_names(&self) -> Vec<String> {
        let mut names = vec![SOURCE_DOMAIN.to_string()];
        for i in 0..self.n_domains {
            let sig = Signature::ALL[i % 3].name();
            names.push(if i < 3 { sig.to_string() } else { format!("{sig}{}", i / 3 + 1) });
        }
        names
    }

    fn validate(&self) -> Result<()> {
        if self.n_domains == 0 {
            return Err(Error::Config("the toy dataset needs at least one target domain".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config("toy resolution must be at least 8".into()));
        }
        if self.train_per_domain + self.test_per_domain == 0 {
            return Err(Error::Config("toy dataset would contain no images".into()));
        }
        Ok(())
    }
}

/// Renders one image. `domain` 0 is the source; `domain` i > 0 carries
/// signature `(i - 1) % 3`, slightly enlarged for every further wrap.
pub fn render(spec: &ToySpec, domain: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let r = spec.resolution;
    let rf = r as f32;
    // Content: identical draws for every domain.
    let phase = rng.random_range(0.0..2.0 * PI);
    let period = rng.random_range(0.22..0.34) * rf;
    let tilt = rng.random_range(-0.08f32..0.08);
    let noise = Normal::new(0.0f32, 0.02).expect("valid sigma");
    let mut px: Vec<f32> = (0..r * r)
        .map(|i| {
            let (x, y) = ((i % r) as f32, (i / r) as f32);
            let t = 2.0 * PI * (y + tilt * (x - rf / 2.0)) / period + phase;
            0.45 + 0.22 * t.sin() + noise.sample(rng)
        })
        .collect();

    if domain > 0 {
        let scale = 1.0 + 0.25 * ((domain - 1) / 3) as f32;
        let margin = 0.2 * rf;
        let cx = rng.random_range(margin..rf - margin);
        let cy = rng.random_range(margin..rf - margin);
        match Signature::ALL[(domain - 1) % 3] {
            Signature::Bump => {
                let sigma = rng.random_range(0.06..0.09) * rf * scale;
                for (i, v) in px.iter_mut().enumerate() {
                    let (dx, dy) = ((i % r) as f32 - cx, (i / r) as f32 - cy);
                    *v += spec.bump_amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
            }
            Signature::Hole => {
                let a = spec.hole_radius * rf * scale * rng.random_range(0.85..1.15);
                let b = a * rng.random_range(0.45..0.65);
                for (i, v) in px.iter_mut().enumerate() {
                    let (dx, dy) = ((i % r) as f32 - cx, (i / r) as f32 - cy);
                    let d = (dx / a).powi(2) + (dy / b).powi(2);
                    // Soft edge over roughly one pixel.
                    let inside = (1.0 - d).clamp(-0.25, 0.25) * 2.0 + 0.5;
                    *v *= 1.0 - 0.9 * inside;
                }
            }
            Signature::Speckle => {
                let count = ((spec.speckle_density * scale * (r * r) as f32).round() as usize).max(1);
                for _ in 0..count {
                    let sx = rng.random_range(0..r);
                    let sy = rng.random_range(0..r);
                    let amp = rng.random_range(0.35..0.55);
                    px[sy * r + sx] += amp;
                    for (nx, ny) in [(sx + 1, sy), (sx, sy + 1)] {
                        if nx < r && ny < r {
                            px[ny * r + nx] += 0.5 * amp;
                        }
                    }
                }
            }
        }
    }

    GrayImage::from_fn(r as u32, r as u32, |x, y| {
        let v = px[y as usize * r + x as usize];
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

/// Writes `out_root/<domain>/{train,test}_NNNN.png` plus a manifest sidecar
/// and returns the manifest (splits already assigned).
pub fn generate_toy(spec: &ToySpec, out_root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let domains = spec.domain_names();
    let mut records = Vec::new();
    for (label, name) in domains.iter().enumerate() {
        let dir = out_root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (split, count, tag) in [
            (Split::Train, spec.train_per_domain, 0u64),
            (Split::Test, spec.test_per_domain, 1),
        ] {
            for i in 0..count {
                let mut rng = child_rng(spec.seed, &[stream::TOY, label as u64, tag, i as u64]);
                let img = render(spec, label, &mut rng);
                let rel: PathBuf = [name.as_str(), &format!("{split}_{i:04}.png")].iter().collect();
                let path = out_root.join(&rel);
                img.save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| Error::image(&path, e))?;
                records.push(Record {
                    path: rel,
                    label: DomainLabel(label),
                    split,
                    origin: None,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        domains,
        records,
        seed: Some(spec.seed),
    };
    manifest.save(&out_root.join(MANIFEST_FILE))?;
    Ok(DatasetManifest {
        root: out_root.to_path_buf(),
        ..manifest
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToySpec {
        ToySpec {
            n_domains: 3,
            train_per_domain: 3,
            test_per_domain: 2,
            resolution: 16,
            ..Default::default()
        }
    }

    fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn counts_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy(&tiny(), dir.path()).unwrap();
        assert_eq!(m.domains, ["normal", "bump", "hole", "speckle"]);
        assert_eq!(m.records.len(), 4 * 5);
        let images = tree(dir.path()).into_iter().filter(|(n, _)| n.ends_with(".png")).count();
        assert_eq!(images, 20);
        let (loaded, report) = crate::data::load_manifest(dir.path(), None, SOURCE_DOMAIN).unwrap();
        assert_eq!(loaded.domains, m.domains);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn byte_identical_trees() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_toy(&tiny(), a.path()).unwrap();
        generate_toy(&tiny(), b.path()).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
    }

    #[test]
    fn zero_domains_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            n_domains: 0,
            ..tiny()
        };
        let err = generate_toy(&spec, dir.path()).unwrap_err();
        assert!(err.to_string().contains("at least one target domain"));
    }

    #[test]
    fn content_draws_do_not_depend_on_domain() {
        let spec = tiny();
        // Same content stream: the source image equals a target image
        // wherever the signature adds nothing.
        let a = render(&spec, 0, &mut child_rng(1, &[7]));
        let b = render(&spec, 1, &mut child_rng(1, &[7]));
        let same = a.pixels().zip(b.pixels()).filter(|(p, q)| p == q).count();
        assert!(same > a.len() / 2);
    }
}
