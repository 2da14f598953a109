//! Dataset discovery, the manifest sidecar, and seeded splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig, AugmentParams};
use crate::error::{Error, Result};
use crate::rng::{child_rng, stream};

/// Name of the sidecar index written next to (or instead of) the images.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const MANIFEST_FORMAT: &str = "octmorph-manifest/1";

/// Accepted image extensions (lowercase).
pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Class index; `0` is always the source ("normal") domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainLabel(pub usize);

impl DomainLabel {
    pub const SOURCE: DomainLabel = DomainLabel(0);

    pub fn is_source(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Discovered but not yet assigned by [`sample_split`].
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

/// Provenance of an image produced by quota augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOrigin {
    pub source: PathBuf,
    pub params: AugmentParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Relative to the manifest root unless absolute.
    pub path: PathBuf,
    pub label: DomainLabel,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<SyntheticOrigin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    root: PathBuf,
    domains: Vec<String>,
    seed: Option<u64>,
}

/// Every image of a dataset with its domain label and split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Domain names in label order; index 0 is the source domain.
    pub domains: Vec<String>,
    pub records: Vec<Record>,
    /// Seed of the split that produced this manifest, if any.
    pub seed: Option<u64>,
}

/// Files that were found but skipped during discovery.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub skipped: Vec<(PathBuf, String)>,
}

impl DatasetManifest {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Number of translation targets (every domain except the source).
    pub fn num_targets(&self) -> usize {
        self.domains.len().saturating_sub(1)
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn label_of(&self, domain: &str) -> Option<DomainLabel> {
        self.domains.iter().position(|d| d == domain).map(DomainLabel)
    }

    pub fn records_in(&self, label: DomainLabel, split: Split) -> impl Iterator<Item = &Record> {
        self.records
            .iter()
            .filter(move |r| r.label == label && r.split == split)
    }

    pub fn count(&self, label: DomainLabel, split: Split) -> usize {
        self.records_in(label, split).count()
    }

    /// Checks the structural invariants: labels in range, no path in both
    /// splits.
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Data("manifest has no domains".into()));
        }
        let mut seen: BTreeMap<&Path, Split> = BTreeMap::new();
        for r in &self.records {
            if r.label.0 >= self.domains.len() {
                return Err(Error::Data(format!(
                    "record {} has label {} but only {} domains exist",
                    r.path.display(),
                    r.label,
                    self.domains.len()
                )));
            }
            if let Some(prev) = seen.insert(&r.path, r.split) {
                if prev != r.split {
                    return Err(Error::Data(format!(
                        "{} appears in both train and test",
                        r.path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Renders the line-delimited sidecar: one JSON header line with domain
    /// order and seed, then one JSON line per record.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            root: self.root.clone(),
            domains: self.domains.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Data("empty manifest file".into()))?,
        )
        .map_err(|e| Error::Data(format!("bad manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!("unknown manifest format '{}'", header.format)));
        }
        let records = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Data(format!("bad manifest record {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<Record>>>()?;
        let m = Self {
            root: header.root,
            domains: header.domains,
            records,
            seed: header.seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Reads a sidecar. A relative root inside the file is taken relative to
    /// the sidecar's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_jsonl(&text)?;
        if m.root.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            m.root = base.join(&m.root);
        }
        Ok(m)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scans `root/<domain>/<image>` into a manifest of unassigned records.
///
/// Domains are ordered lexicographically with `source_domain` moved to the
/// front, unless `domain_order` is given, in which case its first entry is
/// the source domain and every listed domain must exist.
pub fn load_manifest(
    root: &Path,
    domain_order: Option<&[String]>,
    source_domain: &str,
) -> Result<(DatasetManifest, LoadReport)> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
    }
    let mut found: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::Data(format!(
            "no domain directories under {}",
            root.display()
        )));
    }

    let domains: Vec<String> = match domain_order {
        Some(order) => {
            if order.is_empty() {
                return Err(Error::Data("empty domain order".into()));
            }
            for d in order {
                if !found.contains(d) {
                    return Err(Error::Data(format!("domain '{d}' has no directory")));
                }
            }
            order.to_vec()
        }
        None => {
            let pos = found.iter().position(|d| d == source_domain).ok_or_else(|| {
                Error::Data(format!(
                    "source domain '{source_domain}' not found among {found:?}"
                ))
            })?;
            let src = found.remove(pos);
            std::iter::once(src).chain(found).collect()
        }
    };

    let mut report = LoadReport::default();
    let mut records = Vec::new();
    for (label, domain) in domains.iter().enumerate() {
        let dir = root.join(domain);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        let mut count = 0;
        for file in files {
            if let Err(e) = image::image_dimensions(&file) {
                warn!("skipping unreadable image {}: {e}", file.display());
                report.skipped.push((file, e.to_string()));
                continue;
            }
            let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
            records.push(Record {
                path: rel,
                label: DomainLabel(label),
                split: Split::Unassigned,
                origin: None,
            });
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data(format!("domain '{domain}' contains no readable images")));
        }
    }

    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            domains,
            records,
            seed: None,
        },
        report,
    ))
}

/// Settings for topping up small domains with augmented copies.
#[derive(Clone, Debug)]
pub struct QuotaOptions {
    pub augment: AugmentConfig,
    /// Directory that receives the synthetic images (`<out>/<domain>/...`).
    pub out_dir: PathBuf,
    /// Also augment the source domain when it is short. Off by default: the
    /// source domain is only ever subsampled.
    pub augment_source: bool,
}

/// Draws exactly `per_class_train` / `per_class_test` records per domain by a
/// seeded shuffle. Records that are not drawn are dropped.
pub fn sample_split(
    manifest: &DatasetManifest,
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    sample_split_with_quota(manifest, per_class_train, per_class_test, seed, None)
}

/// [`sample_split`] that, when `quota` is given, fills short domains with
/// augmented images instead of failing. Originals are first partitioned
/// between test and train so no source image feeds both splits; each split is
/// then filled round-robin over its originals with fresh augmentation draws.
pub fn sample_split_with_quota(
    manifest: &DatasetManifest,
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
    quota: Option<&QuotaOptions>,
) -> Result<DatasetManifest> {
    let need = per_class_train + per_class_test;
    let mut deficits = Vec::new();
    for (label, name) in manifest.domains.iter().enumerate() {
        let have = manifest
            .records
            .iter()
            .filter(|r| r.label.0 == label && r.origin.is_none())
            .count();
        let can_augment = quota.is_some_and(|q| label != 0 || q.augment_source);
        if have < need && !(can_augment && have >= 2) {
            deficits.push(format!("{name}: have {have}, need {need}"));
        }
    }
    if !deficits.is_empty() {
        return Err(Error::Data(format!(
            "insufficient images per domain ({})",
            deficits.join("; ")
        )));
    }

    let mut records = Vec::new();
    for (label, name) in manifest.domains.iter().enumerate() {
        let mut pool: Vec<&Record> = manifest
            .records
            .iter()
            .filter(|r| r.label.0 == label && r.origin.is_none())
            .collect();
        pool.sort_by(|a, b| a.path.cmp(&b.path));
        let mut rng = child_rng(seed, &[stream::SPLIT, label as u64]);
        pool.shuffle(&mut rng);

        if pool.len() >= need {
            for (i, r) in pool.iter().take(need).enumerate() {
                records.push(Record {
                    split: if i < per_class_train { Split::Train } else { Split::Test },
                    ..(*r).clone()
                });
            }
            continue;
        }

        let q = quota.expect("deficit check guarantees quota mode here");
        let n_test_src = ((pool.len() * per_class_test) as f64 / need as f64).round() as usize;
        let n_test_src = n_test_src.clamp(usize::from(per_class_test > 0), pool.len() - 1);
        let (test_src, train_src) = pool.split_at(n_test_src);
        for (split, sources, count) in [
            (Split::Train, train_src, per_class_train),
            (Split::Test, test_src, per_class_test),
        ] {
            fill_with_augmentation(
                manifest, name, label, split, sources, count, seed, q, &mut records,
            )?;
        }
    }

    let out = DatasetManifest {
        root: manifest.root.clone(),
        domains: manifest.domains.clone(),
        records,
        seed: Some(seed),
    };
    out.validate()?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn fill_with_augmentation(
    manifest: &DatasetManifest,
    domain: &str,
    label: usize,
    split: Split,
    sources: &[&Record],
    count: usize,
    seed: u64,
    quota: &QuotaOptions,
    records: &mut Vec<Record>,
) -> Result<()> {
    // Originals first, then augmented copies cycling over them.
    for r in sources.iter().take(count) {
        records.push(Record {
            split,
            ..(*r).clone()
        });
    }
    let split_tag = match split {
        Split::Train => "train",
        _ => "test",
    };
    let out_dir = quota.out_dir.join(domain);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    for i in sources.len()..count {
        let src = sources[i % sources.len()];
        let src_path = manifest.resolve(src);
        let img = image::open(&src_path).map_err(|e| Error::image(&src_path, e))?;
        let mut rng = child_rng(
            seed ^ quota.augment.seed,
            &[stream::AUGMENT, label as u64, split as u64, i as u64],
        );
        let (aug, params) = match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (o, p) = augment(&g, &quota.augment, &mut rng)?;
                (image::DynamicImage::ImageLuma8(o), p)
            }
            other => {
                let (o, p) = augment(&other.to_rgb8(), &quota.augment, &mut rng)?;
                (image::DynamicImage::ImageRgb8(o), p)
            }
        };
        let file = out_dir.join(format!("{split_tag}_aug_{i:05}.png"));
        aug.save(&file).map_err(|e| Error::image(&file, e))?;
        let path = file
            .strip_prefix(&manifest.root)
            .map(Path::to_path_buf)
            .unwrap_or(file);
        records.push(Record {
            path,
            label: DomainLabel(label),
            split,
            origin: Some(SyntheticOrigin {
                source: src.path.clone(),
                params,
            }),
        });
    }
    Ok(())
}
