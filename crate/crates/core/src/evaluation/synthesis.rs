//! Reference-guided synthesis: every normal image rendered in every target
//! domain with `k` sampled references, plus grid montages.

use std::path::Path;

use octmorph_autograd::Tensor;
use rand::seq::index::sample;
use rand::Rng;

use crate::data::{save_png, DomainImages, DomainLabel};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::rng::{child_rng, stream};
use crate::style::StyleEncoder;

/// Outputs for one target domain.
#[derive(Clone, Debug)]
pub struct DomainSynthesis {
    pub label: DomainLabel,
    pub name: String,
    /// Reference indices used for each source, `k` per source.
    pub assignments: Vec<Vec<usize>>,
    /// One `[k, C, H, W]` tensor per source.
    pub outputs: Vec<Tensor>,
}

impl DomainSynthesis {
    pub fn count(&self) -> usize {
        self.outputs.iter().map(|t| t.shape()[0]).sum()
    }

    /// All generated images as `[C, H, W]` tensors.
    pub fn images(&self) -> Vec<Tensor> {
        self.outputs
            .iter()
            .flat_map(|t| (0..t.shape()[0]).map(move |i| t.select_batch(i).reshape(&t.shape()[1..])))
            .collect()
    }
}

/// The `k` reference indices for `source` in domain `label`: distinct when
/// the domain has at least `k` images, otherwise drawn with replacement.
pub fn assign_references(seed: u64, label: DomainLabel, source: usize, available: usize, k: usize) -> Vec<usize> {
    let mut rng = child_rng(seed, &[stream::SYNTHESIS, label.0 as u64, source as u64]);
    if available >= k {
        sample(&mut rng, available, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..available)).collect()
    }
}

fn stem(images: &DomainImages, i: usize) -> String {
    images
        .records
        .get(i)
        .and_then(|r| r.path.file_stem())
        .map_or_else(|| format!("{i:04}"), |s| s.to_string_lossy().into_owned())
}

/// Renders every source in every target domain (labels `1..`) with `k`
/// references each. `references[l]` holds the reference pool of label `l`;
/// index 0 is ignored. When `out_dir` is given the images are written to
/// `out_dir/<domain>/<source_id>_<ref_id>.png`.
#[allow(clippy::too_many_arguments)]
pub fn reference_synthesis(
    generator: &Generator,
    encoder: &StyleEncoder,
    normals: &DomainImages,
    references: &[DomainImages],
    domains: &[String],
    k: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<DomainSynthesis>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if references.len() != domains.len() {
        return Err(Error::Data(format!(
            "{} reference pools for {} domains",
            references.len(),
            domains.len()
        )));
    }
    let mut result = Vec::new();
    for (l, (pool, name)) in references.iter().zip(domains).enumerate().skip(1) {
        let label = DomainLabel(l);
        if pool.is_empty() {
            return Err(Error::Data(format!("domain {name} has no reference images")));
        }
        if pool.len() < k {
            log::warn!("domain {name} has {} references for k = {k}: sampling with replacement", pool.len());
        }
        let codes = encoder.encode_images(&pool.images, 64)?;
        let dir = out_dir.map(|d| d.join(name));
        if let Some(dir) = &dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut synth = DomainSynthesis {
            label,
            name: name.clone(),
            assignments: Vec::new(),
            outputs: Vec::new(),
        };
        for (si, src) in normals.images.iter().enumerate() {
            let refs = assign_references(seed, label, si, pool.len(), k);
            let x = Tensor::stack(&vec![src.clone(); k]);
            let s = Tensor::stack(&refs.iter().map(|&r| Tensor::new(&[codes[r].dim()], codes[r].vector.clone())).collect::<Vec<_>>());
            let out = generator.generate(&x, &s)?;
            if let Some(dir) = &dir {
                let src_id = stem(normals, si);
                for (j, &r) in refs.iter().enumerate() {
                    let mut ref_id = stem(pool, r);
                    if refs[..j].contains(&r) {
                        ref_id = format!("{ref_id}-{j}");
                    }
                    save_png(&out.select_batch(j), &dir.join(format!("{src_id}_{ref_id}.png")))?;
                }
            }
            synth.assignments.push(refs);
            synth.outputs.push(out);
        }
        result.push(synth);
    }
    Ok(result)
}

/// Grid montage: the first row holds the references, the first column the
/// sources, and cell `(i, j)` the translation of source `i` with reference
/// `j`. The corner cell is black. Returns a `[C, (S+1)H, (R+1)W]` image.
pub fn reference_grid(
    generator: &Generator,
    encoder: &StyleEncoder,
    sources: &[Tensor],
    references: &[Tensor],
) -> Result<Tensor> {
    if sources.is_empty() || references.is_empty() {
        return Err(Error::Data("grid needs at least one source and one reference".into()));
    }
    let shape = sources[0].shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (rows, cols) = (sources.len() + 1, references.len() + 1);
    let mut grid = Tensor::full(&[c, rows * h, cols * w], -1.0);
    let mut put = |img: &Tensor, r: usize, col: usize| {
        for ch in 0..c {
            for y in 0..h {
                let src = &img.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                let off = (ch * rows * h + r * h + y) * cols * w + col * w;
                grid.data_mut()[off..off + w].copy_from_slice(src);
            }
        }
    };
    for (j, r) in references.iter().enumerate() {
        put(r, 0, j + 1);
    }
    let s = encoder.encode_tensor(&Tensor::stack(references))?;
    for (i, src) in sources.iter().enumerate() {
        put(src, i + 1, 0);
        let x = Tensor::stack(&vec![src.clone(); references.len()]);
        let out = generator.generate(&x, &s)?;
        for j in 0..references.len() {
            put(&out.select_batch(j), i + 1, j + 1);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_are_deterministic_and_distinct() {
        let a = assign_references(3, DomainLabel(2), 7, 40, 10);
        assert_eq!(a, assign_references(3, DomainLabel(2), 7, 40, 10));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 10);
        let short = assign_references(3, DomainLabel(2), 7, 4, 10);
        assert_eq!(short.len(), 10);
        assert!(short.iter().all(|&r| r < 4));
    }
}
