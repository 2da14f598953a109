//! Easy-positive / hard-negative triplet mining and the triplet objectives.

use octmorph_autograd::{Tensor, Var};

use crate::config::TripletLossKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TripletIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn cosine_table(embeddings: &Tensor) -> Vec<f64> {
    let (b, d) = embeddings.dims2();
    let e = embeddings.data();
    let norms: Vec<f64> = (0..b)
        .map(|i| {
            e[i * d..(i + 1) * d]
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                .sqrt()
                .max(1e-300)
        })
        .collect();
    let mut sim = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let dot: f64 = e[i * d..(i + 1) * d]
                .iter()
                .zip(&e[j * d..(j + 1) * d])
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            let s = dot / (norms[i] * norms[j]);
            sim[i * b + j] = s;
            sim[j * b + i] = s;
        }
    }
    sim
}

/// For every anchor with a same-class partner: the most similar same-class
/// sample (easy positive) and the most similar other-class sample (hard
/// negative). Ties go to the lowest index.
pub fn mine_ephn(embeddings: &Tensor, labels: &[usize]) -> Result<Vec<TripletIndices>> {
    if embeddings.ndim() != 2 || embeddings.dims2().0 != labels.len() {
        return Err(Error::Shape(format!(
            "mine_ephn: embeddings {:?} do not match {} labels",
            embeddings.shape(),
            labels.len()
        )));
    }
    let b = labels.len();
    let sim = cosine_table(embeddings);
    let mut out = Vec::new();
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let s = sim[a * b + j];
            let slot = if labels[j] == labels[a] { &mut pos } else { &mut neg };
            if slot.is_none_or(|best| s > sim[a * b + best]) {
                *slot = Some(j);
            }
        }
        if let (Some(positive), Some(negative)) = (pos, neg) {
            out.push(TripletIndices {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    if out.is_empty() && b > 0 {
        log::warn!("mine_ephn: no valid triplet in a batch of {b}");
    }
    Ok(out)
}

/// `−log(exp(a·p/τ) / (exp(a·p/τ) + exp(a·n/τ)))`, i.e. `softplus((a·n − a·p)/τ)`.
pub fn triplet_loss(ap: f64, an: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let z = (an - ap) / temperature;
    // Stable softplus.
    Ok(z.max(0.0) + (-z.abs()).exp().ln_1p())
}

/// `max(0, m − a·p + a·n)`.
pub fn triplet_hinge_loss(ap: f64, an: f64, margin: f64) -> f64 {
    (margin - ap + an).max(0.0)
}

/// Mean triplet objective over mined triplets of a `[B, d]` unit-norm
/// embedding var.
pub fn batch_triplet_loss<'g>(
    embeddings: Var<'g>,
    triplets: &[TripletIndices],
    kind: TripletLossKind,
    temperature: f32,
    margin: f32,
) -> Result<Var<'g>> {
    if triplets.is_empty() {
        return Err(Error::Data("no triplets to score".into()));
    }
    if kind == TripletLossKind::Softmax && !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let b = embeddings.shape()[0];
    let sim = embeddings.matmul(&embeddings.transpose());
    let t = triplets.len();
    let ap = sim.gather(triplets.iter().map(|x| x.anchor * b + x.positive).collect(), &[t]);
    let an = sim.gather(triplets.iter().map(|x| x.anchor * b + x.negative).collect(), &[t]);
    Ok(match kind {
        TripletLossKind::Softmax => (an - ap).scale(1.0 / temperature).softplus().mean(),
        TripletLossKind::Hinge => (an - ap).add_scalar(margin).relu().mean(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use octmorph_autograd::Graph;
    use proptest::prelude::*;

    #[test]
    fn example_batch() {
        let e = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.9, 0.436, 0.0, 1.0, -1.0, 0.0]);
        let t = mine_ephn(&e, &[0, 0, 1, 1]).unwrap();
        assert_eq!(
            t[0],
            TripletIndices {
                anchor: 0,
                positive: 1,
                negative: 2
            }
        );
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn single_class_gives_nothing() {
        let e = Tensor::from_fn(&[5, 3], |i| i as f32);
        assert!(mine_ephn(&e, &[2; 5]).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let e = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let t = mine_ephn(&e, &[0, 0, 0, 1]).unwrap();
        assert_eq!((t[0].positive, t[0].negative), (1, 3));
    }

    #[test]
    fn loss_examples() {
        assert!((triplet_loss(0.3, 0.3, 0.1).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((triplet_loss(1.0, -1.0, 1.0).unwrap() - 0.126_928_011).abs() < 1e-8);
        assert!(triplet_loss(1.0, 0.0, 0.0).is_err());
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let l = triplet_loss(-1.0 + k as f64 * 0.04, 0.2, 0.1).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert_eq!(triplet_hinge_loss(0.9, 0.1, 0.2), 0.0);
    }

    #[test]
    fn batch_loss_matches_scalar_form() {
        let e = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0, -0.8, 0.6]);
        let labels = [0, 0, 1, 1];
        let t = mine_ephn(&e, &labels).unwrap();
        let g = Graph::new();
        let v = g.constant(e.clone());
        let got = batch_triplet_loss(v, &t, TripletLossKind::Softmax, 0.1, 0.0).unwrap().item() as f64;
        let dot = |i: usize, j: usize| (0..2).map(|k| (e.data()[i * 2 + k] * e.data()[j * 2 + k]) as f64).sum::<f64>();
        let want: f64 = t
            .iter()
            .map(|x| triplet_loss(dot(x.anchor, x.positive), dot(x.anchor, x.negative), 0.1).unwrap())
            .sum::<f64>()
            / t.len() as f64;
        assert!((got - want).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn triplets_respect_labels(
            labels in proptest::collection::vec(0usize..4, 2..20),
            seed in any::<u64>()
        ) {
            let mut s = seed;
            let e = Tensor::from_fn(&[labels.len(), 3], |_| {
                s = crate::rng::derive_seed(s, &[]);
                (s >> 40) as f32 / (1u64 << 24) as f32 - 0.5
            });
            for t in mine_ephn(&e, &labels).unwrap() {
                prop_assert_eq!(labels[t.anchor], labels[t.positive]);
                prop_assert_ne!(t.anchor, t.positive);
                prop_assert_ne!(labels[t.anchor], labels[t.negative]);
            }
        }
    }
}
