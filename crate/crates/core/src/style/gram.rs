//! Gram matrices of feature maps.

use octmorph_autograd::Tensor;

use crate::error::{Error, Result};

/// `C×C` channel inner products of a feature map, normalized by `H·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub channels: usize,
    /// Row-major `C×C` entries.
    pub matrix: Vec<f32>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.matrix[i * self.channels + j]
    }
}

/// `G[i][j] = (1/(H·W)) Σ_{h,w} F[i][h][w]·F[j][h][w]` for a `[C, H, W]` map.
pub fn gram_matrix(features: &Tensor) -> Result<GramMatrix> {
    let [c, h, w] = features.shape() else {
        return Err(Error::Shape(format!(
            "gram_matrix expects [C, H, W], got {:?}",
            features.shape()
        )));
    };
    let (c, n) = (*c, h * w);
    if c == 0 || n == 0 {
        return Err(Error::Shape("gram_matrix needs C >= 1 and H·W >= 1".into()));
    }
    if !features.is_finite() {
        return Err(Error::Numerical("gram_matrix input is not finite".into()));
    }
    let f = features.data();
    let mut matrix = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let dot: f64 = f[i * n..(i + 1) * n]
                .iter()
                .zip(&f[j * n..(j + 1) * n])
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let v = (dot / n as f64) as f32;
            matrix[i * c + j] = v;
            matrix[j * c + i] = v;
        }
    }
    Ok(GramMatrix { channels: c, matrix })
}

/// Flat indices of the upper triangle (diagonal included) of each `C×C`
/// matrix in a `[B, C, C]` tensor, in row-major order.
pub(crate) fn upper_triangle_indices(batch: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * c * (c + 1) / 2);
    for b in 0..batch {
        for i in 0..c {
            for j in i..c {
                idx.push(b * c * c + i * c + j);
            }
        }
    }
    idx
}
