//! Cosine-similarity adjacency over node features and its degree-normalized
//! form, with analytic backward rules for both.
//!
//! Negative cosines are clamped to zero by default so every degree stays
//! positive; zero-norm rows keep self-similarity 1 and cross-similarity 0,
//! which isolates the node without breaking normalization.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor2;

/// Nonnegative symmetric similarity graph over nodes, diagonal pinned to 1.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    entries: Tensor2,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Tensor2 {
        &self.entries
    }

    /// Wrap a precomputed matrix. Used by tests and the similarity dump.
    pub fn from_entries(entries: Tensor2) -> Self {
        assert_eq!(entries.rows(), entries.cols(), "affinity must be square");
        AffinityMatrix { entries }
    }
}

/// What the backward pass needs from `build_affinity`.
#[derive(Debug, Clone)]
pub struct AffinityCache {
    /// Euclidean norm of each feature row.
    norms: Vec<f64>,
    /// Unclamped cosine values (diagonal holds 1).
    raw: Tensor2,
}

/// Degree-normalization variant. The symmetric form is the default; row
/// normalization exists for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphNorm {
    Symmetric,
    Row,
}

/// Pairwise cosine similarity of feature rows.
pub fn build_affinity(features: &Tensor2) -> AffinityMatrix {
    build_affinity_cached(features, true).0
}

/// As `build_affinity`, also returning the cache consumed by
/// `affinity_backward`. `clamp_negative` is exposed as a run toggle.
pub fn build_affinity_cached(features: &Tensor2, clamp_negative: bool) -> (AffinityMatrix, AffinityCache) {
    let n = features.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| features.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut raw = Tensor2::zeros(n, n);
    for i in 0..n {
        raw.set(i, i, 1.0);
        for j in (i + 1)..n {
            let value = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = features
                    .row(i)
                    .iter()
                    .zip(features.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                dot / (norms[i] * norms[j])
            };
            raw.set(i, j, value);
            raw.set(j, i, value);
        }
    }
    let entries = if clamp_negative { raw.map(|v| v.max(0.0)) } else { raw.clone() };
    (AffinityMatrix { entries }, AffinityCache { norms, raw })
}

/// Gradient of a scalar loss w.r.t. the feature rows, given the gradient
/// w.r.t. the affinity entries. Diagonal entries are constant 1 and clamped
/// negatives are flat, so neither contributes.
pub fn affinity_backward(
    features: &Tensor2,
    cache: &AffinityCache,
    d_affinity: &Tensor2,
    clamp_negative: bool,
) -> Tensor2 {
    let n = features.rows();
    let d = features.cols();
    assert_eq!(d_affinity.rows(), n);
    assert_eq!(d_affinity.cols(), n);
    let mut d_features = Tensor2::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = d_affinity.get(i, j);
            if g == 0.0 {
                continue;
            }
            let (ni, nj) = (cache.norms[i], cache.norms[j]);
            if ni == 0.0 || nj == 0.0 {
                continue;
            }
            let raw = cache.raw.get(i, j);
            if clamp_negative && raw <= 0.0 {
                continue;
            }
            // Entry (i, j) depends on both rows: d/df_i = f_j/(n_i n_j) -
            // raw * f_i / n_i^2, and symmetrically for f_j.
            let inv = 1.0 / (ni * nj);
            let coeff_i = raw / (ni * ni);
            let coeff_j = raw / (nj * nj);
            for col in 0..d {
                let fi = features.get(i, col);
                let fj = features.get(j, col);
                d_features.set(i, col, d_features.get(i, col) + g * (fj * inv - coeff_i * fi));
                d_features.set(j, col, d_features.get(j, col) + g * (fi * inv - coeff_j * fj));
            }
        }
    }
    d_features
}

/// D^{-1/2} A D^{-1/2} (or D^{-1} A for the row variant), D(i,i) = row sum.
/// Degrees are at least 1 thanks to the unit diagonal.
pub fn normalize_symmetric(a: &AffinityMatrix) -> Tensor2 {
    normalize(a, GraphNorm::Symmetric)
}

pub fn normalize(a: &AffinityMatrix, norm: GraphNorm) -> Tensor2 {
    let n = a.n();
    let degrees = row_sums(a.entries());
    let mut out = Tensor2::zeros(n, n);
    match norm {
        GraphNorm::Symmetric => {
            let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
            for i in 0..n {
                for j in 0..n {
                    out.set(i, j, a.entries().get(i, j) * inv_sqrt[i] * inv_sqrt[j]);
                }
            }
        }
        GraphNorm::Row => {
            for i in 0..n {
                for j in 0..n {
                    out.set(i, j, a.entries().get(i, j) / degrees[i]);
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the raw affinity entries given the gradient w.r.t. the
/// normalized matrix. `normalized` must be the forward output for the same
/// affinity and variant.
///
/// Perturbing A(p,q) changes only the row degree deg_p, so for
/// S(i,j) = A(i,j) * (deg_i * deg_j)^{-1/2} the chain rule gives
///   dL/dA(p,q) = T(p,q)/sqrt(deg_p deg_q) - (r_p + c_p) / (2 deg_p)
/// with r_p = sum_j T(p,j) S(p,j) and c_p = sum_i T(i,p) S(i,p); the row
/// variant is (T(p,q) - r_p) / deg_p.
pub fn normalize_backward(
    a: &AffinityMatrix,
    normalized: &Tensor2,
    d_normalized: &Tensor2,
    norm: GraphNorm,
) -> Tensor2 {
    let n = a.n();
    let degrees = row_sums(a.entries());
    let mut row_acc = vec![0.0; n];
    let mut col_acc = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let t = d_normalized.get(i, j) * normalized.get(i, j);
            row_acc[i] += t;
            col_acc[j] += t;
        }
    }
    let mut d_a = Tensor2::zeros(n, n);
    match norm {
        GraphNorm::Symmetric => {
            for p in 0..n {
                let degree_term = 0.5 * (row_acc[p] + col_acc[p]) / degrees[p];
                for q in 0..n {
                    let direct = d_normalized.get(p, q) / (degrees[p] * degrees[q]).sqrt();
                    d_a.set(p, q, direct - degree_term);
                }
            }
        }
        GraphNorm::Row => {
            for p in 0..n {
                for q in 0..n {
                    let direct = d_normalized.get(p, q) / degrees[p];
                    d_a.set(p, q, direct - row_acc[p] / degrees[p]);
                }
            }
        }
    }
    d_a
}

fn row_sums(entries: &Tensor2) -> Vec<f64> {
    (0..entries.rows())
        .map(|i| entries.row(i).iter().sum::<f64>())
        .collect()
}

/// Gradient of the affinity w.r.t. features, skipping the diagonal, for use
/// after `normalize_backward`. The diagonal gradient must be dropped because
/// A(i,i) is pinned to 1 in the forward pass.
pub fn zero_diagonal(mut d_a: Tensor2) -> Tensor2 {
    let n = d_a.rows();
    for i in 0..n {
        d_a.set(i, i, 0.0);
    }
    d_a
}
