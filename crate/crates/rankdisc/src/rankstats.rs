//! Pairwise similarity pseudo-labels from top-k rank statistics.
//!
//! Two feature vectors are declared "same class" when the sets of their k
//! highest-valued dimensions coincide. Ranking uses signed values (features
//! here are post-ReLU, so nonnegative); ties at the k-th boundary are broken
//! toward the lowest index so the result is deterministic.

use crate::ndcore::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct RankStatConfig {
    /// Size of the top-k index set, 1 <= k <= d.
    pub k: usize,
}

/// Batch-level pairwise pseudo-labels: symmetric, reflexive 0/1 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLabelMatrix {
    size: usize,
    labels: Vec<u8>,
}

impl PairLabelMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.size + j]
    }
}

/// Indices of the k largest values of `z`, returned sorted ascending.
pub fn top_k_set(z: &[f64], k: usize) -> Result<Vec<usize>> {
    let d = z.len();
    if k == 0 || k > d {
        return Err(Error::Argument(format!(
            "top_k_set: k={k} out of range for dimension {d}"
        )));
    }
    let mut idx: Vec<usize> = (0..d).collect();
    // descending by value, ascending by index among ties
    idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
    let mut set = idx[..k].to_vec();
    set.sort_unstable();
    Ok(set)
}

/// The s_ij matrix for a batch of feature rows.
pub fn pair_labels(features: &Tensor, cfg: RankStatConfig) -> Result<PairLabelMatrix> {
    let b = features.rows();
    let sets: Vec<Vec<usize>> = (0..b)
        .map(|i| top_k_set(features.row(i), cfg.k))
        .collect::<Result<_>>()?;
    let mut labels = vec![0u8; b * b];
    for i in 0..b {
        labels[i * b + i] = 1;
        for j in (i + 1)..b {
            if sets[i] == sets[j] {
                labels[i * b + j] = 1;
                labels[j * b + i] = 1;
            }
        }
    }
    Ok(PairLabelMatrix { size: b, labels })
}
