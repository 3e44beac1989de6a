//! Non-parametric K-layer graph convolution.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{normalize_snapshot, GraphSnapshot, NormalizedAdjacency};
use crate::linalg::DenseMatrix;

/// Propagated features `Â^K X`; rows follow the snapshot's node order.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub matrix: DenseMatrix,
    pub k: usize,
    pub task_index: usize,
}

impl Embeddings {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Writes the embedding matrix in `OGCF` format.
    pub fn export(&self, path: &Path) -> Result<()> {
        crate::io::write_ogcf(path, &self.matrix)
    }
}

/// `Â^K X` as `K` successive sparse-dense products. `K = 0` returns `X`.
pub fn propagate(adj: &NormalizedAdjacency, x: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let a = &adj.matrix;
    if a.rows() != x.rows() || a.cols() != x.rows() {
        return Err(Error::dim(
            "propagate",
            format!("adjacency {}x{} vs features {:?}", a.rows(), a.cols(), x.shape()),
        ));
    }
    let mut h = x.clone();
    for _ in 0..k {
        h = a.spmm(&h)?;
    }
    Ok(h)
}

pub fn propagate_snapshot(snapshot: &GraphSnapshot, k: usize) -> Result<Embeddings> {
    let adj = normalize_snapshot(snapshot);
    Ok(Embeddings {
        matrix: propagate(&adj, &snapshot.features, k)?,
        k,
        task_index: snapshot.task_index,
    })
}

/// Propagation over the condensed graph's identity adjacency.
///
/// With `A′ = I` the self-looped matrix is `2I`, every self-looped degree is
/// 2, so `Â′ = I` and `Â′^K X′ = X′` for any `K`.
pub fn propagate_condensed(xp: &DenseMatrix) -> DenseMatrix {
    xp.clone()
}
