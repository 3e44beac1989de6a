//! Graph snapshots, task sequences, adjacency normalization and splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Compressed sparse row matrix with `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != n_rows + 1
            || indices.len() != values.len()
            || indptr.last().copied() != Some(indices.len())
            || indices.iter().any(|&j| j >= n_cols)
            || indptr.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::malformed("csr matrix", "inconsistent index arrays"));
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.n_rows
    }

    pub fn cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.indptr[i]..self.indptr[i + 1];
        match self.indices[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                m.set(i, j, v);
            }
        }
        m
    }

    /// Sparse × dense product. Rows are computed independently with a fixed
    /// accumulation order, so the result does not depend on the thread count.
    pub fn spmm(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.n_cols {
            return Err(Error::dim(
                "spmm",
                format!("{}x{} · {:?}", self.n_rows, self.n_cols, x.shape()),
            ));
        }
        let d = x.cols();
        let mut out = DenseMatrix::zeros(self.n_rows, d);
        if d == 0 {
            return Ok(out);
        }
        out.data_mut().par_chunks_mut(d).enumerate().for_each(|(i, orow)| {
            for (j, v) in self.row(i) {
                for (o, &xv) in orow.iter_mut().zip(x.row(j)) {
                    *o += v * xv;
                }
            }
        });
        Ok(out)
    }
}

/// Undirected, unweighted adjacency in CSR form: sorted neighbor lists,
/// no self-loops, no duplicates, symmetric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl Adjacency {
    /// Builds a symmetric adjacency from an edge list. Self-loops are dropped,
    /// duplicates and reversed duplicates collapse to one undirected edge.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut deg = vec![0usize; num_nodes];
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::InvalidData(format!(
                    "edge ({a},{b}) references a node outside 0..{num_nodes}"
                )));
            }
            if a != b {
                deg[a] += 1;
                deg[b] += 1;
            }
        }
        let mut lists: Vec<Vec<usize>> = deg.iter().map(|&d| Vec::with_capacity(d)).collect();
        for &(a, b) in edges {
            if a != b {
                lists[a].push(b);
                lists[b].push(a);
            }
        }
        let mut indptr = Vec::with_capacity(num_nodes + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            indices.extend_from_slice(&l);
            indptr.push(indices.len());
        }
        Ok(Self { indptr, indices })
    }

    pub fn num_nodes(&self) -> usize {
        self.indptr.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.indptr[i]..self.indptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges as `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for i in 0..self.num_nodes() {
            for &j in self.neighbors(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// One task's cumulative graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    pub task_index: usize,
    pub adjacency: Adjacency,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub node_arrival_task: Vec<usize>,
    pub num_classes: usize,
}

impl GraphSnapshot {
    pub fn new(
        task_index: usize,
        edges: &[(usize, usize)],
        features: DenseMatrix,
        labels: Vec<usize>,
        node_arrival_task: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if features.rows() != n {
            return Err(Error::InvalidData(format!(
                "feature row count {} does not match {n} nodes",
                features.rows()
            )));
        }
        if node_arrival_task.len() != n {
            return Err(Error::InvalidData("arrival tags do not cover every node".into()));
        }
        if !features.is_finite() {
            return Err(Error::InvalidData("non-finite feature value".into()));
        }
        for (node, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    node,
                    label,
                    task: task_index,
                    num_classes,
                });
            }
        }
        if let Some(&bad) = node_arrival_task.iter().find(|&&a| a == 0 || a > task_index) {
            return Err(Error::InvalidData(format!(
                "arrival task {bad} outside 1..={task_index}"
            )));
        }
        let adjacency = Adjacency::from_edges(n, edges)?;
        Ok(Self {
            task_index,
            adjacency,
            features,
            labels,
            node_arrival_task,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.degree(i)
    }
}

/// Ordered cumulative snapshots `T_1 ⊂ T_2 ⊂ … ⊂ T_m`. Tasks are 1-based.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    snapshots: Vec<GraphSnapshot>,
}

impl TaskSequence {
    pub fn new(snapshots: Vec<GraphSnapshot>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::InvalidData("task sequence is empty".into()));
        }
        for (i, s) in snapshots.iter().enumerate() {
            if s.task_index != i + 1 {
                return Err(Error::InvalidData(format!(
                    "snapshot {} carries task index {}",
                    i + 1,
                    s.task_index
                )));
            }
        }
        for w in snapshots.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let t = b.task_index;
            if b.num_nodes() < a.num_nodes() {
                return Err(Error::InvalidData(format!(
                    "task {t} has fewer nodes than task {}",
                    t - 1
                )));
            }
            if b.num_classes < a.num_classes {
                return Err(Error::InvalidData(format!(
                    "task {t} has fewer classes than task {}",
                    t - 1
                )));
            }
            if b.feature_dim() != a.feature_dim() {
                return Err(Error::InvalidData("feature dimension changes across tasks".into()));
            }
            let n = a.num_nodes();
            if b.labels[..n] != a.labels[..]
                || b.node_arrival_task[..n] != a.node_arrival_task[..]
                || b.features.head_rows(n) != a.features
            {
                return Err(Error::InvalidData(format!(
                    "nodes of task {} are not a prefix of task {t}",
                    t - 1
                )));
            }
            if a.adjacency.edges().iter().any(|&(i, j)| !b.adjacency.has_edge(i, j)) {
                return Err(Error::InvalidData(format!(
                    "an edge of task {} is missing from task {t}",
                    t - 1
                )));
            }
        }
        Ok(Self { snapshots })
    }

    /// Number of tasks `m`.
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Snapshot of 1-based task `t`.
    pub fn snapshot(&self, t: usize) -> &GraphSnapshot {
        &self.snapshots[t - 1]
    }

    pub fn snapshots(&self) -> &[GraphSnapshot] {
        &self.snapshots
    }

    pub fn last(&self) -> &GraphSnapshot {
        self.snapshots.last().expect("non-empty")
    }

    /// Node count before task `t` arrived (0 for task 1).
    pub fn prev_nodes(&self, t: usize) -> usize {
        if t <= 1 {
            0
        } else {
            self.snapshot(t - 1).num_nodes()
        }
    }

    /// Prefix `T_1..T_t` as its own sequence.
    pub fn truncate(&self, t: usize) -> Self {
        Self {
            snapshots: self.snapshots[..t].to_vec(),
        }
    }
}

/// `Â = D̃^{-1/2}(A + I)D̃^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: CsrMatrix,
}

/// Symmetric normalization with self-loops. Isolated nodes get `Â_ii = 1`.
pub fn normalize_adjacency(adj: &Adjacency) -> NormalizedAdjacency {
    let n = adj.num_nodes();
    let deg: Vec<usize> = (0..n).map(|i| adj.degree(i) + 1).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(adj.indices.len() + n);
    let mut values = Vec::with_capacity(adj.indices.len() + n);
    indptr.push(0);
    for i in 0..n {
        let nb = adj.neighbors(i);
        let split = nb.partition_point(|&j| j < i);
        let cols = nb[..split].iter().chain(std::iter::once(&i)).chain(&nb[split..]);
        for &j in cols {
            indices.push(j);
            // integer product first: mirrored entries are bitwise equal
            values.push(1.0 / ((deg[i] * deg[j]) as f64).sqrt());
        }
        indptr.push(indices.len());
    }
    NormalizedAdjacency {
        matrix: CsrMatrix {
            n_rows: n,
            n_cols: n,
            indptr,
            indices,
            values,
        },
    }
}

pub fn normalize_snapshot(snapshot: &GraphSnapshot) -> NormalizedAdjacency {
    normalize_adjacency(&snapshot.adjacency)
}

/// Cumulative train/validation/test node ids for each task, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    train: Vec<Vec<usize>>,
    val: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

impl SplitMask {
    pub fn num_tasks(&self) -> usize {
        self.train.len()
    }

    pub fn train(&self, t: usize) -> &[usize] {
        &self.train[t - 1]
    }

    pub fn val(&self, t: usize) -> &[usize] {
        &self.val[t - 1]
    }

    pub fn test(&self, t: usize) -> &[usize] {
        &self.test[t - 1]
    }

    pub fn role(&self, t: usize, node: usize) -> Option<SplitRole> {
        if self.train(t).binary_search(&node).is_ok() {
            Some(SplitRole::Train)
        } else if self.val(t).binary_search(&node).is_ok() {
            Some(SplitRole::Validation)
        } else if self.test(t).binary_search(&node).is_ok() {
            Some(SplitRole::Test)
        } else {
            None
        }
    }
}

/// Split sizes for `n` new nodes: validation and test take the floor of their
/// share, train absorbs the remainder.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let val = ((n as f64) * ratios.1 + 1e-9).floor() as usize;
    let test = ((n as f64) * ratios.2 + 1e-9).floor() as usize;
    let val = val.min(n);
    let test = test.min(n - val);
    (n - val - test, val, test)
}

/// Splits each task's newly arrived nodes by `ratios` with a seeded shuffle
/// and accumulates the per-task sets.
pub fn make_splits(seq: &TaskSequence, ratios: (f64, f64, f64), seed: u64) -> Result<SplitMask> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "split ratios must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let mut mask = SplitMask {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for t in 1..=seq.len() {
        let start = seq.prev_nodes(t);
        let end = seq.snapshot(t).num_nodes();
        let mut fresh: Vec<usize> = (start..end).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        fresh.shuffle(&mut rng);
        let (n_tr, n_va, _) = split_counts(fresh.len(), ratios);
        tr.extend_from_slice(&fresh[..n_tr]);
        va.extend_from_slice(&fresh[n_tr..n_tr + n_va]);
        te.extend_from_slice(&fresh[n_tr + n_va..]);
        for v in [&mut tr, &mut va, &mut te] {
            v.sort_unstable();
        }
        mask.train.push(tr.clone());
        mask.val.push(va.clone());
        mask.test.push(te.clone());
    }
    Ok(mask)
}
