//! Sequential-task evaluation: condense at task `i`, test on every later
//! task `j ≥ i` with classes unseen at `i` mapped to unknown.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::classifier::{train_downstream, LinearClassifier, TrainConfig};
use super::openmax::{fit_openmax, OpensetMode, OpensetModel, Prediction, DEFAULT_TAIL_SIZE};
use super::threshold::DEFAULT_QUANTILE;
use crate::condense::{condense, CondenseConfig, CondensedMeta};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, GraphSnapshot, SplitMask, TaskSequence};
use crate::linalg::DenseMatrix;
use crate::propagation::propagate;

/// Upper-triangular accuracy matrix. Indices are 0-based relative to
/// `first_task`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceMatrix {
    size: usize,
    first_task: usize,
    acc: Vec<Option<f64>>,
    counts: Vec<usize>,
}

impl PerformanceMatrix {
    pub fn new(size: usize, first_task: usize) -> Self {
        Self {
            size,
            first_task,
            acc: vec![None; size * size],
            counts: vec![0; size * size],
        }
    }

    /// Builds a matrix from its upper triangle: row `i` lists `M_{i,i..}`.
    pub fn from_upper(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        let mut m = Self::new(size, 1);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size - i {
                return Err(Error::InvalidData(format!(
                    "row {i} of a {size}-task matrix needs {} entries, got {}",
                    size - i,
                    row.len()
                )));
            }
            for (k, &v) in row.iter().enumerate() {
                m.set(i, i + k, v, 0)?;
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn first_task(&self) -> usize {
        self.first_task
    }

    pub fn set(&mut self, i: usize, j: usize, accuracy: f64, count: usize) -> Result<()> {
        if i > j || j >= self.size {
            return Err(Error::Precondition(format!(
                "cell ({i}, {j}) outside the upper triangle"
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::InvalidData(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.acc[i * self.size + j] = Some(accuracy);
        self.counts[i * self.size + j] = count;
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.acc.get(i * self.size + j).copied().flatten()
    }

    pub fn count(&self, i: usize, j: usize) -> usize {
        self.counts[i * self.size + j]
    }

    /// Full rows with `None` below the diagonal.
    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        self.acc
            .chunks(self.size.max(1))
            .take(self.size)
            .map(<[_]>::to_vec)
            .collect()
    }

    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.size).map(|i| self.get(i, i)).collect()
    }
}

/// Mean over rows of the row average of the upper triangle.
pub fn map_score(m: &PerformanceMatrix) -> Result<f64> {
    let n = m.size();
    if n == 0 {
        return Err(Error::Precondition("empty performance matrix".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in i..n {
            row += m
                .get(i, j)
                .ok_or_else(|| Error::Precondition(format!("missing cell ({i}, {j})")))?;
        }
        total += row / (n - i) as f64;
    }
    Ok(total / n as f64)
}

/// Maps a ground-truth label to the label space of a model that knows
/// `known_classes` classes.
pub fn mapped_truth(label: usize, known_classes: usize) -> Prediction {
    if label < known_classes {
        Prediction::Known(label)
    } else {
        Prediction::Unknown
    }
}

/// Anything that labels nodes of a snapshot given its propagated embeddings.
pub trait NodePredictor {
    fn predict(&self, snapshot: &GraphSnapshot, h: &DenseMatrix, nodes: &[usize]) -> Result<Vec<Prediction>>;
}

/// Returns the mapped ground truth; an upper bound for the protocol.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor {
    pub known_classes: usize,
}

impl NodePredictor for OraclePredictor {
    fn predict(&self, snapshot: &GraphSnapshot, _h: &DenseMatrix, nodes: &[usize]) -> Result<Vec<Prediction>> {
        Ok(nodes
            .iter()
            .map(|&i| mapped_truth(snapshot.labels[i], self.known_classes))
            .collect())
    }
}

/// Downstream classifier with its calibrated open-set rule.
#[derive(Debug, Clone)]
pub struct TrainedOpenset {
    pub classifier: LinearClassifier,
    pub model: OpensetModel,
    pub condensed: Option<CondensedMeta>,
}

impl NodePredictor for TrainedOpenset {
    fn predict(&self, _snapshot: &GraphSnapshot, h: &DenseMatrix, nodes: &[usize]) -> Result<Vec<Prediction>> {
        self.model.predict(&self.classifier, &h.select_rows(nodes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub condense: CondenseConfig,
    pub train: TrainConfig,
    pub mode: OpensetMode,
    pub quantile: f64,
    pub tail_size: usize,
    /// Defaults to `min(C, 3)`.
    pub alpha_rank: Option<usize>,
    pub from_task: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            condense: CondenseConfig::default(),
            train: TrainConfig::default(),
            mode: OpensetMode::Softmax,
            quantile: DEFAULT_QUANTILE,
            tail_size: DEFAULT_TAIL_SIZE,
            alpha_rank: None,
            from_task: 1,
        }
    }
}

/// Calibrates an open-set rule for `clf` on task `i`: Openmax tails from
/// the task's training nodes, the threshold from its validation nodes.
pub fn calibrate_for_task(
    clf: &LinearClassifier,
    h: &DenseMatrix,
    snapshot: &GraphSnapshot,
    splits: &SplitMask,
    i: usize,
    cfg: &EvalConfig,
) -> Result<OpensetModel> {
    let val = splits.val(i);
    if val.is_empty() {
        return Err(Error::Precondition(format!(
            "task {i} has no validation nodes to calibrate on"
        )));
    }
    let openmax = match cfg.mode {
        OpensetMode::Softmax => None,
        OpensetMode::Openmax => {
            let train = splits.train(i);
            let logits = clf.logits(&h.select_rows(train))?;
            let labels: Vec<usize> = train.iter().map(|&n| snapshot.labels[n]).collect();
            let rank = cfg.alpha_rank.unwrap_or(clf.num_classes().min(3));
            Some(fit_openmax(&logits, &labels, cfg.tail_size, rank)?)
        }
    };
    OpensetModel::calibrate(cfg.mode, openmax, &clf.logits(&h.select_rows(val))?, cfg.quantile)
}

/// Condenses task `i`, trains the downstream classifier on the condensed
/// features and calibrates its open-set rule.
pub fn fit_opengc(seq: &TaskSequence, splits: &SplitMask, i: usize, cfg: &EvalConfig) -> Result<TrainedOpenset> {
    let (cond, _) = condense(seq, splits, i, &cfg.condense)?;
    let clf = train_downstream(&cond, &cfg.train)?;
    let snap = seq.snapshot(i);
    let h = propagate(&normalize_adjacency(&snap.adjacency), &snap.features, cfg.condense.k)?;
    let model = calibrate_for_task(&clf, &h, snap, splits, i, cfg)?;
    Ok(TrainedOpenset {
        classifier: clf,
        model,
        condensed: Some(cond.meta),
    })
}

/// Runs the protocol from `from_task` with predictors produced by `build`.
/// Cell `(i, j)` is the accuracy on task `j`'s test nodes against labels
/// mapped to the classes known at task `i`.
pub fn evaluate_with<P, F>(
    seq: &TaskSequence,
    splits: &SplitMask,
    from_task: usize,
    k: usize,
    mut build: F,
) -> Result<(PerformanceMatrix, Vec<P>)>
where
    P: NodePredictor,
    F: FnMut(usize) -> Result<P>,
{
    let m = seq.len();
    if from_task == 0 || from_task > m {
        return Err(Error::Precondition(format!("from_task {from_task} outside 1..={m}")));
    }
    let mut embeddings = Vec::with_capacity(m - from_task + 1);
    for j in from_task..=m {
        let s = seq.snapshot(j);
        embeddings.push(propagate(&normalize_adjacency(&s.adjacency), &s.features, k)?);
    }
    let mut matrix = PerformanceMatrix::new(m - from_task + 1, from_task);
    let mut predictors = Vec::new();
    for i in from_task..=m {
        let pred = build(i)?;
        let known = seq.snapshot(i).num_classes;
        for j in i..=m {
            let snap = seq.snapshot(j);
            let test = splits.test(j);
            if test.is_empty() {
                return Err(Error::Precondition(format!("task {j} has no test nodes")));
            }
            let out = pred.predict(snap, &embeddings[j - from_task], test)?;
            let hits = out
                .iter()
                .zip(test)
                .filter(|(p, &n)| **p == mapped_truth(snap.labels[n], known))
                .count();
            matrix.set(
                i - from_task,
                j - from_task,
                hits as f64 / test.len() as f64,
                test.len(),
            )?;
        }
        predictors.push(pred);
    }
    Ok((matrix, predictors))
}

/// Full pipeline: [`fit_opengc`] at every task from `cfg.from_task`.
pub fn evaluate_sequence(
    seq: &TaskSequence,
    splits: &SplitMask,
    cfg: &EvalConfig,
) -> Result<(PerformanceMatrix, Vec<TrainedOpenset>)> {
    evaluate_with(seq, splits, cfg.from_task, cfg.condense.k, |i| {
        fit_opengc(seq, splits, i, cfg)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub seed: u64,
    pub split_seed: u64,
    pub train_seed: u64,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub first_task: usize,
    pub openset: String,
    /// Row-major, `null` below the diagonal.
    pub performance_matrix: Vec<Vec<Option<f64>>>,
    pub per_task_accuracy: Vec<f64>,
    pub map: f64,
    pub config_hash: String,
    pub seeds: Seeds,
}

impl Metrics {
    pub fn new(m: &PerformanceMatrix, mode: OpensetMode, config_hash: String, seeds: Seeds) -> Result<Self> {
        let per_task_accuracy = m
            .diagonal()
            .into_iter()
            .map(|v| v.ok_or_else(|| Error::Precondition("missing diagonal cell".into())))
            .collect::<Result<_>>()?;
        Ok(Self {
            first_task: m.first_task(),
            openset: mode.to_string(),
            performance_matrix: m.rows(),
            per_task_accuracy,
            map: map_score(m)?,
            config_hash,
            seeds,
        })
    }

    pub fn matrix(&self) -> Result<PerformanceMatrix> {
        let n = self.performance_matrix.len();
        let mut m = PerformanceMatrix::new(n, self.first_task);
        for (i, row) in self.performance_matrix.iter().enumerate() {
            if row.len() != n {
                return Err(Error::malformed(
                    "metrics",
                    format!("row {i} has {} cells, expected {n}", row.len()),
                ));
            }
            for (j, cell) in row.iter().enumerate() {
                match (j >= i, cell) {
                    (true, Some(v)) => m.set(i, j, *v, 0)?,
                    (false, None) => {}
                    (true, None) => return Err(Error::malformed("metrics", format!("missing cell ({i}, {j})"))),
                    (false, Some(_)) => {
                        return Err(Error::malformed(
                            "metrics",
                            format!("cell ({i}, {j}) below the diagonal"),
                        ))
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::malformed("metrics", e.to_string()))
    }

    /// One `task_i  task_j  accuracy` row per cell, then `mAP  <value>`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("task_i\ttask_j\taccuracy\n");
        for (i, row) in self.performance_matrix.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    let _ = writeln!(out, "{}\t{}\t{v:.6}", i + self.first_task, j + self.first_task);
                }
            }
        }
        let _ = writeln!(out, "mAP\t{:.6}", self.map);
        out
    }
}
