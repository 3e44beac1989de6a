//! On-disk dataset directories and the `OGCF` matrix format.
//!
//! A dataset directory holds:
//!
//! * `manifest.json`: `{num_tasks, node_counts, class_counts, feature_dim}`,
//!   where `node_counts[t]` and `class_counts[t]` are cumulative per task;
//! * `nodes.tsv`: `id<TAB>label<TAB>arrival_task`;
//! * `edges.tsv`: `src<TAB>dst<TAB>arrival_task`;
//! * `features.bin`: an `OGCF` matrix with one row per node of the final task.
//!
//! `OGCF` is a 16-byte header (magic `OGCF`, then little-endian `u32` rows,
//! cols and a reserved zero) followed by row-major little-endian `f32` data.
//! Values are widened to `f64` on read.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSnapshot, TaskSequence};
use crate::linalg::DenseMatrix;

pub const OGCF_MAGIC: &[u8; 4] = b"OGCF";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_tasks: usize,
    pub node_counts: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub feature_dim: usize,
    /// Symmetrize directed edge lists on load. When false, an edge without
    /// its reverse is a data error.
    #[serde(default = "default_true")]
    pub symmetrize: bool,
}

fn default_true() -> bool {
    true
}

impl Manifest {
    fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.node_counts.len() != self.num_tasks || self.class_counts.len() != self.num_tasks
        {
            return Err(Error::malformed(
                "manifest.json",
                "num_tasks must be positive and match node_counts/class_counts lengths",
            ));
        }
        if self.node_counts.windows(2).any(|w| w[0] > w[1]) || self.class_counts.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::malformed(
                "manifest.json",
                "per-task counts must be non-decreasing",
            ));
        }
        Ok(())
    }
}

pub fn write_ogcf(path: &Path, m: &DenseMatrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::InvalidData("too many rows for OGCF".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::InvalidData("too many cols for OGCF".into()))?;
    let mut buf = Vec::with_capacity(16 + 4 * m.data().len());
    buf.extend_from_slice(OGCF_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ogcf(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    if bytes.len() < 16 || &bytes[..4] != OGCF_MAGIC {
        return Err(Error::malformed(what, "missing OGCF header"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(Error::malformed(
            what,
            format!("header says {rows}x{cols} but payload has {} bytes", bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DenseMatrix::from_vec(rows, cols, data)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, Vec<usize>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: std::result::Result<Vec<usize>, _> = line.split('\t').map(str::parse).collect();
        match fields {
            Ok(f) if f.len() == 3 => out.push((no + 1, f)),
            _ => {
                return Err(Error::malformed(
                    path.display().to_string(),
                    format!("line {}: expected three tab-separated non-negative integers", no + 1),
                ))
            }
        }
    }
    Ok(out)
}

/// Everything in a dataset directory, parsed once.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub manifest: Manifest,
    pub labels: Vec<usize>,
    pub arrival: Vec<usize>,
    /// `(src, dst, arrival_task)`.
    pub edges: Vec<(usize, usize, usize)>,
    pub features: DenseMatrix,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::malformed("manifest.json", e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<RawDataset> {
    let manifest = read_manifest(dir)?;
    let n = *manifest.node_counts.last().unwrap();

    let mut labels = vec![usize::MAX; n];
    let mut arrival = vec![0usize; n];
    for (line, f) in read_lines(&dir.join("nodes.tsv"))? {
        let (id, label, task) = (f[0], f[1], f[2]);
        if id >= n {
            return Err(Error::malformed(
                "nodes.tsv",
                format!("line {line}: node id {id} ≥ {n}"),
            ));
        }
        if task == 0 || task > manifest.num_tasks {
            return Err(Error::malformed(
                "nodes.tsv",
                format!("line {line}: arrival task {task} out of range"),
            ));
        }
        labels[id] = label;
        arrival[id] = task;
    }
    if let Some(missing) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(Error::malformed("nodes.tsv", format!("node {missing} has no record")));
    }
    // arrival tags must agree with the cumulative node counts
    for (id, &task) in arrival.iter().enumerate() {
        let lo = if task == 1 { 0 } else { manifest.node_counts[task - 2] };
        if id < lo || id >= manifest.node_counts[task - 1] {
            return Err(Error::InvalidData(format!(
                "node {id} tagged with task {task} but lies outside that task's id range"
            )));
        }
    }

    let mut edges = Vec::new();
    for (line, f) in read_lines(&dir.join("edges.tsv"))? {
        let (s, d, task) = (f[0], f[1], f[2]);
        if s >= n || d >= n {
            return Err(Error::malformed("edges.tsv", format!("line {line}: endpoint ≥ {n}")));
        }
        if task == 0 || task > manifest.num_tasks || arrival[s] > task || arrival[d] > task {
            return Err(Error::malformed(
                "edges.tsv",
                format!("line {line}: edge arrives at task {task} before one of its endpoints"),
            ));
        }
        edges.push((s, d, task));
    }
    if !manifest.symmetrize {
        let mut set: Vec<(usize, usize)> = edges.iter().map(|&(s, d, _)| (s, d)).collect();
        set.sort_unstable();
        if let Some((s, d)) = edges
            .iter()
            .map(|&(s, d, _)| (s, d))
            .find(|&(s, d)| s != d && set.binary_search(&(d, s)).is_err())
        {
            return Err(Error::InvalidData(format!(
                "edge ({s},{d}) has no reverse and symmetrize=false"
            )));
        }
    }

    let features = read_ogcf(&dir.join("features.bin"))?;
    if features.rows() != n {
        return Err(Error::InvalidData(format!(
            "features.bin has {} rows, manifest declares {n} nodes",
            features.rows()
        )));
    }
    if features.cols() != manifest.feature_dim {
        return Err(Error::InvalidData(format!(
            "features.bin has {} columns, manifest declares feature_dim {}",
            features.cols(),
            manifest.feature_dim
        )));
    }
    Ok(RawDataset {
        manifest,
        labels,
        arrival,
        edges,
        features,
    })
}

impl RawDataset {
    pub fn snapshot(&self, task: usize) -> Result<GraphSnapshot> {
        if task == 0 || task > self.manifest.num_tasks {
            return Err(Error::InvalidData(format!(
                "task {task} outside 1..={}",
                self.manifest.num_tasks
            )));
        }
        let n = self.manifest.node_counts[task - 1];
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|e| e.2 <= task)
            .map(|&(s, d, _)| (s, d))
            .collect();
        GraphSnapshot::new(
            task,
            &edges,
            self.features.head_rows(n),
            self.labels[..n].to_vec(),
            self.arrival[..n].to_vec(),
            self.manifest.class_counts[task - 1],
        )
    }

    pub fn sequence(&self) -> Result<TaskSequence> {
        let snaps = (1..=self.manifest.num_tasks)
            .map(|t| self.snapshot(t))
            .collect::<Result<Vec<_>>>()?;
        TaskSequence::new(snaps)
    }
}

pub fn load_snapshot(dir: &Path, task: usize) -> Result<GraphSnapshot> {
    read_dataset(dir)?.snapshot(task)
}

pub fn load_sequence(dir: &Path) -> Result<TaskSequence> {
    read_dataset(dir)?.sequence()
}

/// Writes `seq` as a dataset directory. Each edge is tagged with the first
/// task whose snapshot contains it.
pub fn write_dataset(dir: &Path, seq: &TaskSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let last = seq.last();
    let manifest = Manifest {
        num_tasks: seq.len(),
        node_counts: seq.snapshots().iter().map(GraphSnapshot::num_nodes).collect(),
        class_counts: seq.snapshots().iter().map(|s| s.num_classes).collect(),
        feature_dim: last.feature_dim(),
        symmetrize: true,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join("nodes.tsv");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for i in 0..last.num_nodes() {
        writeln!(w, "{i}\t{}\t{}", last.labels[i], last.node_arrival_task[i]).map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("edges.tsv");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for (i, j) in last.adjacency.edges() {
        let task = (1..=seq.len())
            .find(|&t| {
                let s = seq.snapshot(t);
                j < s.num_nodes() && s.adjacency.has_edge(i, j)
            })
            .unwrap_or(seq.len());
        writeln!(w, "{i}\t{j}\t{task}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_ogcf(&dir.join("features.bin"), &last.features)
}
