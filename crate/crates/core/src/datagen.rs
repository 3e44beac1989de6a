//! Synthetic evolving graphs: a stochastic block model whose class means
//! drift from task to task while new nodes keep arriving in old and new
//! classes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{GraphSnapshot, TaskSequence};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSbmParams {
    pub tasks: usize,
    /// Classes introduced by each task.
    pub classes_per_task: usize,
    /// Newly arriving nodes per task; length `tasks`.
    pub nodes_per_task: Vec<usize>,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    /// Feature noise standard deviation.
    pub sigma: f64,
    /// Expected norm of a class mean.
    pub separation: f64,
    /// Expected norm of each task's random-walk step of every class mean.
    pub drift: f64,
    /// Base probability that a new node links to a given earlier node of its
    /// own class. Scaled by the earlier node's inverse degree, and by
    /// `p_inter / p_intra` across classes.
    pub attach: f64,
    pub seed: u64,
}

impl Default for DriftSbmParams {
    fn default() -> Self {
        Self {
            tasks: 3,
            classes_per_task: 2,
            nodes_per_task: vec![300; 3],
            p_intra: 0.02,
            p_inter: 0.002,
            feature_dim: 32,
            sigma: 1.0,
            separation: 3.0,
            drift: 1.0,
            attach: 0.01,
            seed: 0,
        }
    }
}

impl DriftSbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 2 {
            return Err(Error::Config(format!("at least 2 tasks required, got {}", self.tasks)));
        }
        if self.nodes_per_task.len() != self.tasks {
            return Err(Error::Config(format!(
                "nodes_per_task has {} entries for {} tasks",
                self.nodes_per_task.len(),
                self.tasks
            )));
        }
        if self.classes_per_task == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "classes_per_task and feature_dim must be positive".into(),
            ));
        }
        for (t, &n) in self.nodes_per_task.iter().enumerate() {
            let classes = (t + 1) * self.classes_per_task;
            if n < classes {
                return Err(Error::Config(format!(
                    "task {} adds {n} nodes but must reach {classes} classes",
                    t + 1
                )));
            }
        }
        for (name, p) in [
            ("p_intra", self.p_intra),
            ("p_inter", self.p_inter),
            ("attach", self.attach),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("separation", self.separation),
            ("drift", self.drift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Six tasks, two new classes each, about five thousand final nodes.
    PaperAnalog,
    /// Three small tasks with strong drift.
    Drift,
    /// A few dozen nodes; for tests.
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::PaperAnalog, Preset::Drift, Preset::Tiny];

    pub fn params(self, seed: u64) -> DriftSbmParams {
        match self {
            Preset::PaperAnalog => DriftSbmParams {
                tasks: 6,
                nodes_per_task: vec![650, 750, 1200, 900, 600, 1040],
                seed,
                ..Default::default()
            },
            Preset::Drift => DriftSbmParams {
                tasks: 3,
                nodes_per_task: vec![300, 300, 300],
                p_intra: 0.06,
                p_inter: 0.006,
                attach: 0.03,
                seed,
                ..Default::default()
            },
            Preset::Tiny => DriftSbmParams {
                tasks: 2,
                nodes_per_task: vec![30, 30],
                feature_dim: 8,
                p_intra: 0.3,
                p_inter: 0.03,
                attach: 0.1,
                seed,
                ..Default::default()
            },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-analog" => Ok(Preset::PaperAnalog),
            "drift" => Ok(Preset::Drift),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper-analog, drift or tiny)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::PaperAnalog => "paper-analog",
            Preset::Drift => "drift",
            Preset::Tiny => "tiny",
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Generates the cumulative snapshots described by `p`.
///
/// Each task's batch is split evenly (up to rounding, in shuffled order)
/// over every class seen so far. A node of class `c` arriving at task `t`
/// has features `μ_c + Σ_{s≤t} step_{c,s} + σ·z`, where the random-walk
/// steps are zero at each class's first task. Within a batch, pairs link
/// with `p_intra` or `p_inter`; each new node links to an earlier node `j`
/// with `attach · w_j` (same class) or `attach · w_j · p_inter/p_intra`
/// (different class), where `w_j = (d̄ + 1)/(deg_j + 1)` favors poorly
/// connected nodes and `d̄` is the mean degree before the task.
pub fn generate_drift_sbm(p: &DriftSbmParams) -> Result<TaskSequence> {
    p.validate()?;
    let d = p.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let total_classes = p.tasks * p.classes_per_task;
    let coord = 1.0 / (d as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..total_classes)
        .map(|_| gaussian(&mut rng, d, p.separation * coord))
        .collect();
    let mut offsets = vec![vec![0.0; d]; total_classes];
    let cross = if p.p_intra > 0.0 { p.p_inter / p.p_intra } else { 0.0 };

    let mut labels: Vec<usize> = Vec::new();
    let mut arrival: Vec<usize> = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut degree: Vec<usize> = Vec::new();
    let mut snapshots = Vec::with_capacity(p.tasks);

    for t in 1..=p.tasks {
        let classes = t * p.classes_per_task;
        if t > 1 {
            for off in offsets.iter_mut().take((t - 1) * p.classes_per_task) {
                for (o, s) in off.iter_mut().zip(gaussian(&mut rng, d, p.drift * coord)) {
                    *o += s;
                }
            }
        }
        let n_new = p.nodes_per_task[t - 1];
        let mut batch: Vec<usize> = (0..n_new).map(|i| i % classes).collect();
        batch.shuffle(&mut rng);
        let start = labels.len();
        for &c in &batch {
            let noise = gaussian(&mut rng, d, p.sigma);
            features.extend((0..d).map(|k| means[c][k] + offsets[c][k] + noise[k]));
            labels.push(c);
            arrival.push(t);
        }
        let end = labels.len();
        degree.resize(end, 0);

        let mean_deg = if start > 0 {
            degree[..start].iter().sum::<usize>() as f64 / start as f64
        } else {
            0.0
        };
        let weights: Vec<f64> = degree[..start]
            .iter()
            .map(|&g| (mean_deg + 1.0) / (g as f64 + 1.0))
            .collect();
        let mut fresh = Vec::new();
        for i in start..end {
            for (j, &w) in weights.iter().enumerate() {
                let base = if labels[i] == labels[j] {
                    p.attach
                } else {
                    p.attach * cross
                };
                if rng.random::<f64>() < (base * w).min(1.0) {
                    fresh.push((j, i));
                }
            }
            for j in i + 1..end {
                let prob = if labels[i] == labels[j] { p.p_intra } else { p.p_inter };
                if rng.random::<f64>() < prob {
                    fresh.push((i, j));
                }
            }
        }
        for &(a, b) in &fresh {
            degree[a] += 1;
            degree[b] += 1;
        }
        edges.extend(fresh);

        snapshots.push(GraphSnapshot::new(
            t,
            &edges,
            DenseMatrix::from_vec(end, d, features.clone())?,
            labels.clone(),
            arrival.clone(),
            classes,
        )?);
    }
    TaskSequence::new(snapshots)
}
