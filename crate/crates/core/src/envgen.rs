//! Temporal environment generation.
//!
//! Each environment perturbs the propagated embeddings of task `t`'s labeled
//! nodes by transplanting the normalized change `ΔH̄_j = (H_t,j − H_{t−1},j)/‖·‖`
//! of a random same-class node `j` onto node `i`:
//!
//! `Ĥ_i = H_i + ε_i·ΔH̄_j`,   `ε_i = δ_i · cos(H_t,i, H_{t−1},j) · η`
//!
//! with `δ_i` drawn from a Beta distribution whose shape depends on the
//! degree of `i`. When no history exists, environments come from random edge
//! and feature-column dropout instead.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Adjacency, GraphSnapshot};
use crate::linalg::DenseMatrix;
use crate::propagation::propagate;

/// Rows of `ΔH` with norm below this are treated as zero.
pub const RESIDUAL_EPS: f64 = 1e-12;

/// Shape of the degree calibration distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    /// `δ ~ Beta(c·degree, 1)`: mass moves toward 1 as degree grows.
    #[default]
    Literal,
    /// `δ ~ Beta(1, c·degree)`: higher degree favors smaller `δ`.
    Intent,
}

impl std::str::FromStr for BetaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "intent" => Ok(Self::Intent),
            other => Err(Error::Config(format!("unknown beta_mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for BetaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Intent => "intent",
        })
    }
}

/// Where dropout environments replace residual transplants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FallbackScope {
    /// Only when no labeled node has a usable historic donor.
    #[default]
    History,
    /// Also for individual classes without donors.
    Global,
}

impl std::str::FromStr for FallbackScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "history" => Ok(Self::History),
            "global" => Ok(Self::Global),
            other => Err(Error::Config(format!("unknown fallback_scope {other:?}"))),
        }
    }
}

impl std::fmt::Display for FallbackScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::History => "history",
            Self::Global => "global",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub eta: f64,
    pub c: f64,
    pub mode: BetaMode,
    pub env_count: usize,
    pub fallback_scope: FallbackScope,
    pub drop_edge_rate: f64,
    pub drop_feature_rate: f64,
}

/// Base embeddings of the labeled rows and `|E|` perturbed copies.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSet {
    /// Node ids of the rows, in order.
    pub nodes: Vec<usize>,
    pub base: DenseMatrix,
    pub envs: Vec<DenseMatrix>,
    /// Per environment, rows passed through because no donor existed.
    pub donor_misses: Vec<usize>,
    pub used_fallback: bool,
}

impl EnvironmentSet {
    pub fn env_count(&self) -> usize {
        self.envs.len()
    }
}

/// Unit-normalized residuals for the nodes shared by two consecutive tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTable {
    pub rows: DenseMatrix,
    pub valid: Vec<bool>,
}

/// `ΔH = H_t[common] − H_prev`, with each row scaled to unit length when its
/// norm is at least [`RESIDUAL_EPS`]. Common nodes are the first
/// `H_prev.rows()` rows of `H_t`.
pub fn residuals(h_t: &DenseMatrix, h_prev: &DenseMatrix) -> Result<ResidualTable> {
    if h_prev.rows() > h_t.rows() || h_prev.cols() != h_t.cols() {
        return Err(Error::dim(
            "residuals",
            format!("current {:?} vs previous {:?}", h_t.shape(), h_prev.shape()),
        ));
    }
    let mut rows = h_t.head_rows(h_prev.rows()).sub(h_prev)?;
    let mut valid = vec![false; rows.rows()];
    for (i, ok) in valid.iter_mut().enumerate() {
        let r = rows.row_mut(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= RESIDUAL_EPS {
            r.iter_mut().for_each(|v| *v /= norm);
            *ok = true;
        }
    }
    Ok(ResidualTable { rows, valid })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Draws the degree calibration term `δ`.
pub fn sample_delta<R: Rng + ?Sized>(degree: usize, c: f64, mode: BetaMode, rng: &mut R) -> f64 {
    let a = c * degree.max(1) as f64;
    let beta = match mode {
        BetaMode::Literal => Beta::new(a, 1.0),
        BetaMode::Intent => Beta::new(1.0, a),
    }
    .expect("positive Beta shape");
    beta.sample(rng)
}

/// `ε = δ · cos · η` with a freshly sampled `δ`.
pub fn sample_epsilon<R: Rng + ?Sized>(
    degree: usize,
    cos_ij: f64,
    eta: f64,
    c: f64,
    mode: BetaMode,
    rng: &mut R,
) -> f64 {
    sample_delta(degree, c, mode, rng) * cos_ij * eta
}

fn env_rng(seed: u64, env: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(env as u64 + 1);
    rng
}

/// Inputs shared by every residual-transplant environment.
pub struct TransplantInputs<'a> {
    pub h_t: &'a DenseMatrix,
    pub h_prev: &'a DenseMatrix,
    /// Labels of every node in `T_t`.
    pub labels: &'a [usize],
    /// Degrees of every node in `T_t`.
    pub degrees: &'a [usize],
    /// Labeled node ids that receive perturbations and can donate residuals.
    pub train_nodes: &'a [usize],
}

struct DonorPools {
    table: ResidualTable,
    by_class: BTreeMap<usize, Vec<usize>>,
}

fn donor_pools(inp: &TransplantInputs<'_>) -> Result<DonorPools> {
    let table = residuals(inp.h_t, inp.h_prev)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &j in inp.train_nodes {
        if j < table.valid.len() && table.valid[j] {
            by_class.entry(inp.labels[j]).or_default().push(j);
        }
    }
    Ok(DonorPools { table, by_class })
}

fn transplant_env<R, D>(
    inp: &TransplantInputs<'_>,
    pools: &DonorPools,
    eta: f64,
    rng: &mut R,
    mut delta: D,
) -> (DenseMatrix, usize)
where
    R: Rng,
    D: FnMut(usize, &mut R) -> f64,
{
    let mut out = inp.h_t.select_rows(inp.train_nodes);
    let mut misses = 0;
    for (row, &i) in inp.train_nodes.iter().enumerate() {
        let Some(pool) = pools.by_class.get(&inp.labels[i]) else {
            misses += 1;
            continue;
        };
        let j = pool[rng.random_range(0..pool.len())];
        let cos = cosine(inp.h_t.row(i), inp.h_prev.row(j));
        let eps = delta(inp.degrees[i].max(1), rng) * cos * eta;
        let shift = pools.table.rows.row(j);
        for (v, s) in out.row_mut(row).iter_mut().zip(shift) {
            *v += eps * s;
        }
    }
    (out, misses)
}

/// Residual-transplant environments over `inp.train_nodes`. Environment `e`
/// draws from its own ChaCha stream of `seed`, so results do not depend on
/// generation order.
pub fn generate_environments(inp: &TransplantInputs<'_>, cfg: &EnvConfig, seed: u64) -> Result<EnvironmentSet> {
    if cfg.env_count == 0 {
        return Err(Error::Precondition("env_count must be at least 1".into()));
    }
    let pools = donor_pools(inp)?;
    generate_with_pools(inp, &pools, cfg, seed, |deg, rng: &mut ChaCha8Rng| {
        sample_delta(deg, cfg.c, cfg.mode, rng)
    })
}

fn generate_with_pools<D>(
    inp: &TransplantInputs<'_>,
    pools: &DonorPools,
    cfg: &EnvConfig,
    seed: u64,
    mut delta: D,
) -> Result<EnvironmentSet>
where
    D: FnMut(usize, &mut ChaCha8Rng) -> f64,
{
    let mut envs = Vec::with_capacity(cfg.env_count);
    let mut donor_misses = Vec::with_capacity(cfg.env_count);
    for e in 0..cfg.env_count {
        let mut rng = env_rng(seed, e);
        let (m, misses) = transplant_env(inp, pools, cfg.eta, &mut rng, &mut delta);
        envs.push(m);
        donor_misses.push(misses);
    }
    Ok(EnvironmentSet {
        nodes: inp.train_nodes.to_vec(),
        base: inp.h_t.select_rows(inp.train_nodes),
        envs,
        donor_misses,
        used_fallback: false,
    })
}

/// Removes each undirected edge independently with probability `rate`.
pub fn drop_edges<R: Rng + ?Sized>(adj: &Adjacency, rate: f64, rng: &mut R) -> Adjacency {
    let kept: Vec<(usize, usize)> = adj
        .edges()
        .into_iter()
        .filter(|_| rng.random::<f64>() >= rate)
        .collect();
    Adjacency::from_edges(adj.num_nodes(), &kept).expect("edges come from a valid adjacency")
}

/// Zeroes each feature column independently with probability `rate`.
pub fn drop_feature_columns<R: Rng + ?Sized>(x: &DenseMatrix, rate: f64, rng: &mut R) -> DenseMatrix {
    let dropped: Vec<bool> = (0..x.cols()).map(|_| rng.random::<f64>() < rate).collect();
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, &d) in out.row_mut(i).iter_mut().zip(&dropped) {
            if d {
                *v = 0.0;
            }
        }
    }
    out
}

/// Dropout environments: each one re-propagates the snapshot after random
/// edge removal and feature-column masking.
pub fn fallback_environments(
    snapshot: &GraphSnapshot,
    train_nodes: &[usize],
    k: usize,
    drop_edge_rate: f64,
    drop_feature_rate: f64,
    env_count: usize,
    seed: u64,
) -> Result<EnvironmentSet> {
    for (name, r) in [
        ("drop_edge_rate", drop_edge_rate),
        ("drop_feature_rate", drop_feature_rate),
    ] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Precondition(format!("{name} must lie in [0, 1), got {r}")));
        }
    }
    if env_count == 0 {
        return Err(Error::Precondition("env_count must be at least 1".into()));
    }
    let base_full = propagate(&normalize_adjacency(&snapshot.adjacency), &snapshot.features, k)?;
    let mut envs = Vec::with_capacity(env_count);
    for e in 0..env_count {
        // separate stream family from transplant environments
        let mut rng = env_rng(seed ^ 0x5eed_fa11_bac4_0000, e);
        let adj = drop_edges(&snapshot.adjacency, drop_edge_rate, &mut rng);
        let x = drop_feature_columns(&snapshot.features, drop_feature_rate, &mut rng);
        let h = propagate(&normalize_adjacency(&adj), &x, k)?;
        envs.push(h.select_rows(train_nodes));
    }
    Ok(EnvironmentSet {
        nodes: train_nodes.to_vec(),
        base: base_full.select_rows(train_nodes),
        envs,
        donor_misses: vec![0; env_count],
        used_fallback: true,
    })
}

/// Builds the environments for task `t` of a condensation run.
///
/// Falls back to dropout environments when `prev` is `None` (first task) or
/// when no labeled node has a usable donor. With
/// [`FallbackScope::Global`], rows of donor-less classes are also taken from
/// the dropout environments instead of being passed through.
pub fn build_environments(
    snapshot: &GraphSnapshot,
    h_t: &DenseMatrix,
    prev: Option<&DenseMatrix>,
    train_nodes: &[usize],
    k: usize,
    cfg: &EnvConfig,
    seed: u64,
) -> Result<EnvironmentSet> {
    let fallback = || {
        fallback_environments(
            snapshot,
            train_nodes,
            k,
            cfg.drop_edge_rate,
            cfg.drop_feature_rate,
            cfg.env_count,
            seed,
        )
    };
    let Some(h_prev) = prev else {
        return fallback();
    };
    let degrees: Vec<usize> = (0..snapshot.num_nodes()).map(|i| snapshot.degree(i)).collect();
    let inp = TransplantInputs {
        h_t,
        h_prev,
        labels: &snapshot.labels,
        degrees: &degrees,
        train_nodes,
    };
    let pools = donor_pools(&inp)?;
    if pools.by_class.is_empty() {
        return fallback();
    }
    let mut set = generate_with_pools(&inp, &pools, cfg, seed, |deg, rng: &mut ChaCha8Rng| {
        sample_delta(deg, cfg.c, cfg.mode, rng)
    })?;
    if cfg.fallback_scope == FallbackScope::Global && set.donor_misses.iter().any(|&m| m > 0) {
        let fb = fallback()?;
        for (env, fb_env) in set.envs.iter_mut().zip(&fb.envs) {
            for (row, &i) in train_nodes.iter().enumerate() {
                if !pools.by_class.contains_key(&snapshot.labels[i]) {
                    env.row_mut(row).copy_from_slice(fb_env.row(row));
                }
            }
        }
    }
    Ok(set)
}
