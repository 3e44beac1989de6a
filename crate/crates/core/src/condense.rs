//! Condensation loop: fits synthetic node features so that a relay network
//! with a closed-form readout trained on them classifies the real graph, with
//! an invariance penalty over simulated future environments.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envgen::{build_environments, BetaMode, EnvConfig, EnvironmentSet, FallbackScope};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, SplitMask, TaskSequence};
use crate::io::{read_ogcf, write_ogcf};
use crate::linalg::{log_softmax_rows, DenseMatrix, Tape, Var};
use crate::propagation::propagate;
use crate::relay::{krr_fit, krr_fit_tape, sample_relay, transform, transform_tape, RelayParams};
use crate::seed::derive_seed;

/// Standard deviation of the Gaussian jitter added to initial rows.
pub const INIT_NOISE_STD: f64 = 1e-3;

const INIT_STREAM: u64 = 1;
const ENV_STREAM: u64 = 2;
const RELAY_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CondenseConfig {
    /// Ridge constant of the readout.
    pub lambda: f64,
    /// Propagation depth.
    pub k: usize,
    /// Relay width `b`.
    pub width: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub c: f64,
    pub env_count: usize,
    pub lr: f64,
    pub max_iters: usize,
    /// Evaluations without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub ratio: f64,
    pub beta_mode: BetaMode,
    pub fallback_scope: FallbackScope,
    pub drop_edge_rate: f64,
    pub drop_feature_rate: f64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-3,
            k: 2,
            width: 1024,
            alpha: 0.5,
            gamma: 0.5,
            eta: 1.0,
            c: 10.0,
            env_count: 3,
            lr: 1e-2,
            max_iters: 200,
            patience: 5,
            eval_every: 10,
            seed: 0,
            ratio: 0.01,
            beta_mode: BetaMode::Literal,
            fallback_scope: FallbackScope::History,
            drop_edge_rate: 0.2,
            drop_feature_rate: 0.2,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("c", self.c),
            ("lr", self.lr),
            ("ratio", self.ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.ratio > 1.0 {
            return Err(Error::Config(format!("ratio must not exceed 1, got {}", self.ratio)));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if !(1..=5).contains(&self.env_count) {
            return Err(Error::Config(format!(
                "env_count must lie in 1..=5, got {}",
                self.env_count
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        for (name, r) in [
            ("drop_edge_rate", self.drop_edge_rate),
            ("drop_feature_rate", self.drop_feature_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            eta: self.eta,
            c: self.c,
            mode: self.beta_mode,
            env_count: self.env_count,
            fallback_scope: self.fallback_scope,
            drop_edge_rate: self.drop_edge_rate,
            drop_feature_rate: self.drop_feature_rate,
        }
    }

    /// Sorted `key=value` lines; the input to [`CondenseConfig::fingerprint`].
    pub fn canonical(&self) -> String {
        let mut lines = vec![
            format!("alpha={}", self.alpha),
            format!("beta_mode={}", self.beta_mode),
            format!("c={}", self.c),
            format!("drop_edge_rate={}", self.drop_edge_rate),
            format!("drop_feature_rate={}", self.drop_feature_rate),
            format!("env_count={}", self.env_count),
            format!("eta={}", self.eta),
            format!("eval_every={}", self.eval_every),
            format!("fallback_scope={}", self.fallback_scope),
            format!("gamma={}", self.gamma),
            format!("k={}", self.k),
            format!("lambda={}", self.lambda),
            format!("lr={}", self.lr),
            format!("max_iters={}", self.max_iters),
            format!("patience={}", self.patience),
            format!("ratio={}", self.ratio),
            format!("seed={}", self.seed),
            format!("width={}", self.width),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedMeta {
    pub task_index: usize,
    pub seed: u64,
    pub config_hash: String,
    pub ratio: f64,
    /// `N′ / N_t`.
    pub compress_ratio: f64,
    pub num_nodes: usize,
    pub original_nodes: usize,
    pub num_classes: usize,
    pub log_tau: f64,
    pub iterations: usize,
    pub best_val_accuracy: Option<f64>,
}

/// Synthetic node features with fixed labels. The adjacency is implicitly
/// the identity, so the features are also the propagated embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedGraph {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub meta: CondensedMeta,
}

impl CondensedGraph {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn targets(&self) -> DenseMatrix {
        DenseMatrix::one_hot(&self.labels, self.meta.num_classes)
    }

    /// Writes `condensed.bin`, `labels.tsv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_ogcf(&dir.join("condensed.bin"), &self.features)?;
        let mut tsv = Vec::new();
        for (i, y) in self.labels.iter().enumerate() {
            writeln!(tsv, "{i}\t{y}").expect("write to vec");
        }
        let path = dir.join("labels.tsv");
        fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`CondensedGraph::save`]. Features come
    /// back at 32-bit precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let features = read_ogcf(&dir.join("condensed.bin"))?;
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CondensedMeta =
            serde_json::from_str(&text).map_err(|e| Error::malformed("meta.json", e.to_string()))?;
        let path = dir.join("labels.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut labels = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split('\t');
            let id: Option<usize> = parts.next().and_then(|s| s.trim().parse().ok());
            let y: Option<usize> = parts.next().and_then(|s| s.trim().parse().ok());
            match (id, y) {
                (Some(id), Some(y)) if id == labels.len() && y < meta.num_classes => labels.push(y),
                _ => return Err(Error::malformed("labels.tsv", format!("bad record on line {}", ln + 1))),
            }
        }
        if labels.len() != features.rows() {
            return Err(Error::malformed(
                "condensed graph",
                format!("{} labels for {} feature rows", labels.len(), features.rows()),
            ));
        }
        Ok(Self { features, labels, meta })
    }
}

/// `N′ = round(ratio · n)`.
pub fn condensed_size(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

/// Splits `total` slots over classes in proportion to `counts` by largest
/// remainder (ties to the lower class), then lifts empty classes to one slot
/// by taking from the currently largest class.
pub fn class_quotas(counts: &[usize], total: usize) -> Result<Vec<usize>> {
    let c = counts.len();
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Precondition(format!("class {empty} has no training nodes")));
    }
    if total < c {
        return Err(Error::Precondition(format!(
            "{total} condensed nodes cannot cover {c} classes; increase the ratio"
        )));
    }
    let n: usize = counts.iter().sum();
    let mut quotas = Vec::with_capacity(c);
    let mut rems = Vec::with_capacity(c);
    for (cls, &k) in counts.iter().enumerate() {
        // exact integer arithmetic for floor and remainder
        let num = total * k;
        quotas.push(num / n);
        rems.push((num % n, cls));
    }
    let left = total - quotas.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, cls) in rems.iter().take(left) {
        quotas[cls] += 1;
    }
    while let Some(empty) = quotas.iter().position(|&q| q == 0) {
        let donor = (0..c).fold(0, |best, i| if quotas[i] > quotas[best] { i } else { best });
        quotas[donor] -= 1;
        quotas[empty] += 1;
    }
    Ok(quotas)
}

/// Initial condensed rows: per class, the class quota is filled with
/// embeddings of that class's training nodes (drawn without replacement,
/// cycling only when the quota exceeds the class size) plus small Gaussian
/// noise. Rows are grouped by class in ascending order.
pub fn init_condensed(
    h_train: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
    n_prime: usize,
    seed: u64,
) -> Result<(DenseMatrix, Vec<usize>)> {
    if labels.len() != h_train.rows() {
        return Err(Error::dim(
            "init_condensed",
            format!("{} labels for {} rows", labels.len(), h_train.rows()),
        ));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (row, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidData(format!("label {y} outside {num_classes} classes")));
        }
        members[y].push(row);
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = class_quotas(&counts, n_prime)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
    let noise = Normal::new(0.0, INIT_NOISE_STD).expect("positive std");
    let d = h_train.cols();
    let mut data = Vec::with_capacity(n_prime * d);
    let mut out_labels = Vec::with_capacity(n_prime);
    for (cls, pool) in members.iter_mut().enumerate() {
        pool.shuffle(&mut rng);
        for i in 0..quotas[cls] {
            let src = h_train.row(pool[i % pool.len()]);
            data.extend(src.iter().map(|&v| v + noise.sample(&mut rng)));
            out_labels.push(cls);
        }
    }
    Ok((DenseMatrix::from_vec(n_prime, d, data)?, out_labels))
}

fn check_rows(op: &'static str, m: &DenseMatrix, y: &DenseMatrix, mask: &[usize]) -> Result<()> {
    if m.shape() != y.shape() {
        return Err(Error::dim(op, format!("{:?} vs targets {:?}", m.shape(), y.shape())));
    }
    if mask.is_empty() {
        return Err(Error::Precondition(format!("{op}: empty mask")));
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= m.rows()) {
        return Err(Error::Precondition(format!("{op}: mask row {bad} out of range")));
    }
    Ok(())
}

/// Mean over `mask` rows of `−Σ_j Y_ij · logprob_ij`.
pub fn ce_loss(logprobs: &DenseMatrix, y: &DenseMatrix, mask: &[usize]) -> Result<f64> {
    check_rows("ce_loss", logprobs, y, mask)?;
    let total: f64 = mask
        .iter()
        .map(|&i| -logprobs.row(i).iter().zip(y.row(i)).map(|(l, t)| l * t).sum::<f64>())
        .sum();
    Ok(total / mask.len() as f64)
}

/// `d/dw` at `w = 1` of the cross-entropy of `softmax(w · logits / τ)`.
pub fn irm_grad_w(logits: &DenseMatrix, y: &DenseMatrix, tau: f64, mask: &[usize]) -> Result<f64> {
    check_rows("irm_penalty", logits, y, mask)?;
    if !(tau > 0.0) {
        return Err(Error::Precondition(format!("temperature must be positive, got {tau}")));
    }
    let scaled = logits.select_rows(mask).scale(1.0 / tau);
    let lp = log_softmax_rows(&scaled);
    let ys = y.select_rows(mask);
    let mut g = 0.0;
    for i in 0..scaled.rows() {
        for j in 0..scaled.cols() {
            g += (lp.get(i, j).exp() - ys.get(i, j)) * scaled.get(i, j);
        }
    }
    Ok(g / mask.len() as f64)
}

/// Squared [`irm_grad_w`].
pub fn irm_penalty(logits: &DenseMatrix, y: &DenseMatrix, tau: f64, mask: &[usize]) -> Result<f64> {
    let g = irm_grad_w(logits, y, tau, mask)?;
    Ok(g * g)
}

/// Tape form of [`ce_loss`] over all rows of `logits / τ`.
pub fn ce_tape(tape: &mut Tape, logits: Var, log_tau: Var, y: &DenseMatrix) -> Result<Var> {
    let n = y.rows();
    if n == 0 {
        return Err(Error::Precondition("ce_loss: empty mask".into()));
    }
    let lp = tape.log_softmax_temp(logits, log_tau)?;
    let yc = tape.constant(y.clone());
    let picked = tape.mul(lp, yc)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Tape form of [`irm_penalty`] over all rows, differentiable in both the
/// logits and the temperature.
pub fn irm_penalty_tape(tape: &mut Tape, logits: Var, log_tau: Var, y: &DenseMatrix) -> Result<Var> {
    let n = y.rows();
    if n == 0 {
        return Err(Error::Precondition("irm_penalty: empty mask".into()));
    }
    let s = tape.temp_scale(logits, log_tau)?;
    let lp = tape.log_softmax_rows(s);
    let p = tape.exp(lp);
    let yc = tape.constant(y.clone());
    let resid = tape.sub(p, yc)?;
    let prod = tape.mul(resid, s)?;
    let sum = tape.sum(prod);
    let g = tape.scale(sum, 1.0 / n as f64);
    tape.mul(g, g)
}

/// Everything [`total_loss`] needs besides the differentiable parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// Labeled rows of the current snapshot's embeddings.
    pub base: &'a DenseMatrix,
    pub targets: &'a DenseMatrix,
    /// Environment embeddings, row-aligned with `base`.
    pub envs: &'a [DenseMatrix],
    pub condensed_targets: &'a DenseMatrix,
    pub theta: &'a RelayParams,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub base_ce: f64,
    /// Means over environments; zero when the environment term is skipped.
    pub env_ce: f64,
    pub penalty: f64,
}

/// `ce(H_t) + α/|E| · Σ_e [ce(H^e) + γ · penalty(H^e)]`, with the readout
/// fit in closed form on `relu(X′θ)` inside the tape. The environment term is
/// not recorded at all when `α = 0` or there are no environments.
pub fn total_loss(tape: &mut Tape, xp: Var, log_tau: Var, inp: &LossInputs<'_>) -> Result<LossTerms> {
    let ps = transform_tape(tape, inp.theta, xp)?;
    let w = krr_fit_tape(tape, ps, inp.condensed_targets, inp.lambda)?;

    let head = |tape: &mut Tape, h: &DenseMatrix| -> Result<Var> {
        let p = tape.constant(transform(inp.theta, h)?);
        tape.matmul(p, w)
    };

    let logits = head(tape, inp.base)?;
    let base = ce_tape(tape, logits, log_tau, inp.targets)?;
    let base_ce = tape.scalar_value(base);
    if inp.alpha == 0.0 || inp.envs.is_empty() {
        return Ok(LossTerms {
            total: base,
            base_ce,
            env_ce: 0.0,
            penalty: 0.0,
        });
    }

    let mut acc: Option<Var> = None;
    let (mut env_ce, mut penalty) = (0.0, 0.0);
    for env in inp.envs {
        if env.shape() != inp.base.shape() {
            return Err(Error::dim(
                "total_loss",
                format!("environment {:?} vs base {:?}", env.shape(), inp.base.shape()),
            ));
        }
        let logits = head(tape, env)?;
        let ce = ce_tape(tape, logits, log_tau, inp.targets)?;
        let pen = irm_penalty_tape(tape, logits, log_tau, inp.targets)?;
        env_ce += tape.scalar_value(ce);
        penalty += tape.scalar_value(pen);
        let weighted = tape.scale(pen, inp.gamma);
        let term = tape.add(ce, weighted)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let ne = inp.envs.len() as f64;
    let env_term = tape.scale(acc.expect("at least one environment"), inp.alpha / ne);
    let total = tape.add(base, env_term)?;
    Ok(LossTerms {
        total,
        base_ce,
        env_ce: env_ce / ne,
        penalty: penalty / ne,
    })
}

/// Adam moments for the condensed features and the log-temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_x: DenseMatrix,
    pub v_x: DenseMatrix,
    pub m_tau: f64,
    pub v_tau: f64,
    pub step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m_x: DenseMatrix::zeros(rows, cols),
            v_x: DenseMatrix::zeros(rows, cols),
            m_tau: 0.0,
            v_tau: 0.0,
            step: 0,
        }
    }

    pub fn update(&mut self, x: &mut DenseMatrix, log_tau: &mut f64, gx: &DenseMatrix, gt: f64, lr: f64) -> Result<()> {
        if x.shape() != gx.shape() || x.shape() != self.m_x.shape() {
            return Err(Error::dim(
                "adam",
                format!("param {:?}, grad {:?}", x.shape(), gx.shape()),
            ));
        }
        self.step += 1;
        let (b1, b2) = (Self::BETA1, Self::BETA2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let adam = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        let (mx, vx) = (self.m_x.data_mut(), self.v_x.data_mut());
        for (i, p) in x.data_mut().iter_mut().enumerate() {
            adam(p, &mut mx[i], &mut vx[i], gx.data()[i]);
        }
        adam(log_tau, &mut self.m_tau, &mut self.v_tau, gt);
        Ok(())
    }
}

/// Pre-processed inputs of one condensation run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub task_index: usize,
    pub num_classes: usize,
    /// `N_t`.
    pub num_nodes: usize,
    pub train_h: DenseMatrix,
    pub train_labels: Vec<usize>,
    pub val_h: DenseMatrix,
    pub val_labels: Vec<usize>,
    /// `None` when the environment term is disabled (`α = 0`).
    pub envs: Option<EnvironmentSet>,
}

/// Propagates tasks `t` and `t − 1` and builds the environments.
pub fn prepare(seq: &TaskSequence, splits: &SplitMask, t: usize, cfg: &CondenseConfig) -> Result<Prepared> {
    cfg.validate()?;
    if t == 0 || t > seq.len() {
        return Err(Error::Precondition(format!("task {t} outside 1..={}", seq.len())));
    }
    let snap = seq.snapshot(t);
    let h_t = propagate(&normalize_adjacency(&snap.adjacency), &snap.features, cfg.k)?;
    let train = splits.train(t);
    let val = splits.val(t);
    let envs = if cfg.alpha > 0.0 {
        let prev = if t > 1 {
            let p = seq.snapshot(t - 1);
            Some(propagate(&normalize_adjacency(&p.adjacency), &p.features, cfg.k)?)
        } else {
            None
        };
        let seed = derive_seed(cfg.seed, ENV_STREAM);
        Some(build_environments(
            snap,
            &h_t,
            prev.as_ref(),
            train,
            cfg.k,
            &cfg.env_config(),
            seed,
        )?)
    } else {
        None
    };
    Ok(Prepared {
        task_index: t,
        num_classes: snap.num_classes,
        num_nodes: snap.num_nodes(),
        train_h: h_t.select_rows(train),
        train_labels: train.iter().map(|&i| snap.labels[i]).collect(),
        val_h: h_t.select_rows(val),
        val_labels: val.iter().map(|&i| snap.labels[i]).collect(),
        envs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub iteration: usize,
    pub accuracy: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CondenseReport {
    pub iterations: usize,
    pub evaluations: Vec<Evaluation>,
    pub best_val_accuracy: Option<f64>,
    pub losses: Vec<f64>,
    pub iter_secs: Vec<f64>,
    pub used_fallback: bool,
    pub stopped_early: bool,
}

impl CondenseReport {
    pub fn mean_iter_secs(&self) -> f64 {
        if self.iter_secs.is_empty() {
            0.0
        } else {
            self.iter_secs.iter().sum::<f64>() / self.iter_secs.len() as f64
        }
    }
}

fn readout_accuracy(
    theta: &RelayParams,
    x: &DenseMatrix,
    yp: &DenseMatrix,
    lambda: f64,
    h: &DenseMatrix,
    labels: &[usize],
) -> Result<f64> {
    let w = krr_fit(&transform(theta, x)?, yp, lambda)?;
    let pred = transform(theta, h)?.matmul(&w)?.argmax_rows();
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Runs the optimization on prepared inputs.
pub fn condense_prepared(prep: &Prepared, cfg: &CondenseConfig) -> Result<(CondensedGraph, CondenseReport)> {
    cfg.validate()?;
    let n_prime = condensed_size(cfg.ratio, prep.num_nodes);
    let (mut x, labels) = init_condensed(&prep.train_h, &prep.train_labels, prep.num_classes, n_prime, cfg.seed)?;
    let yp = DenseMatrix::one_hot(&labels, prep.num_classes);
    let targets = DenseMatrix::one_hot(&prep.train_labels, prep.num_classes);
    let env_mats: &[DenseMatrix] = prep.envs.as_ref().map_or(&[], |e| &e.envs);
    let d = prep.train_h.cols();

    let mut report = CondenseReport {
        used_fallback: prep.envs.as_ref().is_some_and(|e| e.used_fallback),
        ..Default::default()
    };
    let mut log_tau = 0.0;
    let mut adam = AdamState::new(x.rows(), x.cols());
    let mut best = (x.clone(), log_tau);
    let mut best_acc: Option<f64> = None;
    let mut stale = 0;
    let can_eval = !prep.val_labels.is_empty();

    for it in 0..cfg.max_iters {
        let start = Instant::now();
        let theta = sample_relay(derive_seed(cfg.seed, RELAY_STREAM + it as u64), d, cfg.width)?;
        if it == 0 && can_eval {
            let acc = readout_accuracy(&theta, &x, &yp, cfg.lambda, &prep.val_h, &prep.val_labels)?;
            best_acc = Some(acc);
            report.evaluations.push(Evaluation {
                iteration: 0,
                accuracy: acc,
                best_so_far: acc,
            });
        }

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let lt = tape.leaf(DenseMatrix::scalar(log_tau));
        let inputs = LossInputs {
            base: &prep.train_h,
            targets: &targets,
            envs: env_mats,
            condensed_targets: &yp,
            theta: &theta,
            lambda: cfg.lambda,
            alpha: cfg.alpha,
            gamma: cfg.gamma,
        };
        let terms = total_loss(&mut tape, xv, lt, &inputs)?;
        let loss = tape.scalar_value(terms.total);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {it} (base {}, env {}, penalty {})",
                terms.base_ce, terms.env_ce, terms.penalty
            )));
        }
        let mut grads = tape.backward(terms.total)?;
        let gx = grads.take(xv).expect("leaf gradient");
        let gt = grads.take(lt).expect("leaf gradient").get(0, 0);
        if !gx.is_finite() || !gt.is_finite() {
            return Err(Error::NonFinite(format!("gradient at iteration {it}")));
        }
        drop(tape);
        adam.update(&mut x, &mut log_tau, &gx, gt, cfg.lr)?;
        report.losses.push(loss);
        report.iterations = it + 1;

        let done = it + 1 == cfg.max_iters;
        if can_eval && ((it + 1) % cfg.eval_every == 0 || done) {
            let acc = readout_accuracy(&theta, &x, &yp, cfg.lambda, &prep.val_h, &prep.val_labels)?;
            if best_acc.is_none_or(|b| acc > b) {
                best_acc = Some(acc);
                best = (x.clone(), log_tau);
                stale = 0;
            } else {
                stale += 1;
            }
            report.evaluations.push(Evaluation {
                iteration: it + 1,
                accuracy: acc,
                best_so_far: best_acc.expect("set above"),
            });
        } else if !can_eval {
            best = (x.clone(), log_tau);
        }
        report.iter_secs.push(start.elapsed().as_secs_f64());
        if cfg.patience > 0 && stale >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    report.best_val_accuracy = best_acc;

    let (features, log_tau) = best;
    let graph = CondensedGraph {
        features,
        labels,
        meta: CondensedMeta {
            task_index: prep.task_index,
            seed: cfg.seed,
            config_hash: cfg.fingerprint(),
            ratio: cfg.ratio,
            compress_ratio: n_prime as f64 / prep.num_nodes as f64,
            num_nodes: n_prime,
            original_nodes: prep.num_nodes,
            num_classes: prep.num_classes,
            log_tau,
            iterations: report.iterations,
            best_val_accuracy: best_acc,
        },
    };
    Ok((graph, report))
}

/// Condenses task `t` (1-based) of `seq`.
pub fn condense(
    seq: &TaskSequence,
    splits: &SplitMask,
    t: usize,
    cfg: &CondenseConfig,
) -> Result<(CondensedGraph, CondenseReport)> {
    let prep = prepare(seq, splits, t, cfg)?;
    condense_prepared(&prep, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_examples() {
        assert_eq!(class_quotas(&[50, 30, 20], 10).unwrap(), vec![5, 3, 2]);
        assert_eq!(class_quotas(&[98, 1, 1], 3).unwrap(), vec![1, 1, 1]);
        assert!(class_quotas(&[5, 5, 5], 2).is_err());
        assert!(class_quotas(&[5, 0], 4).is_err());
    }

    #[test]
    fn quota_ties_go_to_lower_class() {
        assert_eq!(class_quotas(&[1, 1, 1], 4).unwrap(), vec![2, 1, 1]);
    }

    #[test]
    fn ce_fixtures() {
        let half = -(0.5f64.ln());
        let lp = DenseMatrix::from_rows(&[vec![-half, -half], vec![0.0, -50.0]]);
        let y = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!((ce_loss(&lp, &y, &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(ce_loss(&lp.select_rows(&[1]), &y.select_rows(&[1]), &[0]).unwrap(), 0.0);
        let lp = DenseMatrix::from_rows(&[vec![-half, -half], vec![0.0, -50.0]]);
        assert!((ce_loss(&lp, &y, &[0, 1]).unwrap() - 0.346574).abs() < 1e-6);
        assert!(ce_loss(&lp, &y, &[]).is_err());
    }

    #[test]
    fn irm_fixtures() {
        let y = DenseMatrix::from_rows(&[vec![1.0, 0.0]]);
        assert_eq!(irm_penalty(&DenseMatrix::zeros(1, 2), &y, 1.0, &[0]).unwrap(), 0.0);
        let z = DenseMatrix::from_rows(&[vec![1.0, -1.0]]);
        assert!((irm_grad_w(&z, &y, 1.0, &[0]).unwrap() + 0.238406).abs() < 1e-6);
        assert!((irm_penalty(&z, &y, 1.0, &[0]).unwrap() - 0.056837).abs() < 1e-6);
    }

    #[test]
    fn tape_losses_match_plain() {
        let z = DenseMatrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.5]]);
        let y = DenseMatrix::one_hot(&[2, 0], 3);
        let lt = 0.4f64;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let tv = tape.leaf(DenseMatrix::scalar(lt));
        let ce = ce_tape(&mut tape, zv, tv, &y).unwrap();
        let pen = irm_penalty_tape(&mut tape, zv, tv, &y).unwrap();
        let lp = log_softmax_rows(&z.scale((-lt).exp()));
        assert!((tape.scalar_value(ce) - ce_loss(&lp, &y, &[0, 1]).unwrap()).abs() < 1e-14);
        let want = irm_penalty(&z, &y, lt.exp(), &[0, 1]).unwrap();
        assert!((tape.scalar_value(pen) - want).abs() < 1e-14);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut x = DenseMatrix::from_rows(&[vec![1.0, -1.0]]);
        let mut lt = 0.0;
        let mut st = AdamState::new(1, 2);
        st.update(&mut x, &mut lt, &DenseMatrix::from_rows(&[vec![2.0, -0.5]]), 3.0, 0.1)
            .unwrap();
        assert!((x.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((x.get(0, 1) + 0.9).abs() < 1e-7);
        assert!((lt + 0.1).abs() < 1e-7);
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = CondenseConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.alpha = 0.3;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
