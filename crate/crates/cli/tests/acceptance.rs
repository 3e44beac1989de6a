//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p opengc-cli --test acceptance` (add `--release`
//! for realistic timings).

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use opengc::condense::{
    ce_loss, condense, condense_prepared, irm_grad_w, irm_penalty, prepare, total_loss, CondenseConfig, LossInputs,
};
use opengc::config::{RunConfig, SPLIT_RATIOS};
use opengc::datagen::{generate_drift_sbm, DriftSbmParams, Preset};
use opengc::graph::{make_splits, normalize_adjacency, Adjacency};
use opengc::linalg::{grad_check, log_softmax_rows};
use opengc::openset::{
    calibrate_threshold, evaluate_sequence, fit_weibull, is_flagged, map_score, train_downstream, train_linear,
    PerformanceMatrix, WeibullModel,
};
use opengc::propagation::{propagate, propagate_condensed};
use opengc::relay::{krr_fit, sample_relay};
use opengc::{DenseMatrix, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Weibull};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Option<f64>, fn() -> Outcome);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-scale..scale))
}

fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

/// Gauss-Jordan with partial pivoting.
fn gauss_solve(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (n, m) = (a.rows(), b.cols());
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        aug[col].iter_mut().for_each(|v| *v /= p);
        let pivot = aug[col].clone();
        for (r, row) in aug.iter_mut().enumerate() {
            let f = row[col];
            if r != col && f != 0.0 {
                row.iter_mut().zip(&pivot).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    DenseMatrix::from_fn(n, m, |i, j| aug[i][n + j])
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_krr() -> Outcome {
    let mut r = rng(1);
    let lambda = 5e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(1..=64);
        let b = r.random_range(1..=128);
        let c = r.random_range(1..=6);
        let p = uniform(&mut r, n, b, 1.0).map(|v| v.max(0.0));
        let y = uniform(&mut r, n, c, 1.0);
        let dual = krr_fit(&p, &y, lambda).map_err(|e| e.to_string())?;
        let pt = p.transpose();
        let mut gram = naive_matmul(&pt, &p);
        for i in 0..b {
            gram.set(i, i, gram.get(i, i) + lambda);
        }
        let primal = gauss_solve(&gram, &naive_matmul(&pt, &y));
        worst = worst.max(dual.max_abs_diff(&primal) / primal.max_abs().max(1e-300));
    }
    check(
        worst < 1e-8,
        format!("max relative difference {worst:.2e} over 50 instances (tol 1e-8)"),
    )
}

fn c2_gradients() -> Outcome {
    let mut r = rng(2);
    let (n, np, d, c, b) = (60, 6, 8, 3, 16);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let base = uniform(&mut r, n, d, 1.0);
    let envs: Vec<DenseMatrix> = (0..2).map(|_| base.add(&uniform(&mut r, n, d, 0.2)).unwrap()).collect();
    let targets = DenseMatrix::one_hot(&labels, c);
    let yp = DenseMatrix::one_hot(&(0..np).map(|i| i % c).collect::<Vec<_>>(), c);
    let xp = uniform(&mut r, np, d, 1.0);
    let theta = sample_relay(2, d, b).map_err(|e| e.to_string())?;
    let inputs = LossInputs {
        base: &base,
        targets: &targets,
        envs: &envs,
        condensed_targets: &yp,
        theta: &theta,
        lambda: 5e-3,
        alpha: 0.5,
        gamma: 0.5,
    };
    let lt0 = 0.2;
    let rx = grad_check(
        |tape: &mut Tape, x| {
            let lt = tape.constant(DenseMatrix::scalar(lt0));
            Ok(total_loss(tape, x, lt, &inputs)?.total)
        },
        &xp,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let rt = grad_check(
        |tape: &mut Tape, lt| {
            let x = tape.constant(xp.clone());
            Ok(total_loss(tape, x, lt, &inputs)?.total)
        },
        &DenseMatrix::scalar(lt0),
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    check(
        rx.max_rel_error < 1e-4 && rt.max_rel_error < 1e-4,
        format!(
            "max relative error X' {:.2e}, log tau {:.2e} (tol 1e-4)",
            rx.max_rel_error, rt.max_rel_error
        ),
    )
}

fn scaled_ce(z: &DenseMatrix, y: &DenseMatrix, tau: f64, w: f64) -> f64 {
    let mask: Vec<usize> = (0..z.rows()).collect();
    ce_loss(&log_softmax_rows(&z.scale(w / tau)), y, &mask).unwrap()
}

fn c3_irm() -> Outcome {
    let mut r = rng(3);
    let h = 1e-6;
    let mut cases = vec![(
        DenseMatrix::from_rows(&[vec![1.0, -1.0]]),
        DenseMatrix::from_rows(&[vec![1.0, 0.0]]),
        1.0,
    )];
    for _ in 0..99 {
        let n = r.random_range(1..10);
        let c = r.random_range(2..6);
        let z = uniform(&mut r, n, c, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        cases.push((z, DenseMatrix::one_hot(&labels, c), r.random_range(0.3..3.0)));
    }
    let mut worst: f64 = 0.0;
    for (z, y, tau) in &cases {
        let mask: Vec<usize> = (0..z.rows()).collect();
        let fd = (scaled_ce(z, y, *tau, 1.0 + h) - scaled_ce(z, y, *tau, 1.0 - h)) / (2.0 * h);
        let g = irm_grad_w(z, y, *tau, &mask).map_err(|e| e.to_string())?;
        let p = irm_penalty(z, y, *tau, &mask).map_err(|e| e.to_string())?;
        worst = worst.max((g - fd).abs()).max((p - fd * fd).abs());
    }
    let hand = irm_penalty(&cases[0].0, &cases[0].1, 1.0, &[0]).map_err(|e| e.to_string())?;
    check(
        worst < 1e-6 && (hand - 0.056837).abs() < 1e-6,
        format!("max abs error {worst:.2e} over 100 instances; hand case {hand:.6} (want 0.056837)"),
    )
}

fn c4_propagation() -> Outcome {
    let mut r = rng(4);
    let n = 100;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = r.random_range(50..400);
        let edges: Vec<(usize, usize)> = (0..m).map(|_| (r.random_range(0..n), r.random_range(0..n))).collect();
        let adj = Adjacency::from_edges(n, &edges).map_err(|e| e.to_string())?;
        let mut a = DenseMatrix::identity(n);
        for &(i, j) in &edges {
            if i != j {
                a.set(i, j, 1.0);
                a.set(j, i, 1.0);
            }
        }
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
        let dense = DenseMatrix::from_fn(n, n, |i, j| a.get(i, j) / (deg[i] * deg[j]).sqrt());
        let x = uniform(&mut r, n, 6, 1.0);
        let norm = normalize_adjacency(&adj);
        let mut want = x.clone();
        for k in 1..=3 {
            want = naive_matmul(&dense, &want);
            let got = propagate(&norm, &x, k).map_err(|e| e.to_string())?;
            worst = worst.max(got.max_abs_diff(&want));
        }
    }
    let x = uniform(&mut r, 7, 5, 1.0);
    let identical = propagate_condensed(&x)
        .data()
        .iter()
        .zip(x.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        worst < 1e-12 && identical,
        format!(
            "max abs difference {worst:.2e} on 20 graphs, K=1..3; condensed shortcut bitwise identity: {identical}"
        ),
    )
}

fn c5_map() -> Outcome {
    let m =
        PerformanceMatrix::from_upper(&[vec![1.0, 0.5, 0.5], vec![1.0, 0.5], vec![1.0]]).map_err(|e| e.to_string())?;
    let v = map_score(&m).map_err(|e| e.to_string())?;
    check(
        (v - 29.0 / 36.0).abs() < 1e-12,
        format!("mAP {v:.12} vs 29/36 = {:.12}", 29.0 / 36.0),
    )
}

fn c6_threshold() -> Outcome {
    let mut r = rng(6);
    let mut parts = Vec::new();
    let mut ok = true;
    for n in [10usize, 25, 1000] {
        let mut ids: Vec<u32> = (0..1_000_000).collect();
        ids.shuffle(&mut r);
        let conf: Vec<f64> = ids[..n].iter().map(|&i| i as f64 / 1e6).collect();
        let t = calibrate_threshold(&conf, 0.10).map_err(|e| e.to_string())?;
        let flagged = conf.iter().filter(|&&c| is_flagged(c, t)).count();
        let want = (n as f64 * 0.10).floor() as usize;
        ok &= flagged == want;
        parts.push(format!("n={n}: {flagged}/{want}"));
    }
    check(ok, parts.join(", "))
}

fn c7_weibull() -> Outcome {
    let mut r = rng(7);
    let dist = Weibull::new(1.0, 2.0).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = (0..1000).map(|_| dist.sample(&mut r)).collect();
    let m = fit_weibull(&xs, xs.len()).map_err(|e| e.to_string())?;
    // grid search over (shape, scale), refined around the best cell
    let ll = |k: f64, l: f64| {
        WeibullModel {
            shape: k,
            scale: l,
            tail_size: xs.len(),
        }
        .log_likelihood(&xs)
    };
    let (mut k0, mut l0, mut sk, mut sl) = (2.5, 1.5, 2.4, 1.4);
    for _ in 0..6 {
        let mut best = (f64::NEG_INFINITY, k0, l0);
        for a in 0..=40 {
            for b in 0..=40 {
                let k = k0 - sk + 2.0 * sk * a as f64 / 40.0;
                let l = l0 - sl + 2.0 * sl * b as f64 / 40.0;
                if k > 0.0 && l > 0.0 {
                    let v = ll(k, l);
                    if v > best.0 {
                        best = (v, k, l);
                    }
                }
            }
        }
        (k0, l0) = (best.1, best.2);
        sk /= 8.0;
        sl /= 8.0;
    }
    let within_truth = (m.shape - 2.0).abs() <= 0.2 && (m.scale - 1.0).abs() <= 0.1;
    let agree = (m.shape - k0).abs() / k0 <= 0.01 && (m.scale - l0).abs() / l0 <= 0.01;
    check(
        within_truth && agree,
        format!(
            "MLE shape {:.4} scale {:.4}; grid oracle shape {k0:.4} scale {l0:.4}",
            m.shape, m.scale
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_opengc"))
        .args(args)
        .env("OPENGC_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`opengc {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn pipeline_run(data: &Path, out: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let d = data.to_str().unwrap();
    let cond = out.join("cond");
    let metrics = out.join("metrics.json");
    run_cli(&[
        "condense",
        "--data",
        d,
        "--task",
        "2",
        "--seed",
        "3",
        "--out",
        cond.to_str().unwrap(),
    ])?;
    run_cli(&[
        "evaluate",
        "--data",
        d,
        "--seed",
        "3",
        "--openset",
        "openmax",
        "--out",
        metrics.to_str().unwrap(),
    ])?;
    let mut files = Vec::new();
    for p in [
        cond.join("condensed.bin"),
        cond.join("labels.tsv"),
        cond.join("meta.json"),
        metrics,
    ] {
        files.push((
            p.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&p).map_err(|e| e.to_string())?,
        ));
    }
    Ok(files)
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    run_cli(&[
        "generate",
        "--preset",
        "drift",
        "--seed",
        "1",
        "--out",
        data.to_str().unwrap(),
    ])?;
    let a = pipeline_run(&data, &dir.path().join("a"))?;
    let b = pipeline_run(&data, &dir.path().join("b"))?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let bytes: usize = a.iter().map(|f| f.1.len()).sum();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts ({bytes} bytes) byte-identical across two runs", a.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn closed_set_accuracy(
    clf: &opengc::openset::LinearClassifier,
    h: &DenseMatrix,
    nodes: &[usize],
    labels: &[usize],
) -> f64 {
    let pred = clf.predict(&h.select_rows(nodes)).unwrap();
    pred.iter().zip(nodes).filter(|(p, &n)| **p == labels[n]).count() as f64 / nodes.len() as f64
}

fn c9_end_to_end() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.set("seed", "7").map_err(|e| e.to_string())?;
    let seq = generate_drift_sbm(&Preset::PaperAnalog.params(7)).map_err(|e| e.to_string())?;
    let splits = make_splits(&seq, SPLIT_RATIOS, cfg.seeds().split_seed).map_err(|e| e.to_string())?;
    let t = seq.len();
    let snap = seq.snapshot(t);
    let h =
        propagate(&normalize_adjacency(&snap.adjacency), &snap.features, cfg.condense.k).map_err(|e| e.to_string())?;
    let train = splits.train(t);
    let test = splits.test(t);
    let ytrain: Vec<usize> = train.iter().map(|&i| snap.labels[i]).collect();
    let whole = train_linear(&h.select_rows(train), &ytrain, snap.num_classes, &cfg.train_config())
        .map_err(|e| e.to_string())?;
    let (cond, _) = condense(&seq, &splits, t, &cfg.condense).map_err(|e| e.to_string())?;
    let clf = train_downstream(&cond, &cfg.train_config()).map_err(|e| e.to_string())?;
    let (aw, ac) = (
        closed_set_accuracy(&whole, &h, test, &snap.labels),
        closed_set_accuracy(&clf, &h, test, &snap.labels),
    );
    check(
        ac >= 0.9 * aw,
        format!(
            "task {t}: {} nodes condensed to {}; whole {aw:.4}, condensed {ac:.4}, ratio {:.3} (need 0.900)",
            snap.num_nodes(),
            cond.num_nodes(),
            ac / aw
        ),
    )
}

fn c10_irm_ablation() -> Outcome {
    let seeds = 0..5u64;
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in seeds {
        let seq = generate_drift_sbm(&Preset::Drift.params(seed)).map_err(|e| e.to_string())?;
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).map_err(|e| e.to_string())?;
        let splits = make_splits(&seq, SPLIT_RATIOS, cfg.seeds().split_seed).map_err(|e| e.to_string())?;
        for (alpha, sink) in [(cfg.condense.alpha, &mut with), (0.0, &mut without)] {
            let mut ec = cfg.eval_config();
            ec.condense.alpha = alpha;
            let (m, _) = evaluate_sequence(&seq, &splits, &ec).map_err(|e| e.to_string())?;
            sink.push(map_score(&m).map_err(|e| e.to_string())?);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    check(
        a >= b,
        format!(
            "mean mAP over 5 seeds: alpha=0.5 {a:.4}, alpha=0 {b:.4}, difference {:+.4}",
            a - b
        ),
    )
}

fn c11_scaling() -> Outcome {
    let n_prime = 50;
    let mut medians = Vec::new();
    for total in [2500usize, 5000, 10000] {
        let half = total / 2;
        // constant expected degree as the graph grows
        let params = DriftSbmParams {
            tasks: 2,
            classes_per_task: 2,
            nodes_per_task: vec![half, half],
            p_intra: 12.0 / half as f64,
            p_inter: 1.2 / half as f64,
            attach: 6.0 / half as f64,
            seed: 11,
            ..Default::default()
        };
        let seq = generate_drift_sbm(&params).map_err(|e| e.to_string())?;
        let splits = make_splits(&seq, SPLIT_RATIOS, 5).map_err(|e| e.to_string())?;
        let cfg = CondenseConfig {
            ratio: n_prime as f64 / total as f64,
            max_iters: 9,
            eval_every: 1000,
            patience: 0,
            ..Default::default()
        };
        let prep = prepare(&seq, &splits, 2, &cfg).map_err(|e| e.to_string())?;
        let (g, rep) = condense_prepared(&prep, &cfg).map_err(|e| e.to_string())?;
        if g.num_nodes() != n_prime {
            return Err(format!("N' = {} at N = {total}", g.num_nodes()));
        }
        // the final iteration also evaluates; leave it out
        let mut secs = rep.iter_secs[..rep.iter_secs.len() - 1].to_vec();
        secs.sort_by(f64::total_cmp);
        medians.push((total, secs[secs.len() / 2]));
    }
    let ratios: Vec<f64> = medians.windows(2).map(|w| w[1].1 / w[0].1).collect();
    let detail = medians
        .iter()
        .map(|(n, s)| format!("N={n}: {:.1} ms", s * 1e3))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        ratios.iter().all(|&r| r <= 2.5),
        format!(
            "{detail}; growth {} (limit 2.5)",
            ratios.iter().map(|r| format!("{r:.2}x")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("KRR primal/dual equivalence", Some(5.0), c1_krr),
        ("gradient fidelity of the total loss", Some(30.0), c2_gradients),
        ("IRM penalty closed form", None, c3_irm),
        ("propagation vs dense power", None, c4_propagation),
        ("mAP fixture", None, c5_map),
        ("threshold calibration count", None, c6_threshold),
        ("Weibull MLE recovery", Some(5.0), c7_weibull),
        ("CLI determinism", None, c8_determinism),
        ("end-to-end condensed vs whole graph", Some(300.0), c9_end_to_end),
        ("IRM directional ablation", None, c10_irm_ablation),
        ("per-iteration time scaling", None, c11_scaling),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if let Some(b) = budget {
            if secs > *b {
                pass = false;
                detail.push_str(&format!("; runtime over the {b:.0} s budget"));
            }
        }
        failed += usize::from(!pass);
        println!(
            "{} {:>2} {name}: {detail} [{secs:.2} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
