use opengc::condense::{condense, condense_prepared, condensed_size, prepare, CondenseConfig, CondensedGraph};
use opengc::datagen::{generate_drift_sbm, Preset};
use opengc::graph::make_splits;

fn drift(seed: u64) -> (opengc::TaskSequence, opengc::SplitMask) {
    let seq = generate_drift_sbm(&Preset::Drift.params(seed)).unwrap();
    let splits = make_splits(&seq, (0.6, 0.2, 0.2), seed + 100).unwrap();
    (seq, splits)
}

fn quick(seed: u64) -> CondenseConfig {
    CondenseConfig {
        max_iters: 12,
        eval_every: 4,
        width: 128,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_return_the_initialization() {
    let (seq, splits) = drift(1);
    let cfg = CondenseConfig {
        max_iters: 0,
        ..quick(3)
    };
    let (g, rep) = condense(&seq, &splits, 2, &cfg).unwrap();
    assert_eq!(rep.iterations, 0);
    assert_eq!(g.num_nodes(), condensed_size(cfg.ratio, seq.snapshot(2).num_nodes()));
    assert_eq!(g.meta.log_tau, 0.0);
    let counts: Vec<usize> = (0..g.num_classes())
        .map(|c| g.labels.iter().filter(|&&l| l == c).count())
        .collect();
    assert!(counts.iter().all(|&n| n >= 1));
}

#[test]
fn runs_are_deterministic_and_seed_sensitive() {
    let (seq, splits) = drift(2);
    let (a, ra) = condense(&seq, &splits, 3, &quick(5)).unwrap();
    let (b, rb) = condense(&seq, &splits, 3, &quick(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.losses, rb.losses);
    let (c, _) = condense(&seq, &splits, 3, &quick(6)).unwrap();
    assert_ne!(a.features, c.features);
}

#[test]
fn initial_loss_is_finite_across_seeds() {
    for seed in 0..20 {
        let (seq, splits) = drift(seed);
        let cfg = CondenseConfig {
            max_iters: 1,
            ..quick(seed)
        };
        let (_, rep) = condense(&seq, &splits, 1 + (seed as usize % 3), &cfg).unwrap();
        assert!(rep.losses[0].is_finite() && rep.losses[0] > 0.0, "seed {seed}");
    }
}

#[test]
fn early_stopping_tracks_a_monotone_best() {
    let (seq, splits) = drift(4);
    let cfg = CondenseConfig {
        max_iters: 40,
        eval_every: 2,
        patience: 2,
        ..quick(1)
    };
    let prep = prepare(&seq, &splits, 2, &cfg).unwrap();
    let (g, rep) = condense_prepared(&prep, &cfg).unwrap();
    assert_eq!(rep.evaluations[0].iteration, 0);
    for w in rep.evaluations.windows(2) {
        assert!(w[1].best_so_far >= w[0].best_so_far);
    }
    let best = rep.evaluations.iter().map(|e| e.accuracy).fold(0.0, f64::max);
    assert_eq!(rep.best_val_accuracy, Some(best));
    assert_eq!(g.meta.best_val_accuracy, Some(best));
    if rep.stopped_early {
        assert!(rep.iterations < cfg.max_iters);
    }
}

#[test]
fn loss_decreases_on_average() {
    let (seq, splits) = drift(3);
    let cfg = CondenseConfig {
        max_iters: 60,
        patience: 0,
        alpha: 0.0,
        ..quick(2)
    };
    let (_, rep) = condense(&seq, &splits, 1, &cfg).unwrap();
    let head: f64 = rep.losses[..10].iter().sum();
    let tail: f64 = rep.losses[rep.losses.len() - 10..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn save_and_load_round_trip() {
    let (seq, splits) = drift(6);
    let (g, _) = condense(&seq, &splits, 2, &quick(0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    let back = CondensedGraph::load(dir.path()).unwrap();
    assert_eq!(back.labels, g.labels);
    assert_eq!(back.meta, g.meta);
    // features are stored as f32
    assert!(back.features.max_abs_diff(&g.features) <= 1e-6 * g.features.max_abs().max(1.0));
    for name in ["condensed.bin", "labels.tsv", "meta.json"] {
        assert!(dir.path().join(name).exists());
    }
}

#[test]
fn rejects_bad_configuration() {
    let (seq, splits) = drift(0);
    for cfg in [
        CondenseConfig {
            env_count: 0,
            ..quick(0)
        },
        CondenseConfig {
            env_count: 6,
            ..quick(0)
        },
        CondenseConfig {
            drop_edge_rate: 1.0,
            ..quick(0)
        },
    ] {
        assert!(condense(&seq, &splits, 1, &cfg).unwrap_err().is_config());
    }
    assert!(condense(&seq, &splits, 4, &quick(0)).is_err());
}
