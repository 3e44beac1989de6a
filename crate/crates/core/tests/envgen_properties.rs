use opengc::condense::CondenseConfig;
use opengc::datagen::{generate_drift_sbm, Preset};
use opengc::envgen::{build_environments, generate_environments, residuals, TransplantInputs};
use opengc::graph::{make_splits, normalize_adjacency};
use opengc::propagation::propagate;

fn setup() -> (opengc::TaskSequence, opengc::SplitMask) {
    let seq = generate_drift_sbm(&Preset::Drift.params(5)).unwrap();
    let splits = make_splits(&seq, (0.6, 0.2, 0.2), 11).unwrap();
    (seq, splits)
}

fn embed(s: &opengc::GraphSnapshot) -> opengc::DenseMatrix {
    propagate(&normalize_adjacency(&s.adjacency), &s.features, 2).unwrap()
}

#[test]
fn perturbations_follow_donor_residuals_with_bounded_size() {
    let (seq, splits) = setup();
    let (snap, prev) = (seq.snapshot(2), seq.snapshot(1));
    let (h_t, h_prev) = (embed(snap), embed(prev));
    let degrees: Vec<usize> = (0..snap.num_nodes()).map(|i| snap.degree(i)).collect();
    let train = splits.train(2);
    let inp = TransplantInputs {
        h_t: &h_t,
        h_prev: &h_prev,
        labels: &snap.labels,
        degrees: &degrees,
        train_nodes: train,
    };
    let mut cfg = CondenseConfig::default().env_config();
    cfg.eta = 0.8;
    let set = generate_environments(&inp, &cfg, 3).unwrap();
    let table = residuals(&h_t, &h_prev).unwrap();
    assert_eq!(set.env_count(), cfg.env_count);

    let mut moved = 0;
    for env in &set.envs {
        for (row, &i) in train.iter().enumerate() {
            let diff: Vec<f64> = env.row(row).iter().zip(h_t.row(i)).map(|(a, b)| a - b).collect();
            let eps = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(eps <= cfg.eta + 1e-12);
            if eps < 1e-9 {
                continue;
            }
            moved += 1;
            // the shift is ±eps times a unit residual of some same-class donor
            let found = train.iter().any(|&j| {
                j < h_prev.rows() && table.valid[j] && snap.labels[j] == snap.labels[i] && {
                    let r = table.rows.row(j);
                    let dot: f64 = diff.iter().zip(r).map(|(a, b)| a * b).sum();
                    (dot.abs() - eps).abs() < 1e-9 * eps.max(1.0)
                }
            });
            assert!(found, "row {row} is not a donor transplant");
        }
    }
    assert!(moved > 0);

    let again = generate_environments(&inp, &cfg, 3).unwrap();
    assert_eq!(set, again);
    let other = generate_environments(&inp, &cfg, 4).unwrap();
    assert_ne!(set.envs, other.envs);
}

#[test]
fn zero_eta_leaves_embeddings_unchanged() {
    let (seq, splits) = setup();
    let snap = seq.snapshot(3);
    let h_t = embed(snap);
    let h_prev = embed(seq.snapshot(2));
    let mut cfg = CondenseConfig::default().env_config();
    cfg.eta = 0.0;
    let set = build_environments(snap, &h_t, Some(&h_prev), splits.train(3), 2, &cfg, 1).unwrap();
    assert!(!set.used_fallback);
    for env in &set.envs {
        assert_eq!(env, &set.base);
    }
}

#[test]
fn first_task_uses_dropout_fallback() {
    let (seq, splits) = setup();
    let snap = seq.snapshot(1);
    let h = embed(snap);
    let cfg = CondenseConfig::default().env_config();
    let set = build_environments(snap, &h, None, splits.train(1), 2, &cfg, 9).unwrap();
    assert!(set.used_fallback);
    assert_eq!(set.base, h.select_rows(splits.train(1)));
    assert!(set.envs.iter().all(|e| e.shape() == set.base.shape() && e != &set.base));
}
