use twotower_core::data::{build_splits, make_batches, synth_generate, SplitConfig, SplitDataset, SynthConfig};
use twotower_core::drift::{drift_experiment, DriftConfig};
use twotower_core::error::Error;
use twotower_core::sampling::StrategyKind;
use twotower_core::trainer::{train, train_with_observer, StopReason, TrainConfig, Trainer};

fn dataset(n_users: usize, n_items: usize) -> SplitDataset {
    clustered(n_users, n_items, 8)
}

fn clustered(n_users: usize, n_items: usize, n_clusters: usize) -> SplitDataset {
    let synth = synth_generate(&SynthConfig {
        n_users,
        n_items,
        n_clusters,
        interactions_per_user: 20,
        seed: 4,
    })
    .unwrap();
    build_splits(&synth.interactions, &SplitConfig::default()).unwrap()
}

fn small(kind: StrategyKind) -> TrainConfig {
    let mut c = TrainConfig::new(kind);
    c.batch_size = 32;
    c.dim = 16;
    c.hidden = 32;
    c.max_iterations = 60;
    c.eval_every = 20;
    c
}

#[test]
fn bank_is_untouched_through_warmup_then_fills_fifo() {
    let ds = dataset(200, 300);
    let mut cfg = small(StrategyKind::Cbns);
    cfg.strategy.bank_capacity = 96;
    cfg.strategy.warmup_iterations = Some(7);
    let mut inserted = 0;
    train_with_observer(&cfg, &ds, |trainer, stats| {
        let batch = stats.pool_size - stats.bank_rows;
        if stats.iteration <= 7 {
            assert_eq!(stats.bank_rows, 0, "bank read at iteration {}", stats.iteration);
            assert_eq!(stats.bank_len, 0);
        } else {
            assert_eq!(stats.bank_rows, inserted.min(96), "iteration {}", stats.iteration);
            inserted += batch;
            assert_eq!(stats.bank_len, inserted.min(96));
            assert_eq!(trainer.bank().unwrap().len(), stats.bank_len);
        }
        Ok(())
    })
    .unwrap();
    assert!(inserted > 96);
}

#[test]
fn empty_bank_cbns_follows_in_batch_bit_for_bit() {
    let ds = dataset(200, 300);
    let mut cbns = small(StrategyKind::Cbns);
    cbns.strategy.bank_capacity = 0;
    cbns.strategy.warmup_iterations = Some(0);
    let plain = small(StrategyKind::InBatch);
    let mut a = Trainer::new(cbns, &ds).unwrap();
    let mut b = Trainer::new(plain, &ds).unwrap();
    assert_eq!(a.params(), b.params());
    let mut done = 0;
    for epoch in 0.. {
        for batch in make_batches(&ds, 32, 9, epoch, 20).filter(|b| b.len() >= 2) {
            let sa = a.step(&batch).unwrap();
            let sb = b.step(&batch).unwrap();
            assert_eq!(sa.loss.to_bits(), sb.loss.to_bits());
            assert_eq!(a.params(), b.params(), "diverged at iteration {}", sa.iteration);
            done += 1;
            if done == 50 {
                return;
            }
        }
    }
}

#[test]
fn patience_one_stops_at_first_non_improvement() {
    let ds = dataset(200, 300);
    let mut cfg = small(StrategyKind::InBatch);
    cfg.patience = 1;
    cfg.eval_every = 1;
    cfg.lr = 0.05;
    cfg.max_iterations = 500;
    let report = train(&cfg, &ds).unwrap();
    assert_eq!(report.stop, StopReason::Patience);
    let (last, earlier) = report.records.split_last().unwrap();
    for w in earlier.windows(2) {
        assert!(w[1].recall50 > w[0].recall50);
    }
    assert!(last.recall50 <= earlier.last().unwrap().recall50);
    assert_eq!(report.best_iteration, Some(earlier.last().unwrap().iteration));
}

#[test]
fn identical_seeds_reproduce_the_run() {
    let ds = dataset(200, 300);
    for kind in StrategyKind::ALL {
        let mut cfg = small(kind);
        cfg.strategy.bank_capacity = 64;
        cfg.strategy.n_global = 40;
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        let strip = |r: &twotower_core::trainer::RunReport| {
            r.records.iter().map(|e| (e.iteration, e.recall20, e.ndcg20, e.recall50, e.ndcg50)).collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b), "{kind}");
        assert_eq!(a.steps, b.steps, "{kind}");
        assert_eq!(a.best_params, b.best_params, "{kind}");
    }
}

#[test]
fn different_seeds_diverge() {
    let ds = dataset(200, 300);
    let mut a = small(StrategyKind::InBatch);
    a.max_iterations = 5;
    let mut b = a.clone();
    b.seed = 1;
    assert_ne!(train(&a, &ds).unwrap().best_params, train(&b, &ds).unwrap().best_params);
}

#[test]
fn training_learns_the_clusters() {
    let ds = clustered(400, 1000, 20);
    let mut cfg = small(StrategyKind::InBatch);
    cfg.max_iterations = 400;
    cfg.eval_every = 100;
    cfg.lr = 3e-3;
    let report = train(&cfg, &ds).unwrap();
    let best = report.best_record().unwrap();
    let chance = 50.0 / ds.n_items() as f64;
    assert!(best.recall50 >= 5.0 * chance, "recall@50 {} vs chance {chance}", best.recall50);

    let losses: Vec<f64> = report.steps.iter().map(|s| s.loss).collect();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn frozen_parameters_do_not_drift() {
    let ds = dataset(200, 300);
    let mut cfg = small(StrategyKind::InBatch);
    cfg.lr = 0.0;
    cfg.max_iterations = 15;
    let drift = DriftConfig {
        probe_size: 50,
        ..DriftConfig::default()
    };
    let run = drift_experiment(&cfg, &ds, &drift).unwrap();
    assert!(!run.records.is_empty());
    assert!(run.records.iter().all(|r| r.drift == 0.0));
    // One record per lag from iteration delta onwards.
    assert_eq!(run.records.len(), 15 + 11 + 6);
}

#[test]
fn drift_lags_must_be_positive() {
    let ds = dataset(200, 300);
    let cfg = small(StrategyKind::InBatch);
    let drift = DriftConfig {
        deltas: vec![0, 1],
        ..DriftConfig::default()
    };
    assert!(matches!(drift_experiment(&cfg, &ds, &drift), Err(Error::Config(_))));
}

#[test]
fn tiny_time_budget_stops_the_run() {
    let ds = dataset(200, 300);
    let mut cfg = small(StrategyKind::InBatch);
    cfg.max_iterations = 1_000_000;
    cfg.time_budget = Some(std::time::Duration::from_millis(1));
    let report = train(&cfg, &ds).unwrap();
    assert_eq!(report.stop, StopReason::TimeBudget);
}
