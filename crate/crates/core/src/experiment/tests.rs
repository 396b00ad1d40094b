use super::*;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task = TaskSpec { grid: 4, d_visual: 6, concepts: 2, segments: 2, labels: 2, min_segment: 2, max_segment: 3, noise: 0.1, train: 8, test: 4 };
    cfg.model = ModelConfig { layers: 2, heads: 2, d_visual: 6, d_model: 8, vocab: 8, grid: 4, max_text: 4 };
    cfg.train.epochs = 1;
    cfg.train.lr = 0.01;
    cfg.train.batch_size = 4;
    cfg.train.monitor_samples = 2;
    cfg.eval.threads = 1;
    cfg
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = small();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    let partial = ExperimentConfig::from_json(r#"{"train": {"lambda": 0.5}}"#).unwrap();
    assert_eq!(partial.train.lambda, 0.5);
    assert_eq!(partial.train.lr, TrainConfig::default().lr);
    assert!(matches!(ExperimentConfig::from_json("{\"seed\": \"x\"}"), Err(Error::Config(_))));
}

#[test]
fn sub_seeds_differ() {
    let cfg = small();
    let seeds: Vec<u64> = [Stream::Data, Stream::Base, Stream::Adapters, Stream::WeakLabels, Stream::Shuffle]
        .into_iter()
        .map(|s| cfg.sub_seed(s))
        .collect();
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), seeds.len());
}

#[test]
fn sweep_points_adjust_one_knob() {
    let cfg = small();
    assert_eq!(SweepParam::parse("λ").unwrap(), SweepParam::Lambda);
    assert!(SweepParam::parse("Q").is_err());
    let r0 = SweepParam::R.apply(&cfg, 0.0).unwrap();
    assert_eq!((r0.train.heads, r0.train.lambda), (Some(0), 0.0));
    assert_eq!(SweepParam::B.apply(&cfg, 1.0).unwrap().train.adapters.top_b, 1);
    assert_eq!(SweepParam::K.apply(&cfg, 2.0).unwrap().train.top_k, 2);
    assert!(SweepParam::K.apply(&cfg, 1.5).is_err());
}

#[test]
fn single_value_sweep_equals_a_direct_run() {
    let cfg = small();
    let prepared = prepare(&cfg).unwrap();
    let direct = run(&cfg, &prepared, |_| {}).unwrap();
    let rows = sweep(&cfg, &prepared, SweepParam::Lambda, &[cfg.train.lambda], false).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].report, direct.report);
    assert_eq!(rows[0].loss, direct.final_loss());
    assert!(sweep(&cfg, &prepared, SweepParam::Lambda, &[], false).is_err());
}

#[test]
fn zero_heads_and_zero_lambda_train_identically() {
    let cfg = small();
    let prepared = prepare(&cfg).unwrap();
    let by_r = sweep(&cfg, &prepared, SweepParam::R, &[0.0], false).unwrap();
    let by_lambda = sweep(&cfg, &prepared, SweepParam::Lambda, &[0.0], true).unwrap();
    assert_eq!(by_r[0].loss, by_lambda[0].loss);
    assert_eq!(by_r[0].report, by_lambda[0].report);
    let csv = sweep_csv(&[by_r[0].clone(), by_lambda[0].clone()]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert!(lines[1].starts_with("R,0,") && lines[2].starts_with("lambda,0,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 7));
}

#[test]
fn larger_k_sweep_rebuilds_weak_labels() {
    let mut cfg = small();
    cfg.train.top_k = 1;
    let prepared = prepare(&cfg).unwrap();
    assert!(prepared.cache.records.iter().all(|r| r.segments.len() == 1));
    let rows = sweep(&cfg, &prepared, SweepParam::K, &[1.0, 3.0], true).unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0].loss.l_align, rows[1].loss.l_align);
    let serial = sweep(&cfg, &prepared, SweepParam::K, &[1.0, 3.0], false).unwrap();
    assert_eq!(sweep_csv(&serial), sweep_csv(&rows));
}
