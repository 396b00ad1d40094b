use super::*;
use crate::adapters::AdapterConfig;
use crate::data::{generate_dataset, TaskSpec};

fn task() -> TaskSpec {
    TaskSpec { grid: 4, d_visual: 6, concepts: 2, segments: 2, labels: 2, min_segment: 2, max_segment: 3, noise: 0.1, train: 2, test: 6 }
}

fn model(t: &TaskSpec) -> ModelConfig {
    t.model_config(&ModelConfig { layers: 2, heads: 2, d_visual: 6, d_model: 8, vocab: 8, grid: 4, max_text: 4 })
}

#[test]
fn zero_query_key_weights_give_the_hand_computed_report() {
    let t = TaskSpec { grid: 2, segments: 1, min_segment: 1, max_segment: 1, ..task() };
    let cfg = ModelConfig { layers: 1, heads: 1, d_visual: 6, d_model: 4, vocab: 8, grid: 2, max_text: 4 };
    let mut base = BaseModel::new(cfg.clone(), 1).unwrap();
    for name in ["base.layers.0.wq", "base.layers.0.wk"] {
        base.param_mut(name).unwrap().data_mut().fill(0.0);
    }
    let data = generate_dataset(&TaskSpec { test: 1, ..t }, 2).unwrap();
    let sample = &data.test[0];
    let adapters = AdapterSet::new(AdapterConfig::default(), &cfg, 3).unwrap();
    // The emitting row sees 4 visual and 2 prompt keys with equal scores.
    let expected_map = 1.0 / 6.0;
    for (tau, coverage) in [(0.15, 1.0), (0.2, 0.0)] {
        let cfg = EvalConfig { tau, threads: 1, refined_heads: Some(1) };
        let report = evaluate(&base, &adapters, &data.test, &cfg).unwrap();
        assert_eq!(report.coverage, coverage);
        assert!((report.intensity - expected_map).abs() < 1e-15);
        let refined = report.refined.unwrap();
        assert!((refined.intensity - expected_map).abs() < 1e-15);
        let logits = base.forward(&sample.visual().unwrap(), &sample.prompt, &sample.answer, None).unwrap().logits;
        let predicted = crate::model::argmax(logits.row(0));
        assert_eq!(report.records[0].predicted, vec![predicted]);
        assert_eq!(report.accuracy, f64::from(u8::from(predicted == sample.answer[0])));
    }
}

#[test]
fn untrained_report_is_finite_and_deterministic() {
    let t = task();
    let cfg = model(&t);
    let base = BaseModel::new(cfg.clone(), 4).unwrap();
    let mut adapters = AdapterSet::new(AdapterConfig::default(), &cfg, 5).unwrap();
    adapters.randomize(6, 0.2);
    let data = generate_dataset(&t, 7).unwrap();
    let serial = evaluate(&base, &adapters, &data.test, &EvalConfig { threads: 1, ..EvalConfig::default() }).unwrap();
    let parallel = evaluate(&base, &adapters, &data.test, &EvalConfig { threads: 4, ..EvalConfig::default() }).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.to_json().unwrap(), parallel.to_json().unwrap());
    assert_eq!(serial.schema_version, REPORT_SCHEMA_VERSION);
    assert_eq!(serial.samples, 6);
    assert!(serial.records.windows(2).all(|w| w[0].id < w[1].id));
    for v in [serial.coverage, serial.intensity, serial.accuracy] {
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }
    let mean = serial.records.iter().map(|r| r.intensity).sum::<f64>() / 6.0;
    assert!((serial.intensity - mean).abs() < 1e-15);
}

#[test]
fn incompatible_inputs_are_rejected() {
    let t = task();
    let cfg = model(&t);
    let base = BaseModel::new(cfg.clone(), 1).unwrap();
    let adapters = AdapterSet::new(AdapterConfig::default(), &cfg, 2).unwrap();
    let data = generate_dataset(&TaskSpec { grid: 5, ..t.clone() }, 3).unwrap();
    let err = evaluate(&base, &adapters, &data.test, &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)), "{err}");

    let mut wide = generate_dataset(&t, 3).unwrap().test;
    wide[0].answer = vec![cfg.vocab];
    assert!(matches!(check_compatible(&cfg, &wide[0]), Err(Error::Compatibility(_))));

    let other = AdapterSet::new(AdapterConfig::default(), &ModelConfig { layers: 1, ..cfg.clone() }, 2).unwrap();
    let ok = generate_dataset(&t, 3).unwrap().test;
    assert!(matches!(evaluate(&base, &other, &ok, &EvalConfig::default()), Err(Error::Compatibility(_))));
    assert!(matches!(evaluate(&base, &adapters, &[], &EvalConfig::default()), Err(Error::Metric(_))));
}

#[test]
fn heatmaps_are_written_per_kind() {
    let t = task();
    let cfg = model(&t);
    let base = BaseModel::new(cfg.clone(), 1).unwrap();
    let data = generate_dataset(&t, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_heatmaps(dir.path(), &base, None, &data.test[..2], Some(2)).unwrap();
    assert_eq!(files.len(), 12);
    let roi = std::fs::read_to_string(dir.path().join(format!("{}.roi.csv", data.test[0].id))).unwrap();
    let ones = roi.split([',', '\n']).filter(|v| v.trim() == "1e0").count();
    assert_eq!(ones, data.test[0].roi.len());
}
