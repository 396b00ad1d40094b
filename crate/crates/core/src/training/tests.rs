use super::*;
use crate::data::{generate_dataset, TaskSpec};
use crate::model::ModelConfig;

fn tiny_task() -> TaskSpec {
    TaskSpec {
        grid: 4,
        d_visual: 6,
        concepts: 2,
        segments: 2,
        labels: 2,
        min_segment: 2,
        max_segment: 3,
        noise: 0.1,
        train: 12,
        test: 4,
    }
}

fn tiny_model(task: &TaskSpec) -> ModelConfig {
    task.model_config(&ModelConfig { layers: 2, heads: 2, d_visual: 6, d_model: 8, vocab: 8, grid: 4, max_text: 4 })
}

fn setup(cfg: &TrainConfig) -> (BaseModel, AdapterSet, Vec<SyntheticSample>, Vec<Vec<Vec<usize>>>) {
    let task = tiny_task();
    let data = generate_dataset(&task, 5).unwrap();
    let model = tiny_model(&task);
    let base = BaseModel::new(model.clone(), 6).unwrap();
    let mut adapters = AdapterSet::new(cfg.adapters.clone(), &model, 7).unwrap();
    adapters.randomize(8, 0.3);
    // The planted region plus one distractor blob as weak labels.
    let labels = data.train.iter().map(|s| vec![s.roi.clone(), s.segments[(s.queried + 1) % 2].tokens.clone()]).collect();
    (base, adapters, data.train, labels)
}

#[test]
fn alignment_loss_hand_values() {
    let m = Tensor::vector(vec![0.0, 0.7, 0.3, 0.0]);
    assert!(alignment_loss(&m, &[vec![1, 2]]).unwrap().abs() < 1e-12);
    let uniform = Tensor::full(&[4], 0.25);
    assert!((alignment_loss(&uniform, &[vec![0, 1]]).unwrap() - 0.25).abs() < 1e-12);
    let tenths = Tensor::full(&[10], 0.1);
    let loss = alignment_loss(&tenths, &[(0..8).collect(), vec![7, 8, 9]]).unwrap();
    assert!((loss - 0.53).abs() < 1e-12);
}

#[test]
fn alignment_loss_errors_and_bounds() {
    assert!(matches!(alignment_loss(&Tensor::zeros(&[3]), &[vec![0]]), Err(Error::DegenerateAttention(_))));
    assert!(matches!(alignment_loss(&Tensor::full(&[3], 1.0), &[vec![3]]), Err(Error::Index(_))));
    // No mass inside any segment reaches the upper bound |S|.
    let m = Tensor::vector(vec![0.0, 0.0, 1.0]);
    assert!((alignment_loss(&m, &[vec![0], vec![1]]).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn alignment_loss_gradient_passes_central_differences() {
    let segments = vec![vec![0, 2], vec![1, 2, 3]];
    let err = crate::numerics::finite_diff_check(
        |tape, m| Ok(alignment_loss_var(tape, m, &segments)?.0),
        &Tensor::new(vec![1, 5], vec![0.1, 0.4, 0.2, 0.05, 0.25]).unwrap(),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn lm_loss_limits() {
    let uniform = Tensor::zeros(&[2, 5]);
    assert!((lm_loss(&uniform, &[1, 3]).unwrap() - 5f64.ln()).abs() < 1e-12);
    let sharp = Tensor::from_rows(&[vec![0.0, 60.0, 0.0]]).unwrap();
    assert!(lm_loss(&sharp, &[1]).unwrap() < 1e-20);
}

#[test]
fn profiles_and_config_rules() {
    let slake = DatasetProfile::find("SLAKE").unwrap();
    let cfg = TrainConfig::from_profile(&slake);
    assert_eq!((cfg.epochs, cfg.lambda), (6, 0.1));
    assert_eq!(slake.experts(), (16, 8, 3));
    assert_eq!(DatasetProfile::find("vqa-rad").unwrap().experts(), (8, 4, 2));
    assert!(DatasetProfile::find("unknown").is_err());

    assert_eq!(TrainConfig::default().resolved_heads(16), 2);
    assert_eq!(TrainConfig::default().resolved_heads(1), 1);
    let off = TrainConfig { heads: Some(0), ..TrainConfig::default() };
    assert!(matches!(off.validate(16), Err(Error::Config(_))));
    assert!(TrainConfig { lambda: 0.0, ..off }.validate(16).is_ok());
    assert!(TrainConfig { lambda: -0.1, ..TrainConfig::default() }.validate(16).is_err());
    assert!(TrainConfig { heads: Some(17), ..TrainConfig::default() }.validate(16).is_err());
}

#[test]
fn total_loss_composes_both_terms() {
    let cfg = TrainConfig::default();
    let (base, adapters, samples, labels) = setup(&cfg);
    let s = &samples[0];
    let with = total_loss(&base, &adapters, s, &labels[0], &Objective { lambda: 0.1, heads: 2, fixed: None }).unwrap();
    assert!((with.l_total - (with.l_llm + 0.1 * with.l_align)).abs() < 1e-12);
    assert!(with.l_align > 0.0 && with.l_align <= 2.0);
    assert_eq!(with.fractions.len(), 2);

    let without = total_loss(&base, &adapters, s, &labels[0], &Objective { lambda: 0.0, heads: 2, fixed: None }).unwrap();
    assert_eq!(without.l_total, without.l_llm);
    assert_eq!(without.l_llm, with.l_llm);
    assert_eq!(without.l_align, 0.0);

    let out = base.forward(&s.visual().unwrap(), &s.prompt, &s.answer, Some(&adapters)).unwrap();
    assert_eq!(without.l_llm, lm_loss(&out.logits, &s.answer).unwrap());

    let r0 = Objective { lambda: 0.1, heads: 0, fixed: None };
    assert!(matches!(total_loss(&base, &adapters, s, &labels[0], &r0), Err(Error::Config(_))));
    let unlabeled = Objective { lambda: 0.1, heads: 2, fixed: None };
    assert!(matches!(total_loss(&base, &adapters, s, &[], &unlabeled), Err(Error::Config(_))));
}

#[test]
fn lambda_weighting_arithmetic() {
    // L_total = L_LLM + λ·L_align as assembled on the tape.
    let mut tape = Tape::new();
    let lm = tape.constant(Tensor::scalar(2.0));
    let align = tape.constant(Tensor::scalar(0.25));
    let weighted = tape.scale(align, 0.1);
    let total = tape.add(lm, weighted).unwrap();
    assert!((tape.value(total).item() - 2.025).abs() < 1e-15);
}

#[test]
fn fresh_adapters_reproduce_base_losses() {
    let cfg = TrainConfig { lambda: 0.0, ..TrainConfig::default() };
    let task = tiny_task();
    let data = generate_dataset(&task, 1).unwrap();
    let model = tiny_model(&task);
    let base = BaseModel::new(model.clone(), 2).unwrap();
    let adapters = AdapterSet::new(cfg.adapters.clone(), &model, 3).unwrap();
    let obj = Objective::from_config(&cfg, model.total_heads());
    for s in &data.train[..4] {
        let with = total_loss(&base, &adapters, s, &[], &obj).unwrap();
        let plain = base.forward(&s.visual().unwrap(), &s.prompt, &s.answer, None).unwrap();
        assert_eq!(with.l_llm, lm_loss(&plain.logits, &s.answer).unwrap());
    }
}

#[test]
fn objective_gradient_covers_every_adapter_tensor() {
    let task = TaskSpec { grid: 2, min_segment: 1, max_segment: 1, segments: 1, ..tiny_task() };
    let model = ModelConfig { layers: 1, heads: 1, d_visual: 6, d_model: 4, vocab: 8, grid: 2, max_text: 4 };
    let data = generate_dataset(&TaskSpec { train: 2, test: 1, ..task }, 3).unwrap();
    let mut base = BaseModel::new(model.clone(), 4).unwrap();
    // Larger query/key weights keep attention away from uniform.
    for name in ["base.layers.0.wq", "base.layers.0.wk"] {
        let w = base.param_mut(name).unwrap();
        w.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    }
    let adapter_cfg = AdapterConfig { lora_rank: 2, expert_rank: 1, query_experts: 2, key_experts: 3, top_b: 2, ..AdapterConfig::default() };
    let mut adapters = AdapterSet::new(adapter_cfg, &model, 5).unwrap();
    adapters.randomize(6, 0.5);
    let s = &data.train[0];
    let labels = vec![s.roi.clone(), vec![0, 1]];
    let obj = Objective { lambda: 0.7, heads: 1, fixed: None };
    let check = objective_gradcheck(&base, &adapters, s, &labels, &obj, 1e-5).unwrap();
    assert_eq!(check.per_input.len(), adapters.store.len());
    assert!(adapters.store.iter().any(|p| p.name.contains("kmoe.gate")));
    assert!(check.max_rel_err < 1e-3, "{check:?}");
}

#[test]
fn adamw_first_step_and_bias_exemption() {
    let model = tiny_model(&tiny_task());
    let mut adapters = AdapterSet::new(AdapterConfig::default(), &model, 1).unwrap();
    adapters.randomize(2, 0.5);
    let before = adapters.store.values();
    let mut opt = AdamW::new(&adapters, 0.01, 0.1);
    let grads: Vec<Vec<f64>> = before.iter().map(|t| t.data().iter().map(|v| 2.0 * v + 0.5).collect()).collect();
    opt.update(&mut adapters, &grads).unwrap();
    for (k, (id, old)) in adapters.store.ids().collect::<Vec<_>>().into_iter().zip(&before).enumerate() {
        let wd = if adapters.is_gate_bias(id) { 0.0 } else { 0.1 };
        for (i, (&new, &p)) in adapters.store.get(id).data().iter().zip(old.data()).enumerate() {
            // After one step the bias-corrected moments reduce to g and g².
            let g = grads[k][i];
            let expect = p - 0.01 * (g / (g.abs() + 1e-8) + wd * p);
            assert!((new - expect).abs() < 1e-15, "{}", adapters.store.name(id));
        }
    }
    assert!(opt.update(&mut adapters, &grads[1..]).is_err());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = TrainConfig { lr: 0.0, epochs: 3, batch_size: 4, monitor_samples: 0, ..TrainConfig::default() };
    let (base, adapters, samples, labels) = setup(&cfg);
    let before = adapters.store.values();
    let out = train(&base, adapters, &samples, &labels, &[], &cfg, &EvalConfig::default(), |_| {}).unwrap();
    assert_eq!(out.adapters.store.values(), before);
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|e| e.loss == out.log[0].loss));
    assert_eq!(out.log[2].steps, 9);
}

#[test]
fn training_is_deterministic_and_thread_count_free() {
    let cfg = TrainConfig { lr: 0.01, epochs: 2, batch_size: 5, monitor_samples: 2, ..TrainConfig::default() };
    let (base, adapters, samples, labels) = setup(&cfg);
    let eval = EvalConfig { threads: 1, ..EvalConfig::default() };
    let run = |threads| {
        let cfg = TrainConfig { threads, ..cfg.clone() };
        train(&base, adapters.clone(), &samples, &labels, &samples, &cfg, &eval, |_| {}).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(3));
    assert_ne!(a.adapters.store.values(), adapters.store.values());
    assert_eq!(a.adapters.store.values(), b.adapters.store.values());
    assert_eq!(a.adapters.store.values(), c.adapters.store.values());
    assert_eq!(a.log, c.log);
    assert!(a.log.iter().all(|e| e.monitor.is_some()));
    // Base weights are untouched; only adapters are trained.
    assert_eq!(base.store.values(), setup(&cfg).0.store.values());
}

#[test]
fn calibrated_selection_is_fixed_once() {
    let cfg = TrainConfig { selection: SelectionMode::Calibrated, epochs: 1, lr: 0.01, monitor_samples: 4, ..TrainConfig::default() };
    let (base, adapters, samples, labels) = setup(&cfg);
    let out = train(&base, adapters, &samples, &labels, &[], &cfg, &EvalConfig::default(), |_| {}).unwrap();
    let sel = out.calibration.unwrap();
    assert_eq!(sel.heads().len(), 1);
}

#[test]
fn divergence_and_missing_labels_are_reported() {
    let cfg = TrainConfig { lr: 0.01, epochs: 1, monitor_samples: 0, ..TrainConfig::default() };
    let (base, mut adapters, samples, labels) = setup(&cfg);
    let id = adapters.store.find("layers.0.lora.up.b").unwrap();
    adapters.store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&base, adapters.clone(), &samples, &labels, &[], &cfg, &EvalConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");

    assert!(labels_for(&samples, None, true).is_err());
    assert_eq!(labels_for(&samples, None, false).unwrap(), vec![Vec::<Vec<usize>>::new(); samples.len()]);
    let short = &labels[..3];
    assert!(train(&base, adapters, &samples, short, &[], &cfg, &EvalConfig::default(), |_| {}).is_err());
}
