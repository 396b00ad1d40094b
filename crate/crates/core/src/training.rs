//! Objective and training loop.
//!
//! Per sample, one teacher-forced pass supplies both the answer logits and
//! the attention maps. The language-model loss is the mean cross-entropy over
//! answer tokens. The alignment loss takes the R heads with the highest
//! visual ratio, averages their query-mean visual attention into a refined
//! map, and sums over weak-label segments the squared shortfall of the
//! segment's share of that map's mass:
//! `L_align = Σ_s (1 − Σ_{c∈s} M̃_c / Σ_c M̃_c)²`.
//! The total is `L_LLM + λ·L_align`. Only adapter parameters are trained.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterSet};
use crate::attention::{refined_map_var, select_heads, visual_ratios, HeadSelection, QuerySelector};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MetricsReport};
use crate::model::BaseModel;
use crate::numerics::{cross_entropy, finite_diff_check_many, GradCheck, Tape, Tensor, Var};
use crate::params::Bound;
use crate::weaklabels::WeakLabelCache;

/// Fine-tuning epochs and λ per downstream dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetProfile {
    pub name: &'static str,
    pub epochs: usize,
    pub lambda: f64,
    /// Large, diverse datasets double the expert counts.
    pub large: bool,
}

impl DatasetProfile {
    pub const ALL: [DatasetProfile; 7] = [
        DatasetProfile { name: "slake", epochs: 6, lambda: 0.1, large: true },
        DatasetProfile { name: "vqa-rad", epochs: 9, lambda: 0.06, large: false },
        DatasetProfile { name: "pathvqa", epochs: 3, lambda: 0.02, large: true },
        DatasetProfile { name: "iu-xray-vqa", epochs: 6, lambda: 0.12, large: false },
        DatasetProfile { name: "omnimedvqa", epochs: 3, lambda: 0.03, large: true },
        DatasetProfile { name: "iu-xray-report", epochs: 12, lambda: 0.08, large: false },
        DatasetProfile { name: "mimic-cxr-report", epochs: 12, lambda: 0.05, large: false },
    ];

    pub fn find(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown dataset profile {name}")))
    }

    /// `(key experts, query experts, top-B)` for this profile.
    pub fn experts(&self) -> (usize, usize, usize) {
        if self.large {
            (16, 8, AdapterConfig::top_b_for(16))
        } else {
            (8, 4, AdapterConfig::top_b_for(8))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Top-R recomputed on every sample's live forward pass.
    #[default]
    PerExample,
    /// Top-R fixed once from ratios averaged over a calibration pass before
    /// training.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Weak-label segments per sample.
    pub top_k: usize,
    /// Selected heads; `None` means an eighth of all heads, rounded up.
    pub heads: Option<usize>,
    pub selection: SelectionMode,
    pub adapters: AdapterConfig,
    pub seed: u64,
    /// Held-out samples scored after every epoch; 0 disables the monitor.
    pub monitor_samples: usize,
    /// Gradient workers per batch; 0 uses every available core. Results do
    /// not depend on this.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epochs: 6,
            lr: 2e-4,
            batch_size: 8,
            weight_decay: 0.01,
            top_k: 4,
            heads: None,
            selection: SelectionMode::PerExample,
            adapters: AdapterConfig::default(),
            seed: 0,
            monitor_samples: 100,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_profile(profile: &DatasetProfile) -> Self {
        Self { epochs: profile.epochs, lambda: profile.lambda, ..Self::default() }
    }

    /// `⌈total_heads / 8⌉` unless set explicitly.
    pub fn resolved_heads(&self, total_heads: usize) -> usize {
        self.heads.unwrap_or(total_heads.div_ceil(8))
    }

    /// λ actually applied: alignment is off when either λ or R is zero.
    pub fn alignment_active(&self, total_heads: usize) -> bool {
        self.lambda > 0.0 && self.resolved_heads(total_heads) > 0
    }

    pub fn validate(&self, total_heads: usize) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("λ must be finite and nonnegative, got {}", self.lambda)));
        }
        if self.lr.is_nan() || self.lr < 0.0 || self.batch_size == 0 || self.top_k == 0 {
            return Err(Error::Config("learning rate must be nonnegative; batch size and K positive".into()));
        }
        let r = self.resolved_heads(total_heads);
        if r > total_heads {
            return Err(Error::Parameter(format!("R = {r} exceeds {total_heads} heads")));
        }
        if self.lambda > 0.0 && r == 0 {
            return Err(Error::Config("alignment requested (λ > 0) but R = 0 disables it".into()));
        }
        Ok(())
    }
}

/// Loss values of one sample, or their means over many.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_llm: f64,
    pub l_align: f64,
    pub l_total: f64,
    /// Share of refined-map mass inside each weak-label segment.
    pub fractions: Vec<f64>,
}

/// `Σ_s (1 − mass(s)/mass)²` on a value map.
pub fn alignment_loss(map: &Tensor, segments: &[Vec<usize>]) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let (loss, _) = alignment_loss_var(&mut tape, m, segments)?;
    Ok(tape.value(loss).item())
}

/// Differentiable alignment loss; also returns each segment's mass share.
pub fn alignment_loss_var(tape: &mut Tape, map: Var, segments: &[Vec<usize>]) -> Result<(Var, Vec<f64>)> {
    let m = tape.value(map);
    let n = m.len();
    if m.data().iter().any(|v| *v < 0.0) {
        return Err(Error::DegenerateAttention("attention map has negative entries".into()));
    }
    if let Some(bad) = segments.iter().flatten().find(|&&c| c >= n) {
        return Err(Error::Index(format!("label token {bad} outside {n} visual tokens")));
    }
    let total = tape.sum(map);
    if tape.value(total).item() <= 0.0 {
        return Err(Error::DegenerateAttention("attention map has no mass".into()));
    }
    let mut loss = tape.constant(Tensor::scalar(0.0));
    let mut fractions = Vec::with_capacity(segments.len());
    for seg in segments {
        let inside = tape.index_sum(map, seg)?;
        let frac = tape.div(inside, total)?;
        fractions.push(tape.value(frac).item());
        let short = tape.affine(frac, -1.0, 1.0);
        let sq = tape.square(short);
        loss = tape.add(loss, sq)?;
    }
    Ok((loss, fractions))
}

/// Mean cross-entropy of the answer tokens.
pub fn lm_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    cross_entropy(logits, targets)
}

/// Objective settings shared by every sample of a run.
#[derive(Debug, Clone)]
pub struct Objective {
    pub lambda: f64,
    pub heads: usize,
    /// Fixed selection; `None` selects per sample.
    pub fixed: Option<HeadSelection>,
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig, total_heads: usize) -> Self {
        Self { lambda: cfg.lambda, heads: cfg.resolved_heads(total_heads), fixed: None }
    }

    fn active(&self) -> bool {
        self.lambda > 0.0
    }
}

/// Builds `L_LLM + λ·L_align` for one sample on the tape.
pub fn objective_on_tape(
    tape: &mut Tape,
    base: &BaseModel,
    base_vars: &Bound,
    adapters: &AdapterSet,
    adapter_vars: &Bound,
    sample: &SyntheticSample,
    labels: &[Vec<usize>],
    obj: &Objective,
) -> Result<(Var, LossBreakdown, Option<HeadSelection>)> {
    if obj.active() && obj.heads == 0 {
        return Err(Error::Config("alignment requested (λ > 0) but R = 0 disables it".into()));
    }
    if obj.active() && labels.is_empty() {
        return Err(Error::Config(format!("{}: alignment requested without weak labels", sample.id)));
    }
    let visual = sample.visual()?;
    let pass = base.pass(tape, base_vars, Some((adapters, adapter_vars)), &visual, &sample.prompt, &sample.answer)?;
    let lm = tape.cross_entropy(pass.logits, &sample.answer)?;
    let l_llm = tape.value(lm).item();
    if !obj.active() {
        return Ok((lm, LossBreakdown { l_llm, l_align: 0.0, l_total: l_llm, fractions: Vec::new() }, None));
    }
    let rows = QuerySelector::AnswerPositions.rows(&pass.spans)?;
    let sel = match &obj.fixed {
        Some(sel) => sel.clone(),
        None => {
            let ratios = visual_ratios(&pass.attention_stack(tape), &QuerySelector::AnswerPositions)?;
            select_heads(&ratios, obj.heads)?
        }
    };
    let refined = refined_map_var(tape, &pass.attn, &pass.spans, &rows, &sel)?;
    let (align, fractions) = alignment_loss_var(tape, refined, labels)?;
    let l_align = tape.value(align).item();
    let weighted = tape.scale(align, obj.lambda);
    let total = tape.add(lm, weighted)?;
    let l_total = tape.value(total).item();
    Ok((total, LossBreakdown { l_llm, l_align, l_total, fractions }, Some(sel)))
}

/// Value-level loss breakdown for one sample.
pub fn total_loss(
    base: &BaseModel,
    adapters: &AdapterSet,
    sample: &SyntheticSample,
    labels: &[Vec<usize>],
    obj: &Objective,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bv = base.store.bind(&mut tape, false);
    let av = adapters.store.bind(&mut tape, false);
    Ok(objective_on_tape(&mut tape, base, &bv, adapters, &av, sample, labels, obj)?.1)
}

/// Central-difference check of the objective's gradient with respect to
/// every adapter tensor.
pub fn objective_gradcheck(
    base: &BaseModel,
    adapters: &AdapterSet,
    sample: &SyntheticSample,
    labels: &[Vec<usize>],
    obj: &Objective,
    step: f64,
) -> Result<GradCheck> {
    finite_diff_check_many(
        |tape, vars| {
            let bv = base.store.bind(tape, false);
            let av = Bound::from_vars(vars.to_vec());
            Ok(objective_on_tape(tape, base, &bv, adapters, &av, sample, labels, obj)?.0)
        },
        &adapters.store.values(),
        step,
    )
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per-parameter weight-decay switch.
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(adapters: &AdapterSet, lr: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = adapters.store.iter().map(|p| p.value.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            decay: adapters.store.ids().map(|id| !adapters.is_gate_bias(id)).collect(),
        }
    }

    /// Applies one update from gradients listed in store order.
    pub fn update(&mut self, adapters: &mut AdapterSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Parameter(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let ids: Vec<_> = adapters.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = adapters.store.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            if g.len() != p.len() {
                return Err(Error::Parameter(format!("gradient {k} has {} values for {}", g.len(), p.len())));
            }
            let wd = if self.decay[k] { self.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + wd * p[i];
                p[i] -= self.lr * update;
            }
        }
        Ok(())
    }
}

/// Training summary of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    /// Means over the epoch's samples.
    pub loss: LossBreakdown,
    pub monitor: Option<MonitorMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorMetrics {
    pub coverage: f64,
    pub intensity: f64,
    pub accuracy: f64,
}

impl From<&MetricsReport> for MonitorMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self { coverage: r.coverage, intensity: r.intensity, accuracy: r.accuracy }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub log: Vec<EpochLog>,
    pub calibration: Option<HeadSelection>,
}

/// Weak-label token sets for every sample, in order. Missing labels are an
/// error only when alignment is active.
pub fn labels_for(samples: &[SyntheticSample], cache: Option<&WeakLabelCache>, needed: bool) -> Result<Vec<Vec<Vec<usize>>>> {
    samples
        .iter()
        .map(|s| match cache.and_then(|c| c.get(&s.id, &s.prompt_id())) {
            Some(rec) => Ok(rec.token_sets()),
            None if needed => Err(Error::Config(format!("no weak labels cached for {}", s.id))),
            None => Ok(Vec::new()),
        })
        .collect()
}

/// Mean visual ratios over `samples` with the given adapters, then top-R.
pub fn calibrate_heads(base: &BaseModel, adapters: &AdapterSet, samples: &[SyntheticSample], r: usize) -> Result<HeadSelection> {
    if samples.is_empty() {
        return Err(Error::Selection("calibration needs at least one sample".into()));
    }
    let (l, h) = (base.config.layers, base.config.heads);
    let mut acc = vec![vec![0.0; h]; l];
    for s in samples {
        let out = base.forward(&s.visual()?, &s.prompt, &s.answer, Some(adapters))?;
        let ratios = visual_ratios(&out.attention, &QuerySelector::AnswerPositions)?;
        for (a, r) in acc.iter_mut().flatten().zip(ratios.iter().flatten()) {
            *a += r / samples.len() as f64;
        }
    }
    select_heads(&acc, r)
}

type SampleGrad = (Vec<Vec<f64>>, LossBreakdown);

/// Gradient of one sample's objective with respect to every adapter tensor.
pub fn sample_gradient(
    base: &BaseModel,
    adapters: &AdapterSet,
    sample: &SyntheticSample,
    labels: &[Vec<usize>],
    obj: &Objective,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let bv = base.store.bind(&mut tape, false);
    let av = adapters.store.bind(&mut tape, true);
    let (loss, parts, _) = objective_on_tape(&mut tape, base, &bv, adapters, &av, sample, labels, obj)?;
    if !parts.l_total.is_finite() {
        return Ok((Vec::new(), parts));
    }
    tape.backward(loss)?;
    let grads = av
        .vars()
        .iter()
        .zip(adapters.store.iter())
        .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![0.0; p.value.len()], Tensor::into_data))
        .collect();
    Ok((grads, parts))
}

fn batch_gradients(
    base: &BaseModel,
    adapters: &AdapterSet,
    samples: &[SyntheticSample],
    labels: &[Vec<Vec<usize>>],
    batch: &[usize],
    obj: &Objective,
    threads: usize,
) -> Result<Vec<SampleGrad>> {
    let one = |&i: &usize| sample_gradient(base, adapters, &samples[i], &labels[i], obj);
    if threads <= 1 || batch.len() == 1 {
        return batch.iter().map(one).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch.chunks(chunk).map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>())).collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().expect("gradient worker panicked")?);
        }
        Ok(out)
    })
}

/// Trains the adapters on `train`; the base model stays frozen.
pub fn train(
    base: &BaseModel,
    initial: AdapterSet,
    train: &[SyntheticSample],
    labels: &[Vec<Vec<usize>>],
    monitor: &[SyntheticSample],
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let total_heads = base.config.total_heads();
    cfg.validate(total_heads)?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if labels.len() != train.len() {
        return Err(Error::Config(format!("{} label sets for {} samples", labels.len(), train.len())));
    }
    let mut adapters = initial;
    let mut obj = Objective::from_config(cfg, total_heads);
    let calibration = if obj.active() && cfg.selection == SelectionMode::Calibrated {
        let take = train.len().min(cfg.monitor_samples.max(1));
        let sel = calibrate_heads(base, &adapters, &train[..take], obj.heads)?;
        obj.fixed = Some(sel.clone());
        Some(sel)
    } else {
        None
    };
    let mut opt = AdamW::new(&adapters, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let monitor = &monitor[..monitor.len().min(cfg.monitor_samples)];
    let mut log = Vec::with_capacity(cfg.epochs);
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![LossBreakdown::default(); train.len()];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = adapters.store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            // Reduction follows batch order whatever the thread count.
            for (&i, (sample_grads, parts)) in batch.iter().zip(batch_gradients(base, &adapters, train, labels, batch, &obj, threads)?) {
                if !parts.l_total.is_finite() {
                    return Err(Error::Diverged { step: opt.step as usize, reason: format!("loss {} on {}", parts.l_total, train[i].id) });
                }
                for (acc, g) in grads.iter_mut().zip(sample_grads) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
                losses[i] = parts;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step: opt.step as usize, reason: "non-finite gradient".into() });
            }
            opt.update(&mut adapters, &grads)?;
        }
        // Means in sample order, so they do not depend on the shuffle.
        let n = train.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
        let loss = LossBreakdown { l_llm: mean(|l| l.l_llm), l_align: mean(|l| l.l_align), l_total: mean(|l| l.l_total), fractions: Vec::new() };
        let monitor_metrics = if monitor.is_empty() {
            None
        } else {
            Some(MonitorMetrics::from(&evaluate(base, &adapters, monitor, eval_cfg)?))
        };
        let entry = EpochLog { epoch: epoch + 1, steps: opt.step, loss, monitor: monitor_metrics };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { adapters, log, calibration })
}

#[cfg(test)]
mod tests;
