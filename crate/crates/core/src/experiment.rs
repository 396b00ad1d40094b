//! End-to-end runs: data, weak labels, training, evaluation and sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::{Ablation, AdapterSet};
use crate::data::{generate_dataset, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MetricsReport};
use crate::model::{BaseModel, ModelConfig};
use crate::training::{labels_for, train, EpochLog, LossBreakdown, TrainConfig};
use crate::weaklabels::{build_cache, synthetic_oracle_backend, SyntheticProposer, WeakLabelCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakLabelConfig {
    /// Embedding noise of the synthetic oracle backend.
    pub noise: f64,
    /// Random background candidates per image.
    pub background: usize,
    pub patch_px: usize,
}

impl Default for WeakLabelConfig {
    fn default() -> Self {
        Self { noise: 0.1, background: 4, patch_px: 4 }
    }
}

/// Everything one run needs. Sub-seeds for data, base weights, adapters,
/// weak labels and shuffling are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weak_labels: WeakLabelConfig,
    pub eval: EvalConfig,
    /// Test samples exported as heatmaps after training.
    pub heatmaps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            weak_labels: WeakLabelConfig::default(),
            eval: EvalConfig::default(),
            heatmaps: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Data,
    Base,
    Adapters,
    WeakLabels,
    Shuffle,
}

impl ExperimentConfig {
    pub fn sub_seed(&self, stream: Stream) -> u64 {
        // Distinct odd multipliers keep the streams apart for every seed.
        let k: u64 = match stream {
            Stream::Data => 0,
            Stream::Base => 1,
            Stream::Adapters => 2,
            Stream::WeakLabels => 3,
            Stream::Shuffle => 4,
        };
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    /// Model geometry with the task's grid, feature width and vocabulary.
    pub fn model_config(&self) -> ModelConfig {
        self.task.model_config(&self.model)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.train.adapters = self.train.adapters.with_ablation(ablation);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let model = self.model_config();
        model.validate()?;
        self.train.adapters.validate(&model)?;
        self.train.validate(model.total_heads())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }
}

/// Dataset, frozen base model and weak labels shared by runs on one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub base: BaseModel,
    pub cache: WeakLabelCache,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.task, cfg.sub_seed(Stream::Data))?;
    let base = BaseModel::new(cfg.model_config(), cfg.sub_seed(Stream::Base))?;
    let cache = weak_labels(cfg, &dataset)?;
    Ok(Prepared { dataset, base, cache })
}

pub fn weak_labels(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<WeakLabelCache> {
    let seed = cfg.sub_seed(Stream::WeakLabels);
    let proposer = SyntheticProposer { background: cfg.weak_labels.background, patch_px: cfg.weak_labels.patch_px, seed };
    let backend = synthetic_oracle_backend(&cfg.task, cfg.weak_labels.noise, seed)?;
    build_cache(&dataset.train, &proposer, &backend, cfg.train.top_k)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub adapters: AdapterSet,
    pub log: Vec<EpochLog>,
    pub report: MetricsReport,
}

impl RunResult {
    pub fn final_loss(&self) -> LossBreakdown {
        self.log.last().map(|e| e.loss.clone()).unwrap_or_default()
    }
}

/// Trains fresh adapters on the prepared data and evaluates them on the
/// test split.
pub fn run(cfg: &ExperimentConfig, prepared: &Prepared, on_epoch: impl FnMut(&EpochLog)) -> Result<RunResult> {
    cfg.validate()?;
    let model = cfg.model_config();
    if prepared.base.config != model {
        return Err(Error::Compatibility("prepared base model does not match the configuration".into()));
    }
    let adapters = AdapterSet::new(cfg.train.adapters.clone(), &model, cfg.sub_seed(Stream::Adapters))?;
    let needed = cfg.train.alignment_active(model.total_heads());
    let train_set = &prepared.dataset.train;
    // Weak labels are selected with the configured K; a cache built for a
    // larger K is cut down to its top entries.
    let mut labels = labels_for(train_set, Some(&prepared.cache), needed)?;
    for sets in labels.iter_mut() {
        sets.truncate(cfg.train.top_k);
    }
    let train_cfg = TrainConfig { seed: cfg.sub_seed(Stream::Shuffle), ..cfg.train.clone() };
    let outcome = train(&prepared.base, adapters, train_set, &labels, &prepared.dataset.test, &train_cfg, &cfg.eval, on_epoch)?;
    let report = evaluate(&prepared.base, &outcome.adapters, &prepared.dataset.test, &cfg.eval)?;
    Ok(RunResult { adapters: outcome.adapters, log: outcome.log, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Weak-label segments per sample.
    K,
    /// Selected heads.
    R,
    Lambda,
    /// Experts kept per visual token.
    B,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "K" | "k" | "topk" => Ok(Self::K),
            "R" | "r" | "heads" => Ok(Self::R),
            "lambda" | "λ" => Ok(Self::Lambda),
            "B" | "b" | "top-b" => Ok(Self::B),
            _ => Err(Error::Config(format!("unknown sweep parameter {s}; expected K, R, lambda or B"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::K => "K",
            Self::R => "R",
            Self::Lambda => "lambda",
            Self::B => "B",
        }
    }

    /// The configuration of one sweep point.
    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} takes whole numbers, got {value}", self.label())))
            }
        };
        let mut cfg = base.clone();
        match self {
            Self::K => cfg.train.top_k = count()?,
            Self::R => {
                let r = count()?;
                cfg.train.heads = Some(r);
                if r == 0 {
                    // No selected heads means no alignment term at all.
                    cfg.train.lambda = 0.0;
                }
            }
            Self::Lambda => cfg.train.lambda = value,
            Self::B => cfg.train.adapters.top_b = count()?,
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub report: MetricsReport,
    /// Final-epoch training means.
    pub loss: LossBreakdown,
}

pub const SWEEP_HEADER: &str = "param,value,coverage,intensity,accuracy,L_llm,L_align";

/// One run per value, all on the same prepared data and seeds. With
/// `parallel` the runs share threads; rows are identical either way.
pub fn sweep(
    base: &ExperimentConfig,
    prepared: &Prepared,
    param: SweepParam,
    values: &[f64],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let point = |value: f64| -> Result<SweepRow> {
        let cfg = param.apply(base, value)?;
        let rebuilt = if param == SweepParam::K && cfg.train.top_k > base.train.top_k {
            Some(Prepared { cache: weak_labels(&cfg, &prepared.dataset)?, ..prepared.clone() })
        } else {
            None
        };
        let result = run(&cfg, rebuilt.as_ref().unwrap_or(prepared), |_| {})?;
        Ok(SweepRow { param, value, loss: result.final_loss(), report: result.report })
    };
    if !parallel {
        return values.iter().map(|&v| point(v)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = values.iter().map(|&v| scope.spawn(move || point(v))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.param.label(),
            r.value,
            r.report.coverage,
            r.report.intensity,
            r.report.accuracy,
            r.loss.l_llm,
            r.loss.l_align
        )
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests;
