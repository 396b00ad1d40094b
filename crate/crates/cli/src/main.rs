//! `attnalign` command-line driver.
//!
//! Every verb takes `--seed` and `--config`. Outputs are deterministic for a
//! fixed seed and configuration; progress goes to stderr.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attnalign::adapters::Ablation;
use attnalign::checkpoint;
use attnalign::data::{generate_dataset, oracle_check, read_jsonl, write_jsonl, Dataset};
use attnalign::eval::{evaluate_with, export_heatmaps};
use attnalign::experiment::{prepare, run, sweep, sweep_csv, weak_labels, ExperimentConfig, Prepared, Stream, SweepParam};
use attnalign::model::BaseModel;
use attnalign::weaklabels::WeakLabelCache;
use attnalign::{Error, Result};

#[derive(Parser)]
#[command(name = "attnalign", version, about = "Attention-aligned adapter fine-tuning on a synthetic grounding task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; overrides the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON experiment configuration; unset fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Drop the prompt-level query mixture.
    #[arg(long, group = "ablation")]
    no_qmoe: bool,
    /// Drop the token-level key mixture.
    #[arg(long, group = "ablation")]
    no_kmoe: bool,
    /// Drop both mixtures, leaving plain low-rank adapters.
    #[arg(long, group = "ablation")]
    no_a3moe: bool,
    /// Alignment loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of selected heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Weak-label segments per sample.
    #[arg(long)]
    topk: Option<usize>,
}

impl Overrides {
    fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        let ablation = match (self.no_qmoe, self.no_kmoe, self.no_a3moe) {
            (true, _, _) => Ablation::NoQmoe,
            (_, true, _) => Ablation::NoKmoe,
            (_, _, true) => Ablation::NoA3moe,
            _ => Ablation::None,
        };
        if ablation != Ablation::None {
            cfg = cfg.with_ablation(ablation);
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
        }
        if let Some(r) = self.heads {
            cfg.train.heads = Some(r);
        }
        if let Some(k) = self.topk {
            cfg.train.top_k = k;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as `train.jsonl` and `test.jsonl`.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select and cache weak-label segments for the training split.
    Weaklabels {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Weak-label cache from `weaklabels`; built on the fly when absent.
        #[arg(long)]
        weak_labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// One of K, R, lambda, B.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run the points on separate threads.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention heatmaps for test samples.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of test samples; defaults to the configured count.
        #[arg(long)]
        samples: Option<usize>,
        /// Also export the top-R head map.
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(dir) => Ok(Dataset {
            spec: cfg.task.clone(),
            train: read_jsonl(&dir.join("train.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
        }),
        None => generate_dataset(&cfg.task, cfg.sub_seed(Stream::Data)),
    }
}

fn prepared(cfg: &ExperimentConfig, data: Option<&Path>, cache: Option<&Path>) -> Result<Prepared> {
    if data.is_none() && cache.is_none() {
        return prepare(cfg);
    }
    cfg.validate()?;
    let dataset = dataset(cfg, data)?;
    let cache = match cache {
        Some(path) => WeakLabelCache::load(path)?,
        None => weak_labels(cfg, &dataset)?,
    };
    let base = BaseModel::new(cfg.model_config(), cfg.sub_seed(Stream::Base))?;
    Ok(Prepared { dataset, base, cache })
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    let data = generate_dataset(&cfg.task, cfg.sub_seed(Stream::Data))?;
    std::fs::create_dir_all(out)?;
    write_jsonl(&out.join("train.jsonl"), &data.train)?;
    write_jsonl(&out.join("test.jsonl"), &data.test)?;
    let check = oracle_check(&cfg.task, &data.train, &data.test);
    eprintln!(
        "wrote {} train / {} test samples; region oracle accuracy {:.3}, majority {:.3}",
        data.train.len(),
        data.test.len(),
        check.roi_oracle,
        check.majority
    );
    Ok(())
}

fn weaklabels_cmd(common: &Common, data: Option<&Path>, topk: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(k) = topk {
        cfg.train.top_k = k;
    }
    let dataset = dataset(&cfg, data)?;
    let cache = weak_labels(&cfg, &dataset)?;
    cache.save(out)?;
    eprintln!("cached weak labels for {} samples", cache.records.len());
    Ok(())
}

fn train_cmd(common: &Common, overrides: &Overrides, data: Option<&Path>, cache: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = overrides.apply(common.load()?);
    let prepared = prepared(&cfg, data, cache)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
    let mut log_err = None;
    let result = run(&cfg, &prepared, |epoch| {
        let line = serde_json::to_string(epoch).map_err(Error::from);
        if let Err(e) = line.and_then(|l| writeln!(log, "{l}").map_err(Error::from)) {
            log_err.get_or_insert(e);
        }
        let m = epoch.monitor.as_ref();
        eprintln!(
            "epoch {:>3}  L_llm {:.5}  L_align {:.5}  coverage {}  accuracy {}",
            epoch.epoch,
            epoch.loss.l_llm,
            epoch.loss.l_align,
            m.map_or("-".into(), |m| format!("{:.4}", m.coverage)),
            m.map_or("-".into(), |m| format!("{:.4}", m.accuracy)),
        );
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.flush()?;
    checkpoint::save(&out.join("model.ckpt"), &prepared.base, Some(&result.adapters))?;
    write_json(&out.join("report.json"), &result.report)?;
    let shown = &prepared.dataset.test[..cfg.heatmaps.min(prepared.dataset.test.len())];
    let heads = Some(cfg.train.resolved_heads(cfg.model_config().total_heads()));
    export_heatmaps(&out.join("heatmaps"), &prepared.base, Some(&result.adapters), shown, heads)?;
    eprintln!(
        "test coverage {:.4}  intensity {:.4}  accuracy {:.4}",
        result.report.coverage, result.report.intensity, result.report.accuracy
    );
    Ok(())
}

fn load_checkpoint(common: &Common, path: &Path) -> Result<(ExperimentConfig, checkpoint::Checkpoint)> {
    let cfg = common.load()?;
    let ckpt = checkpoint::load(path)?;
    // Adapters come from the checkpoint header; only the geometry must agree.
    if common.config.is_some() {
        ckpt.require_model(&cfg.model_config())?;
    }
    Ok((cfg, ckpt))
}

fn evaluate_cmd(common: &Common, path: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (cfg, ckpt) = load_checkpoint(common, path)?;
    let test = dataset(&cfg, data)?.test;
    let report = evaluate_with(&ckpt.base, ckpt.adapters.as_ref(), &test, &cfg.eval)?;
    match out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", report.to_json()?),
    }
    eprintln!("coverage {:.4}  intensity {:.4}  accuracy {:.4}", report.coverage, report.intensity, report.accuracy);
    Ok(())
}

fn sweep_cmd(
    common: &Common,
    overrides: &Overrides,
    param: &str,
    values: &[f64],
    data: Option<&Path>,
    parallel: bool,
    out: &Path,
) -> Result<()> {
    let cfg = overrides.apply(common.load()?);
    let param = SweepParam::parse(param)?;
    let prepared = prepared(&cfg, data, None)?;
    let rows = sweep(&cfg, &prepared, param, values, parallel)?;
    let csv = sweep_csv(&rows);
    std::fs::write(out, &csv)?;
    eprint!("{csv}");
    Ok(())
}

fn visualize_cmd(
    common: &Common,
    path: &Path,
    data: Option<&Path>,
    samples: Option<usize>,
    heads: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (cfg, ckpt) = load_checkpoint(common, path)?;
    let test = dataset(&cfg, data)?.test;
    let n = samples.unwrap_or(cfg.heatmaps).min(test.len());
    let files = export_heatmaps(out, &ckpt.base, ckpt.adapters.as_ref(), &test[..n], heads)?;
    eprintln!("wrote {} heatmap files", files.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common, out } => gen_data(common, out),
        Command::Weaklabels { common, data, topk, out } => weaklabels_cmd(common, data.as_deref(), *topk, out),
        Command::Train { common, overrides, data, weak_labels, out } => {
            train_cmd(common, overrides, data.as_deref(), weak_labels.as_deref(), out)
        }
        Command::Evaluate { common, checkpoint, data, out } => evaluate_cmd(common, checkpoint, data.as_deref(), out.as_deref()),
        Command::Sweep { common, overrides, param, values, data, parallel, out } => {
            sweep_cmd(common, overrides, param, values, data.as_deref(), *parallel, out)
        }
        Command::Visualize { common, checkpoint, data, samples, heads, out } => {
            visualize_cmd(common, checkpoint, data.as_deref(), *samples, *heads, out)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
