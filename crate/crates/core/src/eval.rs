//! Greedy-decoding evaluation against ground-truth regions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::attention::{extract_visual_view, mean_map, refined_map, select_heads, visual_ratios, write_heatmap, QuerySelector};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::metrics::{coverage_score, intensity_alignment, DEFAULT_TAU};
use crate::model::{BaseModel, ModelConfig};
use crate::numerics::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tau: f64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Also score the map of the top-R visual heads when set and nonzero.
    pub refined_heads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, threads: 0, refined_heads: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub predicted: Vec<usize>,
    pub correct: bool,
    pub coverage: f64,
    pub intensity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refined_coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refined_intensity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedSummary {
    pub heads: usize,
    pub coverage: f64,
    pub intensity: f64,
}

/// Aggregates are means of the per-sample records, which are sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub tau: f64,
    pub samples: usize,
    pub coverage: f64,
    pub intensity: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refined: Option<RefinedSummary>,
    pub records: Vec<SampleRecord>,
}

impl MetricsReport {
    pub fn from_records(mut records: Vec<SampleRecord>, tau: f64, refined_heads: Option<usize>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Metric("no samples to report".into()));
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let n = records.len() as f64;
        let mean = |f: &dyn Fn(&SampleRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let refined = match refined_heads {
            Some(heads) if heads > 0 => Some(RefinedSummary {
                heads,
                coverage: mean(&|r| r.refined_coverage.unwrap_or(0.0)),
                intensity: mean(&|r| r.refined_intensity.unwrap_or(0.0)),
            }),
            _ => None,
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tau,
            samples: records.len(),
            coverage: mean(&|r| r.coverage),
            intensity: mean(&|r| r.intensity),
            accuracy: mean(&|r| f64::from(u8::from(r.correct))),
            refined,
            records,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Rejects samples whose geometry or tokens the model cannot take.
pub fn check_compatible(config: &ModelConfig, sample: &SyntheticSample) -> Result<()> {
    if sample.grid != config.grid || sample.features.shape() != [config.visual_tokens(), config.d_visual] {
        return Err(Error::Compatibility(format!(
            "{}: features {:?} on grid {} do not fit a model with grid {} and {} visual dims",
            sample.id,
            sample.features.shape(),
            sample.grid,
            config.grid,
            config.d_visual
        )));
    }
    if let Some(&t) = sample.prompt.iter().chain(&sample.answer).find(|&&t| t >= config.vocab) {
        return Err(Error::Compatibility(format!("{}: token {t} outside vocabulary {}", sample.id, config.vocab)));
    }
    if sample.prompt.len() + sample.answer.len() > config.max_text {
        return Err(Error::Compatibility(format!("{}: text longer than {} positions", sample.id, config.max_text)));
    }
    Ok(())
}

/// Maps read from a greedy decode of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMaps {
    pub predicted: Vec<usize>,
    /// All-head mean over generated positions.
    pub mean: Tensor,
    /// Top-R heads by visual ratio over the same positions.
    pub refined: Option<Tensor>,
}

pub fn sample_maps(
    base: &BaseModel,
    adapters: Option<&AdapterSet>,
    sample: &SyntheticSample,
    refined_heads: Option<usize>,
) -> Result<SampleMaps> {
    check_compatible(&base.config, sample)?;
    let generation = base.generate_greedy(&sample.visual()?, &sample.prompt, sample.answer.len(), adapters)?;
    let stack = generation.final_stack();
    let query = QuerySelector::GeneratedPositions(generation.tokens.len());
    let view = extract_visual_view(stack, &query)?;
    let refined = match refined_heads {
        Some(r) if r > 0 => Some(refined_map(&view, &select_heads(&visual_ratios(stack, &query)?, r)?)?),
        _ => None,
    };
    Ok(SampleMaps { predicted: generation.tokens, mean: mean_map(&view), refined })
}

fn score(base: &BaseModel, adapters: Option<&AdapterSet>, sample: &SyntheticSample, cfg: &EvalConfig) -> Result<SampleRecord> {
    let maps = sample_maps(base, adapters, sample, cfg.refined_heads)?;
    let (refined_coverage, refined_intensity) = match &maps.refined {
        Some(m) => (Some(coverage_score(m, &sample.roi, cfg.tau)?), Some(intensity_alignment(m, &sample.roi)?)),
        None => (None, None),
    };
    Ok(SampleRecord {
        id: sample.id.clone(),
        correct: maps.predicted == sample.answer,
        coverage: coverage_score(&maps.mean, &sample.roi, cfg.tau)?,
        intensity: intensity_alignment(&maps.mean, &sample.roi)?,
        predicted: maps.predicted,
        refined_coverage,
        refined_intensity,
    })
}

/// Decodes every sample greedily and scores its generated-position map.
/// Samples are split across threads; the report does not depend on how.
pub fn evaluate(base: &BaseModel, adapters: &AdapterSet, samples: &[SyntheticSample], cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate_with(base, Some(adapters), samples, cfg)
}

pub fn evaluate_with(
    base: &BaseModel,
    adapters: Option<&AdapterSet>,
    samples: &[SyntheticSample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if let Some(a) = adapters {
        if a.num_layers() != base.config.layers {
            return Err(Error::Compatibility(format!(
                "adapters cover {} layers, model has {}",
                a.num_layers(),
                base.config.layers
            )));
        }
    }
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .clamp(1, samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    let records: Vec<SampleRecord> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| score(base, adapters, s, cfg)).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    MetricsReport::from_records(records, cfg.tau, cfg.refined_heads)
}

/// Writes mean-map (and refined-map, if requested) heatmaps for the samples.
pub fn export_heatmaps(
    dir: &Path,
    base: &BaseModel,
    adapters: Option<&AdapterSet>,
    samples: &[SyntheticSample],
    refined_heads: Option<usize>,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for s in samples {
        let maps = sample_maps(base, adapters, s, refined_heads)?;
        let (csv, pgm) = write_heatmap(dir, &s.id, "mean", &maps.mean, s.grid)?;
        written.extend([csv, pgm]);
        if let Some(m) = &maps.refined {
            let (csv, pgm) = write_heatmap(dir, &s.id, "refined", m, s.grid)?;
            written.extend([csv, pgm]);
        }
        let mut roi = vec![0.0; s.grid * s.grid];
        s.roi.iter().for_each(|&c| roi[c] = 1.0);
        let (csv, pgm) = write_heatmap(dir, &s.id, "roi", &Tensor::vector(roi), s.grid)?;
        written.extend([csv, pgm]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests;
