//! Synthetic planted-region question answering.
//!
//! Each image is a `grid × grid` field of patch features. A few disjoint
//! blobs are planted, each tagged with a distinct concept and a distinct
//! label. The prompt names one concept and the answer is the label of the
//! blob carrying it, so the answer can only be read off the queried region.
//!
//! Patch feature layout, for `C` concepts and `Y` labels:
//! dims `0..C` concept one-hot, `C..C+Y` label one-hot, `C+Y` background
//! indicator, and Gaussian noise on every dim.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VisualInput};
use crate::numerics::Tensor;

pub const QUERY_TOKEN: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub grid: usize,
    pub d_visual: usize,
    pub concepts: usize,
    /// Planted blobs per image.
    pub segments: usize,
    pub labels: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Standard deviation of the per-dim feature noise.
    pub noise: f64,
    pub train: usize,
    pub test: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            grid: 8,
            d_visual: 16,
            concepts: 4,
            segments: 3,
            labels: 4,
            min_segment: 4,
            max_segment: 6,
            noise: 0.2,
            train: 2000,
            test: 500,
        }
    }
}

impl TaskSpec {
    pub fn concept_token(&self, concept: usize) -> usize {
        2 + concept
    }

    pub fn label_token(&self, label: usize) -> usize {
        2 + self.concepts + label
    }

    /// Smallest vocabulary that holds every task token.
    pub fn vocab_needed(&self) -> usize {
        2 + self.concepts + self.labels
    }

    pub fn background_dim(&self) -> usize {
        self.concepts + self.labels
    }

    /// Concept named by a prompt, if any.
    pub fn prompt_concept(&self, prompt: &[usize]) -> Option<usize> {
        prompt.iter().find_map(|&t| (2..2 + self.concepts).contains(&t).then(|| t - 2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(Error::Generation(format!("need at least 2 concepts, got {}", self.concepts)));
        }
        if self.segments == 0 || self.segments > self.concepts || self.segments > self.labels {
            return Err(Error::Generation(format!(
                "{} segments need as many distinct concepts ({}) and labels ({})",
                self.segments, self.concepts, self.labels
            )));
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return Err(Error::Generation("segment size range is empty".into()));
        }
        let n = self.grid * self.grid;
        if 2 * self.segments * self.max_segment >= n {
            return Err(Error::Generation(format!(
                "{} segments of up to {} tokens do not fit under half of {n} tokens",
                self.segments, self.max_segment
            )));
        }
        if self.background_dim() >= self.d_visual {
            return Err(Error::Generation(format!(
                "feature width {} cannot hold {} concept and {} label dims plus background",
                self.d_visual, self.concepts, self.labels
            )));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Generation("noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Model geometry matching this task.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            grid: self.grid,
            d_visual: self.d_visual,
            vocab: base.vocab.max(self.vocab_needed()),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSegment {
    /// Sorted token indices.
    pub tokens: Vec<usize>,
    pub concept: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: String,
    pub grid: usize,
    /// `[grid²×d_visual]` patch features.
    pub features: Tensor,
    pub segments: Vec<PlantedSegment>,
    /// Index into `segments` of the queried blob.
    pub queried: usize,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    /// Ground-truth region: the queried blob's tokens.
    pub roi: Vec<usize>,
}

impl SyntheticSample {
    pub fn visual(&self) -> Result<VisualInput> {
        VisualInput::new(self.features.clone(), self.grid)
    }

    pub fn prompt_id(&self) -> String {
        self.prompt.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Accuracy of the two reference classifiers on a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    /// Reads the label dims averaged over the ground-truth region.
    pub roi_oracle: f64,
    /// Always answers the most frequent label; never looks at the image.
    pub majority: f64,
}

pub fn generate_dataset(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..spec.train).map(|i| generate_sample(spec, &mut rng, format!("train-{i:05}"))).collect::<Result<_>>()?;
    let test = (0..spec.test).map(|i| generate_sample(spec, &mut rng, format!("test-{i:05}"))).collect::<Result<_>>()?;
    Ok(Dataset { spec: spec.clone(), train, test })
}

fn generate_sample(spec: &TaskSpec, rng: &mut ChaCha8Rng, id: String) -> Result<SyntheticSample> {
    let n = spec.grid * spec.grid;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut concepts: Vec<usize> = (0..spec.concepts).collect();
    concepts.shuffle(rng);
    let mut labels: Vec<usize> = (0..spec.labels).collect();
    labels.shuffle(rng);
    let mut segments = Vec::with_capacity(spec.segments);
    for s in 0..spec.segments {
        let size = rng.random_range(spec.min_segment..=spec.max_segment);
        let tokens = grow_blob(spec.grid, size, &owner, rng)
            .ok_or_else(|| Error::Generation(format!("{id}: could not place a blob of {size} tokens")))?;
        for &t in &tokens {
            owner[t] = Some(s);
        }
        segments.push(PlantedSegment { tokens, concept: concepts[s], label: labels[s] });
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.d_visual;
    let mut data = vec![0.0; n * d];
    for t in 0..n {
        let row = &mut data[t * d..(t + 1) * d];
        match owner[t] {
            Some(s) => {
                row[segments[s].concept] = 1.0;
                row[spec.concepts + segments[s].label] = 1.0;
            }
            None => row[spec.background_dim()] = 1.0,
        }
        for v in row.iter_mut() {
            *v += spec.noise * normal.sample(rng);
        }
    }
    let queried = rng.random_range(0..spec.segments);
    let q = &segments[queried];
    Ok(SyntheticSample {
        id,
        grid: spec.grid,
        features: Tensor::new(vec![n, d], data)?,
        prompt: vec![QUERY_TOKEN, spec.concept_token(q.concept)],
        answer: vec![spec.label_token(q.label)],
        roi: q.tokens.clone(),
        queried,
        segments,
    })
}

/// Grows a 4-connected blob of `size` free cells, or gives up.
fn grow_blob(grid: usize, size: usize, owner: &[Option<usize>], rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let n = grid * grid;
    // A blob may not touch an existing one, so regions stay separable.
    let free = |t: usize| owner[t].is_none() && neighbours(grid, t).iter().all(|&u| owner[u].is_none());
    for _ in 0..200 {
        let start = rng.random_range(0..n);
        if !free(start) {
            continue;
        }
        let mut blob = vec![start];
        while blob.len() < size {
            let mut frontier: Vec<usize> = blob
                .iter()
                .flat_map(|&t| neighbours(grid, t))
                .filter(|u| !blob.contains(u) && free(*u))
                .collect();
            frontier.sort_unstable();
            frontier.dedup();
            if frontier.is_empty() {
                break;
            }
            blob.push(frontier[rng.random_range(0..frontier.len())]);
        }
        if blob.len() == size {
            blob.sort_unstable();
            return Some(blob);
        }
    }
    None
}

pub(crate) fn neighbours(grid: usize, t: usize) -> Vec<usize> {
    let (r, c) = (t / grid, t % grid);
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push(t - grid);
    }
    if r + 1 < grid {
        out.push(t + grid);
    }
    if c > 0 {
        out.push(t - 1);
    }
    if c + 1 < grid {
        out.push(t + 1);
    }
    out
}

/// Runs the reference classifiers. The majority label is taken from `fit`.
pub fn oracle_check(spec: &TaskSpec, fit: &[SyntheticSample], eval: &[SyntheticSample]) -> OracleCheck {
    let mut counts = vec![0usize; spec.labels];
    for s in fit {
        counts[s.segments[s.queried].label] += 1;
    }
    let majority = (0..spec.labels).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap_or(0);
    let (mut roi_hits, mut maj_hits) = (0usize, 0usize);
    for s in eval {
        let truth = s.segments[s.queried].label;
        let d = spec.d_visual;
        let mut score = vec![0.0; spec.labels];
        for &t in &s.roi {
            for (l, v) in score.iter_mut().enumerate() {
                *v += s.features.data()[t * d + spec.concepts + l];
            }
        }
        let guess = crate::model::argmax(&score);
        roi_hits += usize::from(guess == truth);
        maj_hits += usize::from(majority == truth);
    }
    let total = eval.len().max(1) as f64;
    OracleCheck { roi_oracle: roi_hits as f64 / total, majority: maj_hits as f64 / total }
}

pub fn write_jsonl(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticSample>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SyntheticSample =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(sample);
    }
    Ok(out)
}
