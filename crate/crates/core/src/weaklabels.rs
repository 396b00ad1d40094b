//! Prompt-aware weak labels.
//!
//! Candidate segments come from a [`SegmentProposer`]; an [`EmbedderBackend`]
//! embeds each segment and the prompt; the K segments most cosine-similar to
//! the prompt become the weak labels. The threshold τ_K is the K-th largest
//! similarity, and ties at τ_K go to the lower segment id so exactly K
//! segments survive.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{neighbours, SyntheticSample, TaskSpec};
use crate::error::{Error, Result};

/// Binary pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Geometry(format!("{} pixels for a {width}x{height} mask", data.len())));
        }
        Ok(Self { width, height, data })
    }

    /// Mask covering exactly the given patches.
    pub fn from_tokens(tokens: &[usize], grid: usize, patch_px: usize) -> Self {
        let side = grid * patch_px;
        let mut data = vec![false; side * side];
        for &t in tokens {
            let (r, c) = (t / grid, t % grid);
            for y in r * patch_px..(r + 1) * patch_px {
                for x in c * patch_px..(c + 1) * patch_px {
                    data[y * side + x] = true;
                }
            }
        }
        Self { width: side, height: side, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    /// Sorted, unique visual-token indices.
    pub token_indices: Vec<usize>,
    pub bitmap: Option<PixelMask>,
    pub source: String,
}

impl Segment {
    pub fn new(id: usize, tokens: impl IntoIterator<Item = usize>, n: usize, source: &str) -> Result<Self> {
        let set: BTreeSet<usize> = tokens.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Geometry(format!("segment {id} is empty")));
        }
        if let Some(&bad) = set.iter().find(|&&t| t >= n) {
            return Err(Error::Index(format!("segment {id} token {bad} outside {n} tokens")));
        }
        Ok(Self { id, token_indices: set.into_iter().collect(), bitmap: None, source: source.into() })
    }
}

/// Patch tokens whose patch is at least half covered by the mask.
pub fn mask_to_tokens(mask: &PixelMask, grid: usize) -> Result<Vec<usize>> {
    if grid == 0 || !mask.width.is_multiple_of(grid) || !mask.height.is_multiple_of(grid) {
        return Err(Error::Geometry(format!("{}x{} mask does not split into a {grid}x{grid} grid", mask.width, mask.height)));
    }
    let (pw, ph) = (mask.width / grid, mask.height / grid);
    let mut out = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            let mut on = 0;
            for y in r * ph..(r + 1) * ph {
                for x in c * pw..(c + 1) * pw {
                    on += usize::from(mask.get(x, y));
                }
            }
            if 2 * on >= pw * ph {
                out.push(r * grid + c);
            }
        }
    }
    Ok(out)
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(crate::error::dim_err("cosine_sim", format!("{} vs {} entries", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateEmbedding("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Segment and prompt embedder.
pub trait EmbedderBackend {
    /// Stable identifier, part of the cache key.
    fn id(&self) -> String;
    fn embed_segment(&self, segment: &Segment, image: &SyntheticSample) -> Result<Vec<f64>>;
    fn embed_prompt(&self, prompt: &[usize]) -> Result<Vec<f64>>;
}

/// Candidate segment source. A real segmenter would implement this.
pub trait SegmentProposer {
    fn name(&self) -> &str;
    fn propose(&self, image: &SyntheticSample) -> Result<Vec<Segment>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub id: usize,
    pub token_indices: Vec<usize>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelSet {
    /// Selected segments, most similar first.
    pub segments: Vec<ScoredSegment>,
    pub tau_k: f64,
    pub k: usize,
    /// Similarity of every candidate, by ascending id.
    pub all: Vec<(usize, f64)>,
}

impl WeakLabelSet {
    pub fn ids(&self) -> BTreeSet<usize> {
        self.segments.iter().map(|s| s.id).collect()
    }

    /// Token sets of the selected segments.
    pub fn token_sets(&self) -> Vec<Vec<usize>> {
        self.segments.iter().map(|s| s.token_indices.clone()).collect()
    }
}

/// Top-K selection from precomputed similarities; ties favour lower ids.
pub fn select_top_k(scored: Vec<ScoredSegment>, k: usize) -> Result<WeakLabelSet> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if scored.is_empty() {
        return Err(Error::Selection("no candidate segments".into()));
    }
    let mut all: Vec<(usize, f64)> = scored.iter().map(|s| (s.id, s.similarity)).collect();
    all.sort_by_key(|a| a.0);
    let mut ranked = scored;
    ranked.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
    ranked.truncate(k);
    let tau_k = ranked.last().expect("nonempty").similarity;
    Ok(WeakLabelSet { segments: ranked, tau_k, k, all })
}

pub fn select_weak_labels(
    candidates: &[Segment],
    prompt: &[usize],
    image: &SyntheticSample,
    backend: &dyn EmbedderBackend,
    k: usize,
) -> Result<WeakLabelSet> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidate segments".into()));
    }
    let p = backend.embed_prompt(prompt)?;
    let scored = candidates
        .iter()
        .map(|seg| {
            let e = backend
                .embed_segment(seg, image)
                .map_err(|err| Error::Backend { segment: seg.id, reason: err.to_string() })?;
            let similarity =
                cosine_sim(&e, &p).map_err(|err| Error::Backend { segment: seg.id, reason: err.to_string() })?;
            Ok(ScoredSegment { id: seg.id, token_indices: seg.token_indices.clone(), similarity })
        })
        .collect::<Result<Vec<_>>>()?;
    select_top_k(scored, k)
}

/// Stable 64-bit FNV-1a hash, used to derive per-item noise seeds.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Oracle embedder: a segment embeds to the mean noiseless planted feature of
/// its patches plus `noise·N(0,1)` per dim; a prompt embeds to the one-hot signature of its
/// concept. Noise is seeded from the image and segment ids, so results are
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracleEmbedder {
    pub spec: TaskSpec,
    pub noise: f64,
    pub seed: u64,
}

pub fn synthetic_oracle_backend(spec: &TaskSpec, noise: f64, seed: u64) -> Result<SyntheticOracleEmbedder> {
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::Parameter(format!("embedder noise must be finite and nonnegative, got {noise}")));
    }
    Ok(SyntheticOracleEmbedder { spec: spec.clone(), noise, seed })
}

impl EmbedderBackend for SyntheticOracleEmbedder {
    fn id(&self) -> String {
        format!("synthetic-oracle(noise={},seed={})", self.noise, self.seed)
    }

    fn embed_segment(&self, segment: &Segment, image: &SyntheticSample) -> Result<Vec<f64>> {
        let clean = clean_features(&self.spec, image);
        let d = self.spec.d_visual;
        let mut out = vec![0.0; d];
        for &t in &segment.token_indices {
            if t >= clean.len() / d {
                return Err(Error::Index(format!("token {t} outside the image")));
            }
            for (o, v) in out.iter_mut().zip(&clean[t * d..(t + 1) * d]) {
                *o += v;
            }
        }
        let count = segment.token_indices.len() as f64;
        out.iter_mut().for_each(|v| *v /= count);
        if self.noise > 0.0 {
            let seed = stable_hash(&[&self.seed.to_le_bytes(), image.id.as_bytes(), &segment.id.to_le_bytes()]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, self.noise).expect("finite noise");
            out.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        Ok(out)
    }

    fn embed_prompt(&self, prompt: &[usize]) -> Result<Vec<f64>> {
        let concept = self
            .spec
            .prompt_concept(prompt)
            .ok_or_else(|| Error::DegenerateEmbedding(format!("prompt {prompt:?} names no concept")))?;
        let mut out = vec![0.0; self.spec.d_visual];
        out[concept] = 1.0;
        Ok(out)
    }
}

/// Planted features without image noise, `[N·d_visual]` row-major.
pub fn clean_features(spec: &TaskSpec, image: &SyntheticSample) -> Vec<f64> {
    let d = spec.d_visual;
    let n = image.grid * image.grid;
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        out[t * d + spec.background_dim()] = 1.0;
    }
    for seg in &image.segments {
        for &t in &seg.tokens {
            let row = &mut out[t * d..(t + 1) * d];
            row[spec.background_dim()] = 0.0;
            row[seg.concept] = 1.0;
            row[spec.concepts + seg.label] = 1.0;
        }
    }
    out
}

/// Proposer for planted images. For every planted blob it emits the exact
/// region, a pixel-jittered copy, a one-ring dilation and half the blob
/// with its outer ring; then `background` random blobs of free cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProposer {
    pub background: usize,
    /// Pixels per patch side for the jittered masks.
    pub patch_px: usize,
    pub seed: u64,
}

impl Default for SyntheticProposer {
    fn default() -> Self {
        Self { background: 4, patch_px: 4, seed: 0 }
    }
}

impl SegmentProposer for SyntheticProposer {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn propose(&self, image: &SyntheticSample) -> Result<Vec<Segment>> {
        let grid = image.grid;
        let n = grid * grid;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&self.seed.to_le_bytes(), image.id.as_bytes()]));
        let mut out: Vec<Segment> = Vec::new();
        let push = |out: &mut Vec<Segment>, tokens: Vec<usize>, source: &str, bitmap: Option<PixelMask>| -> Result<()> {
            if tokens.is_empty() {
                return Ok(());
            }
            let mut seg = Segment::new(out.len(), tokens, n, source)?;
            seg.bitmap = bitmap;
            out.push(seg);
            Ok(())
        };
        for planted in &image.segments {
            push(&mut out, planted.tokens.clone(), "exact", None)?;

            let base = PixelMask::from_tokens(&planted.tokens, grid, self.patch_px);
            let (dx, dy) = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
            let side = base.width as i64;
            let mut shifted = vec![false; base.data.len()];
            for y in 0..side {
                for x in 0..side {
                    let (sx, sy) = (x - dx, y - dy);
                    let inside = (0..side).contains(&sx) && (0..side).contains(&sy);
                    let on = inside && base.get(sx as usize, sy as usize);
                    // Flip a few pixels to mimic a ragged segmentation edge.
                    shifted[(y * side + x) as usize] = on ^ (rng.random::<f64>() < 0.05);
                }
            }
            let mask = PixelMask::new(base.width, base.height, shifted)?;
            push(&mut out, mask_to_tokens(&mask, grid)?, "jitter", Some(mask))?;

            let mut dilated: BTreeSet<usize> = planted.tokens.iter().copied().collect();
            for &t in &planted.tokens {
                dilated.extend(neighbours(grid, t));
            }
            push(&mut out, dilated.into_iter().collect(), "dilate", None)?;

            // Half the blob spilling one ring into its surroundings.
            let keep = (planted.tokens.len() / 2).max(1);
            let start = rng.random_range(0..planted.tokens.len());
            let mut partial = BTreeSet::new();
            for i in 0..keep {
                let t = planted.tokens[(start + i) % planted.tokens.len()];
                partial.insert(t);
                partial.extend(neighbours(grid, t).into_iter().filter(|u| !planted.tokens.contains(u)));
            }
            push(&mut out, partial.into_iter().collect(), "partial", None)?;
        }
        let occupied: BTreeSet<usize> = image.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect();
        for _ in 0..self.background {
            let free: Vec<usize> = (0..n).filter(|t| !occupied.contains(t)).collect();
            if free.is_empty() {
                break;
            }
            let mut blob = vec![free[rng.random_range(0..free.len())]];
            let size = rng.random_range(2..=6);
            while blob.len() < size {
                let frontier: Vec<usize> = blob
                    .iter()
                    .flat_map(|&t| neighbours(grid, t))
                    .filter(|u| !blob.contains(u) && !occupied.contains(u))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                if frontier.is_empty() {
                    break;
                }
                blob.push(frontier[rng.random_range(0..frontier.len())]);
            }
            push(&mut out, blob, "background", None)?;
        }
        Ok(out)
    }
}

/// One cached weak-label result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelRecord {
    pub image_id: String,
    pub prompt_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub backend: String,
    pub segments: Vec<ScoredSegment>,
    #[serde(rename = "tau_K")]
    pub tau_k: f64,
}

impl WeakLabelRecord {
    pub fn token_sets(&self) -> Vec<Vec<usize>> {
        self.segments.iter().map(|s| s.token_indices.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelCache {
    pub records: Vec<WeakLabelRecord>,
}

impl WeakLabelCache {
    pub fn get(&self, image_id: &str, prompt_id: &str) -> Option<&WeakLabelRecord> {
        self.records.iter().find(|r| r.image_id == image_id && r.prompt_id == prompt_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Proposes, embeds and selects weak labels for every sample.
pub fn build_cache(
    samples: &[SyntheticSample],
    proposer: &dyn SegmentProposer,
    backend: &dyn EmbedderBackend,
    k: usize,
) -> Result<WeakLabelCache> {
    let records = samples
        .iter()
        .map(|s| {
            let candidates = proposer.propose(s)?;
            let set = select_weak_labels(&candidates, &s.prompt, s, backend, k)?;
            Ok(WeakLabelRecord {
                image_id: s.id.clone(),
                prompt_id: s.prompt_id(),
                k,
                backend: backend.id(),
                segments: set.segments,
                tau_k: set.tau_k,
            })
        })
        .collect::<Result<_>>()?;
    Ok(WeakLabelCache { records })
}

#[cfg(test)]
mod tests;
