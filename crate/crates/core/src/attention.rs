//! Visual attention maps: extraction, head-averaged maps, per-head visual
//! ratios, top-R head selection and the refined map over selected heads.
//!
//! Every per-head matrix is first reduced over the query rows by an
//! arithmetic mean, giving one length-N vector per head.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Position ranges of one `[visual | prompt | answer]` sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub visual: Range<usize>,
    pub prompt: Range<usize>,
    pub answer: Range<usize>,
}

impl Spans {
    pub fn new(visual: usize, prompt: usize, answer: usize) -> Self {
        Self { visual: 0..visual, prompt: visual..visual + prompt, answer: visual + prompt..visual + prompt + answer }
    }

    pub fn len(&self) -> usize {
        self.answer.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual_len(&self) -> usize {
        self.visual.len()
    }
}

/// Attention probabilities of every head of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    /// `maps[l][h]` is `[S×S]`, rows are queries.
    pub maps: Vec<Vec<Tensor>>,
    pub spans: Spans,
}

impl AttentionStack {
    pub fn layers(&self) -> usize {
        self.maps.len()
    }

    pub fn heads(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }

    pub fn map(&self, l: usize, h: usize) -> &Tensor {
        &self.maps[l][h]
    }
}

/// Which text rows act as attention queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySelector {
    /// The rows that emit each answer token under teacher forcing: the last
    /// prompt position and every answer position but the last.
    AnswerPositions,
    /// The rows that emitted the first `n` generated tokens.
    GeneratedPositions(usize),
    /// Explicit text rows.
    Rows(Vec<usize>),
}

impl QuerySelector {
    pub fn rows(&self, spans: &Spans) -> Result<Vec<usize>> {
        let first = spans.prompt.end.checked_sub(1).filter(|&r| r >= spans.visual.end);
        let emitting = |n: usize| -> Result<Vec<usize>> {
            let start = first.ok_or_else(|| Error::Selection("sequence has no prompt".into()))?;
            if n == 0 || start + n > spans.len() {
                return Err(Error::Selection(format!("{n} emitting rows from {start} exceed length {}", spans.len())));
            }
            Ok((start..start + n).collect())
        };
        match self {
            QuerySelector::AnswerPositions => emitting(spans.answer.len()),
            QuerySelector::GeneratedPositions(n) => emitting(*n),
            QuerySelector::Rows(rows) => {
                if rows.is_empty() {
                    return Err(Error::Selection("empty query set".into()));
                }
                if let Some(&bad) = rows.iter().find(|&&r| r < spans.visual.end || r >= spans.len()) {
                    return Err(Error::Selection(format!("query row {bad} is not a text position")));
                }
                Ok(rows.clone())
            }
        }
    }
}

/// Per-head `[|Q|×N]` blocks: query rows against visual key columns.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualAttentionView {
    pub rows: Vec<usize>,
    pub maps: Vec<Vec<Tensor>>,
}

impl VisualAttentionView {
    /// Query-mean of one head's block, length N.
    pub fn head_vector(&self, l: usize, h: usize) -> Vec<f64> {
        let m = &self.maps[l][h];
        let (q, n) = m.dims2();
        let mut out = vec![0.0; n];
        for i in 0..q {
            for (o, v) in out.iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= q as f64);
        out
    }

    pub fn visual_len(&self) -> usize {
        self.maps[0][0].cols()
    }
}

pub fn extract_visual_view(stack: &AttentionStack, query: &QuerySelector) -> Result<VisualAttentionView> {
    let rows = query.rows(&stack.spans)?;
    let n = stack.spans.visual_len();
    let maps = stack
        .maps
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|m| {
                    let mut data = Vec::with_capacity(rows.len() * n);
                    for &r in &rows {
                        data.extend_from_slice(&m.row(r)[..n]);
                    }
                    Tensor::new(vec![rows.len(), n], data)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VisualAttentionView { rows, maps })
}

/// Average of the query-mean vectors over every layer and head.
pub fn mean_map(view: &VisualAttentionView) -> Tensor {
    let n = view.visual_len();
    let mut out = vec![0.0; n];
    let mut count = 0usize;
    for (l, layer) in view.maps.iter().enumerate() {
        for h in 0..layer.len() {
            for (o, v) in out.iter_mut().zip(view.head_vector(l, h)) {
                *o += v;
            }
            count += 1;
        }
    }
    out.iter_mut().for_each(|v| *v /= count as f64);
    Tensor::vector(out)
}

/// Share of the query rows' visual-plus-prompt attention mass that lands on
/// visual keys. Answer-span keys are excluded from both sums.
pub fn visual_ratio(stack: &AttentionStack, l: usize, h: usize, query: &QuerySelector) -> Result<f64> {
    let rows = query.rows(&stack.spans)?;
    ratio_for_rows(stack, l, h, &rows)
}

fn ratio_for_rows(stack: &AttentionStack, l: usize, h: usize, rows: &[usize]) -> Result<f64> {
    let m = stack.map(l, h);
    let (vis, prompt) = (&stack.spans.visual, &stack.spans.prompt);
    let (mut num, mut den) = (0.0, 0.0);
    for &q in rows {
        let row = m.row(q);
        let v: f64 = row[vis.clone()].iter().sum();
        let p: f64 = row[prompt.clone()].iter().sum();
        num += v;
        den += v + p;
    }
    if den <= 0.0 {
        return Err(Error::DegenerateRatio { layer: l, head: h });
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Visual ratio of every head, `[L][H]`.
pub fn visual_ratios(stack: &AttentionStack, query: &QuerySelector) -> Result<Vec<Vec<f64>>> {
    let rows = query.rows(&stack.spans)?;
    (0..stack.layers())
        .map(|l| (0..stack.heads()).map(|h| ratio_for_rows(stack, l, h, &rows)).collect())
        .collect()
}

/// Top-R heads by visual ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub ratios: Vec<Vec<f64>>,
    pub selected: Vec<Vec<bool>>,
    pub r: usize,
}

impl HeadSelection {
    /// Selected `(layer, head)` pairs in ascending order.
    pub fn heads(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.r);
        for (l, row) in self.selected.iter().enumerate() {
            for (h, &s) in row.iter().enumerate() {
                if s {
                    out.push((l, h));
                }
            }
        }
        out
    }

    /// A fixed selection, e.g. from a calibration pass.
    pub fn from_heads(layers: usize, heads: usize, picked: &[(usize, usize)]) -> Result<Self> {
        let mut selected = vec![vec![false; heads]; layers];
        for &(l, h) in picked {
            if l >= layers || h >= heads || selected[l][h] {
                return Err(Error::Parameter(format!("invalid or repeated head ({l}, {h})")));
            }
            selected[l][h] = true;
        }
        Ok(Self { ratios: vec![vec![0.0; heads]; layers], selected, r: picked.len() })
    }
}

/// Marks the R largest ratios; ties go to the lexicographically smaller
/// `(layer, head)`.
pub fn select_heads(ratios: &[Vec<f64>], r: usize) -> Result<HeadSelection> {
    let heads = ratios.first().map_or(0, Vec::len);
    if ratios.iter().any(|row| row.len() != heads) {
        return Err(Error::Parameter("ragged ratio table".into()));
    }
    let total = ratios.len() * heads;
    if r > total {
        return Err(Error::Parameter(format!("R = {r} exceeds {total} heads")));
    }
    let mut order: Vec<(usize, usize)> = (0..ratios.len()).flat_map(|l| (0..heads).map(move |h| (l, h))).collect();
    order.sort_by(|&(la, ha), &(lb, hb)| ratios[lb][hb].total_cmp(&ratios[la][ha]).then((la, ha).cmp(&(lb, hb))));
    let mut selected = vec![vec![false; heads]; ratios.len()];
    for &(l, h) in order.iter().take(r) {
        selected[l][h] = true;
    }
    Ok(HeadSelection { ratios: ratios.to_vec(), selected, r })
}

/// Average of the selected heads' query-mean vectors.
pub fn refined_map(view: &VisualAttentionView, sel: &HeadSelection) -> Result<Tensor> {
    let heads = sel.heads();
    if heads.is_empty() {
        return Err(Error::Selection("refined map needs at least one selected head".into()));
    }
    let mut out = vec![0.0; view.visual_len()];
    for &(l, h) in &heads {
        for (o, v) in out.iter_mut().zip(view.head_vector(l, h)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= heads.len() as f64);
    Ok(Tensor::vector(out))
}

/// Differentiable refined map, `[1×N]`, from the attention nodes of a pass.
/// The selection is a constant; gradients reach only the selected heads.
pub fn refined_map_var(
    tape: &mut Tape,
    attn: &[Vec<Var>],
    spans: &Spans,
    rows: &[usize],
    sel: &HeadSelection,
) -> Result<Var> {
    let heads = sel.heads();
    if heads.is_empty() {
        return Err(Error::Selection("refined map needs at least one selected head".into()));
    }
    let n = spans.visual_len();
    let mut acc: Option<Var> = None;
    for &(l, h) in &heads {
        let block = tape.select_block(attn[l][h], rows, spans.visual.start, n)?;
        let v = tape.mean_rows(block)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
    }
    let sum = acc.expect("nonempty selection");
    Ok(tape.scale(sum, 1.0 / heads.len() as f64))
}

/// Writes `<sample_id>.<kind>.csv` (G rows of reals) and `<sample_id>.<kind>.pgm`
/// (binary 8-bit, scaled so the maximum maps to 255). Returns both paths.
pub fn write_heatmap(dir: &Path, sample_id: &str, kind: &str, map: &Tensor, grid: usize) -> Result<(PathBuf, PathBuf)> {
    if grid == 0 || map.len() != grid * grid {
        return Err(Error::Geometry(format!("map of {} values is not a {grid}x{grid} grid", map.len())));
    }
    let mut csv = String::new();
    for r in 0..grid {
        let row: Vec<String> = map.data()[r * grid..(r + 1) * grid].iter().map(|v| format!("{v:e}")).collect();
        writeln!(csv, "{}", row.join(",")).expect("write to string");
    }
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    let mut pgm = format!("P5\n{grid} {grid}\n255\n").into_bytes();
    pgm.extend(map.data().iter().map(|&v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 }));
    let csv_path = dir.join(format!("{sample_id}.{kind}.csv"));
    let pgm_path = dir.join(format!("{sample_id}.{kind}.pgm"));
    std::fs::write(&csv_path, csv)?;
    std::fs::write(&pgm_path, pgm)?;
    Ok((csv_path, pgm_path))
}
