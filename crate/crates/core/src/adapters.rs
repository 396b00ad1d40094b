//! Low-rank adapters and the query/key expert mixtures.
//!
//! Every decoder linear map carries a dense LoRA delta `B·A`. On top of that,
//! the query projection of each layer gets a prompt-level mixture (one gate
//! decision per sequence from the pooled prompt states) and the key
//! projection gets a visual-token-level sparse mixture (one gate decision per
//! visual token, keeping only the top-B gate weights). Text-token keys only
//! see the base projection plus the dense LoRA delta.
//!
//! Inside the forward pass the deltas are applied in factored form,
//! `x·Aᵀ·Bᵀ` per expert, and never materialized. The explicit `[d×d]` deltas
//! are available through [`qmoe_delta`], [`kmoe_delta_per_token`] and
//! [`adapted_projection`] for inspection and as test oracles.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{normal, uniform, Bound, ParamId, ParamStore};

/// Decoder linear maps that carry a dense LoRA delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Proj {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 6] = [Proj::Query, Proj::Key, Proj::Value, Proj::Output, Proj::Up, Proj::Down];

    fn tag(self) -> &'static str {
        match self {
            Proj::Query => "q",
            Proj::Key => "k",
            Proj::Value => "v",
            Proj::Output => "o",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }
}

/// Which expert mixtures to drop; used for the ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoQmoe,
    NoKmoe,
    /// Both mixtures off: a plain shared LoRA on every projection.
    NoA3moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Rank of the dense LoRA on every linear map.
    pub lora_rank: usize,
    /// Rank of each expert.
    pub expert_rank: usize,
    pub query_experts: usize,
    pub key_experts: usize,
    /// Number of key experts kept per visual token.
    pub top_b: usize,
    /// Gate MLP hidden width; `None` means `d_model / 2`.
    pub gate_hidden: Option<usize>,
    pub qmoe: bool,
    pub kmoe: bool,
    /// Keep the dense LoRA on query/key projections alongside the mixtures.
    pub dense_qk: bool,
    /// Renormalize the surviving top-B key gate weights to sum to one.
    pub renormalize: bool,
    /// `A` matrices start uniform in `±init_scale/sqrt(d_in)`; `B` starts at zero.
    pub init_scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            lora_rank: 8,
            expert_rank: 4,
            query_experts: 4,
            key_experts: 8,
            top_b: 2,
            gate_hidden: None,
            qmoe: true,
            kmoe: true,
            dense_qk: true,
            renormalize: false,
            init_scale: 1.0,
        }
    }
}

impl AdapterConfig {
    /// Ranks and expert counts used for billion-parameter backbones.
    pub fn full_scale() -> Self {
        Self { lora_rank: 64, expert_rank: 16, ..Self::default() }
    }

    /// Top-B for a given key expert count: 2 for 8 experts, 3 for 16.
    pub fn top_b_for(key_experts: usize) -> usize {
        if key_experts >= 16 {
            3
        } else {
            2.min(key_experts)
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::None => {}
            Ablation::NoQmoe => self.qmoe = false,
            Ablation::NoKmoe => self.kmoe = false,
            Ablation::NoA3moe => {
                self.qmoe = false;
                self.kmoe = false;
            }
        }
        self
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.lora_rank == 0 || self.expert_rank == 0 {
            return Err(Error::Config("adapter ranks must be positive".into()));
        }
        if self.qmoe && self.query_experts == 0 {
            return Err(Error::Config("query mixture needs at least one expert".into()));
        }
        if self.kmoe && (self.key_experts == 0 || self.top_b == 0 || self.top_b > self.key_experts) {
            return Err(Error::Parameter(format!(
                "top-B must lie in 1..={} key experts, got {}",
                self.key_experts, self.top_b
            )));
        }
        if self.gate_hidden(model) == 0 {
            return Err(Error::Config("gate hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn gate_hidden(&self, model: &ModelConfig) -> usize {
        self.gate_hidden.unwrap_or(model.d_model / 2)
    }

    fn has_dense(&self, proj: Proj) -> bool {
        match proj {
            Proj::Query => !self.qmoe || self.dense_qk,
            Proj::Key => !self.kmoe || self.dense_qk,
            _ => true,
        }
    }
}

/// A single low-rank delta `scale·B·A` with `A: [r×d_in]`, `B: [d_out×r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// The full `[d_out×d_in]` delta.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scale))
    }
}

/// Experts of one mixture; all share a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<LoraAdapter>,
}

impl ExpertBank {
    pub fn new(experts: Vec<LoraAdapter>) -> Result<Self> {
        let first = experts.first().ok_or_else(|| Error::Parameter("expert bank needs at least one expert".into()))?;
        let (sa, sb) = (first.a.shape().to_vec(), first.b.shape().to_vec());
        if experts.iter().any(|e| e.a.shape() != sa.as_slice() || e.b.shape() != sb.as_slice()) {
            return Err(dim_err("expert_bank", "experts differ in shape"));
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

/// Two-layer gate MLP: `gelu(x·W1 + b1)·W2 + b2`, `W1: [d×d_g]`, `W2: [d_g×O]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNetwork {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GatingNetwork {
    pub fn outputs(&self) -> usize {
        self.w2.cols()
    }
}

/// Routing outcome for one gate evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    /// Softmax gate weights.
    pub weights: Vec<f64>,
    /// Experts that contribute. All true for the query mixture.
    pub kept: Vec<bool>,
    /// Number of kept experts.
    pub top: usize,
}

/// Marks the `b` largest weights; ties go to the lower index.
pub fn top_b_mask(weights: &[f64], b: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]).then(i.cmp(&j)));
    let mut kept = vec![false; weights.len()];
    for &i in order.iter().take(b) {
        kept[i] = true;
    }
    kept
}

#[derive(Debug, Clone, Copy)]
pub struct LoraIds {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GateIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct MoeIds {
    pub experts: Vec<LoraIds>,
    pub gate: GateIds,
}

#[derive(Debug, Clone)]
pub struct LayerAdapters {
    dense: Vec<Option<LoraIds>>,
    pub qmoe: Option<MoeIds>,
    pub kmoe: Option<MoeIds>,
}

impl LayerAdapters {
    pub fn dense(&self, proj: Proj) -> Option<LoraIds> {
        self.dense[proj as usize]
    }
}

/// All trainable adapter parameters of a model.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    pub store: ParamStore,
    layers: Vec<LayerAdapters>,
}

impl AdapterSet {
    /// Fresh adapters: `A` small uniform noise, `B` zero, gates random.
    pub fn new(config: AdapterConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.d_model;
        let ff = model.ffn_width();
        let dg = config.gate_hidden(model);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(model.layers);
        let lora = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, d_in: usize, d_out: usize, r: usize| {
            let bound = config.init_scale / (d_in as f64).sqrt();
            LoraIds {
                a: store.add(format!("{name}.a"), uniform(rng, &[r, d_in], bound)),
                b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out, r])),
            }
        };
        for l in 0..model.layers {
            let mut dense = vec![None; Proj::ALL.len()];
            for proj in Proj::ALL {
                if !config.has_dense(proj) {
                    continue;
                }
                let (d_in, d_out) = match proj {
                    Proj::Up => (d, ff),
                    Proj::Down => (ff, d),
                    _ => (d, d),
                };
                dense[proj as usize] =
                    Some(lora(&mut store, &mut rng, format!("layers.{l}.lora.{}", proj.tag()), d_in, d_out, config.lora_rank));
            }
            let moe = |store: &mut ParamStore, rng: &mut ChaCha8Rng, kind: &str, count: usize| {
                let experts = (0..count)
                    .map(|o| lora(store, rng, format!("layers.{l}.{kind}.expert{o}"), d, d, config.expert_rank))
                    .collect();
                let gate = GateIds {
                    w1: store.add(format!("layers.{l}.{kind}.gate.w1"), normal(rng, &[d, dg], 1.0 / (d as f64).sqrt())),
                    b1: store.add(format!("layers.{l}.{kind}.gate.b1"), Tensor::zeros(&[dg])),
                    w2: store.add(format!("layers.{l}.{kind}.gate.w2"), normal(rng, &[dg, count], 1.0 / (dg as f64).sqrt())),
                    b2: store.add(format!("layers.{l}.{kind}.gate.b2"), Tensor::zeros(&[count])),
                };
                MoeIds { experts, gate }
            };
            let qmoe = config.qmoe.then(|| moe(&mut store, &mut rng, "qmoe", config.query_experts));
            let kmoe = config.kmoe.then(|| moe(&mut store, &mut rng, "kmoe", config.key_experts));
            layers.push(LayerAdapters { dense, qmoe, kmoe });
        }
        Ok(Self { config, store, layers })
    }

    pub fn layer(&self, l: usize) -> &LayerAdapters {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Whether a parameter is a gate bias (excluded from weight decay).
    pub fn is_gate_bias(&self, id: ParamId) -> bool {
        let name = self.store.name(id);
        name.ends_with(".gate.b1") || name.ends_with(".gate.b2")
    }

    /// Overwrites every adapter tensor (including `B`) with noise of the given
    /// scale. Used to exercise non-trivial deltas in tests and gradient checks.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.store.ids().collect::<Vec<_>>() {
            let shape = self.store.get(id).shape().to_vec();
            *self.store.get_mut(id) = uniform(&mut rng, &shape, scale);
        }
    }

    /// Sets every expert and dense LoRA `B` to zero, keeping gates.
    pub fn zero_deltas(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            if self.store.name(id).ends_with(".b") {
                let shape = self.store.get(id).shape().to_vec();
                *self.store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
    }

    /// Sets every expert `B` to zero, keeping dense LoRA and gates.
    pub fn zero_expert_deltas(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id);
            if name.contains(".expert") && name.ends_with(".b") {
                let shape = self.store.get(id).shape().to_vec();
                *self.store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
    }

    /// Copies every tensor whose name also exists in `other`.
    pub fn copy_shared_from(&mut self, other: &AdapterSet) -> Result<usize> {
        let mut copied = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            if let Some(src) = other.store.find(self.store.name(id)) {
                let value = other.store.get(src);
                if value.shape() != self.store.get(id).shape() {
                    return Err(Error::Parameter(format!("{}: shape mismatch", self.store.name(id))));
                }
                *self.store.get_mut(id) = value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn dense_adapter(&self, layer: usize, proj: Proj) -> Option<LoraAdapter> {
        self.layers[layer].dense(proj).map(|ids| self.lora_value(ids))
    }

    fn lora_value(&self, ids: LoraIds) -> LoraAdapter {
        LoraAdapter { a: self.store.get(ids.a).clone(), b: self.store.get(ids.b).clone(), scale: 1.0 }
    }

    /// Expert bank and gate of a layer's query (`key = false`) or key mixture.
    pub fn mixture(&self, layer: usize, key: bool) -> Option<(ExpertBank, GatingNetwork)> {
        let ids = if key { self.layers[layer].kmoe.as_ref() } else { self.layers[layer].qmoe.as_ref() }?;
        let bank = ExpertBank { experts: ids.experts.iter().map(|e| self.lora_value(*e)).collect() };
        let g = ids.gate;
        let gate = GatingNetwork {
            w1: self.store.get(g.w1).clone(),
            b1: self.store.get(g.b1).clone(),
            w2: self.store.get(g.w2).clone(),
            b2: self.store.get(g.b2).clone(),
        };
        Some((bank, gate))
    }

    /// `base + x·Aᵀ·Bᵀ` when the projection carries a dense LoRA.
    pub(crate) fn apply_dense(&self, tape: &mut Tape, bound: &Bound, layer: usize, proj: Proj, x: Var, base: Var) -> Result<Var> {
        match self.layers[layer].dense(proj) {
            Some(ids) => {
                let delta = low_rank(tape, x, bound.get(ids.a), bound.get(ids.b))?;
                tape.add(base, delta)
            }
            None => Ok(base),
        }
    }

    /// Adds the prompt-routed query delta to `q` for every row of `x`.
    pub(crate) fn apply_qmoe(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        x: Var,
        prompt: Var,
        q: Var,
    ) -> Result<(Var, Option<RouterDecision>)> {
        let Some(ids) = &self.layers[layer].qmoe else { return Ok((q, None)) };
        let pooled = tape.mean_rows(prompt)?;
        let alpha = gate_probs(tape, bind_gate(bound, &ids.gate), pooled)?;
        let weights = tape.value(alpha).data().to_vec();
        let mut out = q;
        for (o, e) in ids.experts.iter().enumerate() {
            let y = low_rank(tape, x, bound.get(e.a), bound.get(e.b))?;
            let y = tape.scale_rows_by(y, alpha, o)?;
            out = tape.add(out, y)?;
        }
        let n = weights.len();
        Ok((out, Some(RouterDecision { weights, kept: vec![true; n], top: n })))
    }

    /// Per-visual-token key delta for the visual rows `x_vis`, or `None` when
    /// the key mixture is disabled.
    pub(crate) fn kmoe_delta(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        x_vis: Var,
    ) -> Result<Option<(Var, Vec<RouterDecision>)>> {
        let Some(ids) = &self.layers[layer].kmoe else { return Ok(None) };
        let probs = gate_probs(tape, bind_gate(bound, &ids.gate), x_vis)?;
        let (coef, decisions) = sparse_coefficients(tape, probs, self.config.top_b, self.config.renormalize)?;
        let used: Vec<bool> = (0..ids.experts.len()).map(|o| decisions.iter().any(|d| d.kept[o])).collect();
        let mut acc: Option<Var> = None;
        for (o, e) in ids.experts.iter().enumerate() {
            if !used[o] {
                continue;
            }
            let y = low_rank(tape, x_vis, bound.get(e.a), bound.get(e.b))?;
            let y = tape.scale_rows_by(y, coef, o)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.map(|a| (a, decisions)))
    }
}

/// Tape handles for a gate MLP.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn bind_gate(bound: &Bound, g: &GateIds) -> GateVars {
    GateVars { w1: bound.get(g.w1), b1: bound.get(g.b1), w2: bound.get(g.w2), b2: bound.get(g.b2) }
}

/// `x·Aᵀ·Bᵀ`
fn low_rank(tape: &mut Tape, x: Var, a: Var, b: Var) -> Result<Var> {
    let u = tape.matmul_bt(x, a)?;
    tape.matmul_bt(u, b)
}

/// Row-wise `softmax(MLP(x))`.
pub fn gate_probs(tape: &mut Tape, gate: GateVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, gate.w1)?;
    let h = tape.add_row(h, gate.b1)?;
    let h = tape.gelu(h);
    let logits = tape.matmul(h, gate.w2)?;
    let logits = tape.add_row(logits, gate.b2)?;
    tape.softmax_rows(logits, None)
}

/// Zeroes all but the top-B weights of every row. The selection is a
/// constant of the pass; gradients flow through the kept weights only.
pub fn sparse_coefficients(tape: &mut Tape, probs: Var, b: usize, renormalize: bool) -> Result<(Var, Vec<RouterDecision>)> {
    let p = tape.value(probs).clone();
    let (rows, experts) = p.dims2();
    if b == 0 || b > experts {
        return Err(Error::Parameter(format!("top-B must lie in 1..={experts}, got {b}")));
    }
    let mut mask = Vec::with_capacity(rows * experts);
    let mut decisions = Vec::with_capacity(rows);
    for i in 0..rows {
        let kept = top_b_mask(p.row(i), b);
        mask.extend(kept.iter().map(|&k| if k { 1.0 } else { 0.0 }));
        decisions.push(RouterDecision { weights: p.row(i).to_vec(), kept, top: b });
    }
    let mask: Arc<[f64]> = mask.into();
    let mut coef = tape.mul_const(probs, mask)?;
    if renormalize {
        coef = tape.normalize_rows(coef)?;
    }
    Ok((coef, decisions))
}

/// Binds value-level bank and gate to a fresh set of leaves.
fn bind_values(tape: &mut Tape, bank: &ExpertBank, gate: &GatingNetwork) -> (Vec<(Var, Var, f64)>, GateVars) {
    let experts = bank
        .experts
        .iter()
        .map(|e| (tape.constant(e.a.clone()), tape.constant(e.b.clone()), e.scale))
        .collect();
    let g = GateVars {
        w1: tape.constant(gate.w1.clone()),
        b1: tape.constant(gate.b1.clone()),
        w2: tape.constant(gate.w2.clone()),
        b2: tape.constant(gate.b2.clone()),
    };
    (experts, g)
}

/// Explicit `Σ_o coef[row,o]·scale_o·B_o·A_o` on the tape.
pub fn mixture_matrix(tape: &mut Tape, experts: &[(Var, Var, f64)], coef: Var, row: usize) -> Result<Var> {
    let c = tape.select_block(coef, &[row], 0, experts.len())?;
    let mut acc: Option<Var> = None;
    for (o, &(a, b, scale)) in experts.iter().enumerate() {
        let mut m = tape.matmul(b, a)?;
        if scale != 1.0 {
            m = tape.scale(m, scale);
        }
        let m = tape.scale_rows_by(m, c, o)?;
        acc = Some(match acc {
            Some(x) => tape.add(x, m)?,
            None => m,
        });
    }
    acc.ok_or_else(|| Error::Parameter("empty expert bank".into()))
}

/// Prompt-level query delta: `α = softmax(MLP(mean_pool(H_p)))`,
/// `ΔW_q = Σ_o α_o·E_o`.
pub fn qmoe_delta(h_p: &Tensor, bank: &ExpertBank, gate: &GatingNetwork) -> Result<(Tensor, RouterDecision)> {
    check_gate(bank, gate)?;
    let mut tape = Tape::new();
    let (experts, g) = bind_values(&mut tape, bank, gate);
    let h = tape.constant(h_p.clone());
    let pooled = tape.mean_rows(h)?;
    let alpha = gate_probs(&mut tape, g, pooled)?;
    let delta = mixture_matrix(&mut tape, &experts, alpha, 0)?;
    let weights = tape.value(alpha).data().to_vec();
    let n = weights.len();
    Ok((tape.value(delta).clone(), RouterDecision { weights, kept: vec![true; n], top: n }))
}

/// Token-level sparse key deltas: for each visual token `c`,
/// `β^c = softmax(MLP(H_v^c))` and `ΔW_k^c = Σ_o 1[o ∈ top-B(β^c)]·β^c_o·E_o`.
pub fn kmoe_delta_per_token(
    h_v: &Tensor,
    bank: &ExpertBank,
    gate: &GatingNetwork,
    top_b: usize,
    renormalize: bool,
) -> Result<(Vec<Tensor>, Vec<RouterDecision>)> {
    check_gate(bank, gate)?;
    if top_b == 0 || top_b > bank.len() {
        return Err(Error::Parameter(format!("top-B must lie in 1..={}, got {top_b}", bank.len())));
    }
    let mut tape = Tape::new();
    let (experts, g) = bind_values(&mut tape, bank, gate);
    let h = tape.constant(h_v.clone());
    let probs = gate_probs(&mut tape, g, h)?;
    let (coef, decisions) = sparse_coefficients(&mut tape, probs, top_b, renormalize)?;
    let mut deltas = Vec::with_capacity(h_v.rows());
    for c in 0..h_v.rows() {
        let d = mixture_matrix(&mut tape, &experts, coef, c)?;
        deltas.push(tape.value(d).clone());
    }
    Ok((deltas, decisions))
}

fn check_gate(bank: &ExpertBank, gate: &GatingNetwork) -> Result<()> {
    if bank.is_empty() || gate.outputs() != bank.len() {
        return Err(dim_err(
            "gate",
            format!("gate emits {} weights for {} experts", gate.outputs(), bank.len()),
        ));
    }
    Ok(())
}

/// `out_i = x_i·(W + D + Δ_i)ᵀ` with `Δ_i = 0` where no per-row delta is given.
pub fn adapted_projection(
    x: &Tensor,
    base_w: &Tensor,
    dense: Option<&LoraAdapter>,
    row_deltas: Option<&[Option<Tensor>]>,
) -> Result<Tensor> {
    let (s, d_in) = x.dims2();
    let (d_out, w_in) = base_w.dims2();
    if d_in != w_in {
        return Err(dim_err("adapted_projection", format!("x {:?} vs W {:?}", x.shape(), base_w.shape())));
    }
    let mut w = base_w.clone();
    if let Some(lora) = dense {
        w = w.add(&lora.delta()?)?;
    }
    if let Some(rd) = row_deltas {
        if rd.len() != s {
            return Err(dim_err("adapted_projection", format!("{} row deltas for {s} rows", rd.len())));
        }
    }
    let mut out = Vec::with_capacity(s * d_out);
    for i in 0..s {
        let wi = match row_deltas.and_then(|rd| rd[i].as_ref()) {
            Some(delta) => w.add(delta)?,
            None => w.clone(),
        };
        let xi = Tensor::new(vec![1, d_in], x.row(i).to_vec())?;
        out.extend_from_slice(xi.matmul(&wi.transpose())?.data());
    }
    Tensor::new(vec![s, d_out], out)
}
