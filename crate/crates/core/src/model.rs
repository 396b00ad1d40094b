//! Toy vision-language decoder.
//!
//! A sequence is laid out as `[visual N | prompt P | answer T]`. Visual
//! queries see every visual key and nothing else; text queries see every
//! visual key plus the text keys at or before their own position. Visual
//! tokens carry no positional encoding, so the whole pass is equivariant to
//! permutations of the visual tokens. Text tokens get learned absolute
//! position embeddings.
//!
//! Blocks are pre-norm: `x += attn(ln1(x))`, `x += ffn(ln2(x))`, with a GELU
//! feed-forward of width `4·d_model`. Linear weights are stored `[d_out×d_in]`
//! and applied as `x·Wᵀ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, Proj, RouterDecision};
use crate::attention::{AttentionStack, Spans};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{normal, Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    /// Width of the encoded patch features.
    pub d_visual: usize,
    pub d_model: usize,
    pub vocab: usize,
    /// Patch grid side; the visual token count is `grid²`.
    pub grid: usize,
    /// Maximum prompt plus answer length.
    pub max_text: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 4, d_visual: 16, d_model: 64, vocab: 64, grid: 8, max_text: 8 }
    }
}

impl ModelConfig {
    pub fn visual_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.d_model
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_visual", self.d_visual),
            ("d_model", self.d_model),
            ("vocab", self.vocab),
            ("grid", self.grid),
            ("max_text", self.max_text),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }
}

/// Encoded patch features of one image on a `grid × grid` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualInput {
    pub features: Tensor,
    pub grid: usize,
}

impl VisualInput {
    pub fn new(features: Tensor, grid: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != grid * grid {
            return Err(Error::Geometry(format!(
                "{:?} features do not form a {grid}x{grid} grid",
                features.shape()
            )));
        }
        Ok(Self { features, grid })
    }

    pub fn tokens(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_up: ParamId,
    b_up: ParamId,
    w_down: ParamId,
    b_down: ParamId,
}

#[derive(Debug, Clone)]
struct BaseIds {
    align_w: ParamId,
    align_b: ParamId,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head: ParamId,
}

/// Frozen base parameters.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    ids: BaseIds,
}

/// Result of a value-level forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row per emitting position; row `t` predicts answer token `t`.
    pub logits: Tensor,
    pub attention: AttentionStack,
    /// Normed layer inputs at prompt positions, per layer.
    pub prompt_states: Vec<Tensor>,
    /// Normed layer inputs at visual positions, per layer.
    pub visual_states: Vec<Tensor>,
    pub query_routes: Vec<Option<RouterDecision>>,
    pub key_routes: Vec<Option<Vec<RouterDecision>>>,
}

/// Handles into the tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub logits: Var,
    /// Attention probability nodes, `[L][H]`, each `[S×S]`.
    pub attn: Vec<Vec<Var>>,
    pub spans: Spans,
    pub normed: Vec<Var>,
    pub query_routes: Vec<Option<RouterDecision>>,
    pub key_routes: Vec<Option<Vec<RouterDecision>>>,
}

impl Pass {
    pub fn attention_stack(&self, tape: &Tape) -> AttentionStack {
        AttentionStack {
            maps: self.attn.iter().map(|l| l.iter().map(|&v| tape.value(v).clone()).collect()).collect(),
            spans: self.spans.clone(),
        }
    }
}

/// Greedy decoding result.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Attention of the pass that produced each token.
    pub steps: Vec<AttentionStack>,
}

impl Generation {
    /// The last pass's stack; its emitting rows cover every generated token.
    pub fn final_stack(&self) -> &AttentionStack {
        self.steps.last().expect("at least one generated token")
    }
}

/// Visibility of key `j` from query `i`.
pub fn attention_mask(visual: usize, total: usize) -> Vec<bool> {
    let mut mask = vec![false; total * total];
    for i in 0..total {
        for j in 0..total {
            mask[i * total + j] = j < visual || (i >= visual && j <= i);
        }
    }
    mask
}

impl BaseModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ff = config.ffn_width();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut s = ParamStore::new();
        let align_w = s.add("base.align.w", normal(&mut rng, &[config.d_visual, d], inv(config.d_visual)));
        let align_b = s.add("base.align.b", Tensor::zeros(&[d]));
        let tok_emb = s.add("base.tok_emb", normal(&mut rng, &[config.vocab, d], 1.0));
        let pos_emb = s.add("base.pos_emb", normal(&mut rng, &[config.max_text, d], 0.5));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |name: &str| format!("base.layers.{l}.{name}");
            layers.push(LayerIds {
                ln1_g: s.add(p("ln1.g"), Tensor::full(&[d], 1.0)),
                ln1_b: s.add(p("ln1.b"), Tensor::zeros(&[d])),
                wq: s.add(p("wq"), normal(&mut rng, &[d, d], inv(d))),
                wk: s.add(p("wk"), normal(&mut rng, &[d, d], inv(d))),
                wv: s.add(p("wv"), normal(&mut rng, &[d, d], inv(d))),
                wo: s.add(p("wo"), normal(&mut rng, &[d, d], inv(d))),
                ln2_g: s.add(p("ln2.g"), Tensor::full(&[d], 1.0)),
                ln2_b: s.add(p("ln2.b"), Tensor::zeros(&[d])),
                w_up: s.add(p("ffn.up.w"), normal(&mut rng, &[ff, d], inv(d))),
                b_up: s.add(p("ffn.up.b"), Tensor::zeros(&[ff])),
                w_down: s.add(p("ffn.down.w"), normal(&mut rng, &[d, ff], inv(ff))),
                b_down: s.add(p("ffn.down.b"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = s.add("base.lnf.g", Tensor::full(&[d], 1.0));
        let lnf_b = s.add("base.lnf.b", Tensor::zeros(&[d]));
        let head = s.add("base.head", normal(&mut rng, &[config.vocab, d], inv(d)));
        let ids = BaseIds { align_w, align_b, tok_emb, pos_emb, layers, lnf_g, lnf_b, head };
        Ok(Self { config, store: s, ids })
    }

    /// Named access for tests and tools, e.g. `base.layers.0.wq`.
    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.store.find(name).ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))?;
        Ok(self.store.get_mut(id))
    }

    /// `X_v·W_align + b_align`.
    pub fn encode_and_project(&self, v: &VisualInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = self.project_visual(&mut tape, &bound, v)?;
        Ok(tape.value(x).clone())
    }

    fn project_visual(&self, tape: &mut Tape, bound: &Bound, v: &VisualInput) -> Result<Var> {
        let cfg = &self.config;
        if v.features.cols() != cfg.d_visual {
            return Err(dim_err(
                "encode_and_project",
                format!("features {:?} vs d_visual {}", v.features.shape(), cfg.d_visual),
            ));
        }
        if v.grid != cfg.grid || v.tokens() != cfg.visual_tokens() {
            return Err(Error::Geometry(format!(
                "image has {} tokens on grid {}, model expects grid {}",
                v.tokens(),
                v.grid,
                cfg.grid
            )));
        }
        let x = tape.constant(v.features.clone());
        let y = tape.matmul(x, bound.get(self.ids.align_w))?;
        tape.add_row(y, bound.get(self.ids.align_b))
    }

    fn check_text(&self, prompt: &[usize], answer_len: usize) -> Result<()> {
        let cfg = &self.config;
        if prompt.is_empty() {
            return Err(Error::Capacity("prompt must hold at least one token".into()));
        }
        if prompt.len() + answer_len > cfg.max_text {
            return Err(Error::Capacity(format!(
                "{} prompt + {answer_len} answer tokens exceed the text capacity {}",
                prompt.len(),
                cfg.max_text
            )));
        }
        Ok(())
    }

    /// Teacher-forced pass on a caller-owned tape. The base is bound by the
    /// caller so gradients can be requested for it or not.
    pub fn pass(
        &self,
        tape: &mut Tape,
        base: &Bound,
        adapters: Option<(&AdapterSet, &Bound)>,
        v: &VisualInput,
        prompt: &[usize],
        answer: &[usize],
    ) -> Result<Pass> {
        if answer.is_empty() {
            return Err(Error::Capacity("answer must hold at least one token".into()));
        }
        self.run(tape, base, adapters, v, prompt, answer, answer.len())
    }

    /// Full pass over `[visual | prompt | answer]`, emitting logits for
    /// `emit` rows starting at the last prompt position.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape,
        base: &Bound,
        adapters: Option<(&AdapterSet, &Bound)>,
        v: &VisualInput,
        prompt: &[usize],
        answer: &[usize],
        emit: usize,
    ) -> Result<Pass> {
        let cfg = &self.config;
        self.check_text(prompt, answer.len())?;
        if let Some(adapters) = adapters {
            if adapters.0.num_layers() != cfg.layers {
                return Err(Error::Compatibility(format!(
                    "adapters cover {} layers, model has {}",
                    adapters.0.num_layers(),
                    cfg.layers
                )));
            }
        }
        let n = cfg.visual_tokens();
        let text: Vec<usize> = prompt.iter().chain(answer).copied().collect();
        let spans = Spans::new(n, prompt.len(), answer.len());
        let s = spans.len();

        let vis = self.project_visual(tape, base, v)?;
        let emb = tape.gather_rows(base.get(self.ids.tok_emb), &text)?;
        let positions: Vec<usize> = (0..text.len()).collect();
        let pos = tape.gather_rows(base.get(self.ids.pos_emb), &positions)?;
        let txt = tape.add(emb, pos)?;
        let mut x = tape.concat_rows(&[vis, txt])?;

        let mask = attention_mask(n, s);
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut attn = Vec::with_capacity(cfg.layers);
        let mut normed = Vec::with_capacity(cfg.layers);
        let mut query_routes = Vec::with_capacity(cfg.layers);
        let mut key_routes = Vec::with_capacity(cfg.layers);

        for (l, ids) in self.ids.layers.iter().enumerate() {
            let h = tape.layer_norm(x, base.get(ids.ln1_g), base.get(ids.ln1_b))?;
            normed.push(h);
            let linear = |tape: &mut Tape, proj: Proj, w: ParamId, input: Var| -> Result<Var> {
                let y = tape.matmul_bt(input, base.get(w))?;
                match adapters {
                    Some((set, ab)) => set.apply_dense(tape, ab, l, proj, input, y),
                    None => Ok(y),
                }
            };
            let mut q = linear(tape, Proj::Query, ids.wq, h)?;
            let mut k = linear(tape, Proj::Key, ids.wk, h)?;
            let val = linear(tape, Proj::Value, ids.wv, h)?;
            let (mut q_route, mut k_route) = (None, None);
            if let Some((set, ab)) = adapters {
                let prompt_rows = tape.slice_rows(h, spans.prompt.start, spans.prompt.len())?;
                let (q2, route) = set.apply_qmoe(tape, ab, l, h, prompt_rows, q)?;
                q = q2;
                q_route = route;
                let h_vis = tape.slice_rows(h, 0, n)?;
                if let Some((delta, routes)) = set.kmoe_delta(tape, ab, l, h_vis)? {
                    k = tape.add_rows_at(k, delta, 0)?;
                    k_route = Some(routes);
                }
            }
            query_routes.push(q_route);
            key_routes.push(k_route);

            let mut heads_out = Vec::with_capacity(cfg.heads);
            let mut layer_attn = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(val, hd * dh, dh)?;
                let scores = tape.matmul_bt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let a = tape.softmax_rows(scores, Some(&mask))?;
                layer_attn.push(a);
                heads_out.push(tape.matmul(a, vh)?);
            }
            attn.push(layer_attn);
            let cat = if heads_out.len() == 1 { heads_out[0] } else { tape.concat_cols(&heads_out)? };
            let o = linear(tape, Proj::Output, ids.wo, cat)?;
            x = tape.add(x, o)?;

            let h2 = tape.layer_norm(x, base.get(ids.ln2_g), base.get(ids.ln2_b))?;
            let up = linear(tape, Proj::Up, ids.w_up, h2)?;
            let up = tape.add_row(up, base.get(ids.b_up))?;
            let act = tape.gelu(up);
            let down = linear(tape, Proj::Down, ids.w_down, act)?;
            let down = tape.add_row(down, base.get(ids.b_down))?;
            x = tape.add(x, down)?;
        }

        let rows = tape.slice_rows(x, spans.prompt.end - 1, emit)?;
        let rows = tape.layer_norm(rows, base.get(self.ids.lnf_g), base.get(self.ids.lnf_b))?;
        let logits = tape.matmul_bt(rows, base.get(self.ids.head))?;
        Ok(Pass { logits, attn, spans, normed, query_routes, key_routes })
    }

    /// Teacher-forced value pass.
    pub fn forward(
        &self,
        v: &VisualInput,
        prompt: &[usize],
        answer: &[usize],
        adapters: Option<&AdapterSet>,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let base = self.store.bind(&mut tape, false);
        let ab = adapters.map(|a| (a, a.store.bind(&mut tape, false)));
        let pass = self.pass(&mut tape, &base, ab.as_ref().map(|(a, b)| (*a, b)), v, prompt, answer)?;
        let n = self.config.visual_tokens();
        let prompt_states = pass
            .normed
            .iter()
            .map(|&h| rows_of(tape.value(h), pass.spans.prompt.start, prompt.len()))
            .collect::<Result<_>>()?;
        let visual_states = pass.normed.iter().map(|&h| rows_of(tape.value(h), 0, n)).collect::<Result<_>>()?;
        Ok(ForwardOutput {
            logits: tape.value(pass.logits).clone(),
            attention: pass.attention_stack(&tape),
            prompt_states,
            visual_states,
            query_routes: pass.query_routes,
            key_routes: pass.key_routes,
        })
    }

    /// Greedy decoding of `max_len` tokens. Each step reruns the full pass
    /// over the tokens produced so far.
    pub fn generate_greedy(
        &self,
        v: &VisualInput,
        prompt: &[usize],
        max_len: usize,
        adapters: Option<&AdapterSet>,
    ) -> Result<Generation> {
        if max_len == 0 {
            return Err(Error::Generation("max_len must be at least 1".into()));
        }
        self.check_text(prompt, max_len - 1)?;
        let mut tokens = Vec::with_capacity(max_len);
        let mut steps = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            let mut tape = Tape::new();
            let base = self.store.bind(&mut tape, false);
            let ab = adapters.map(|a| (a, a.store.bind(&mut tape, false)));
            let emit = tokens.len() + 1;
            let pass = self.run(&mut tape, &base, ab.as_ref().map(|(a, b)| (*a, b)), v, prompt, &tokens, emit)?;
            let logits = tape.value(pass.logits);
            tokens.push(argmax(logits.row(emit - 1)));
            steps.push(pass.attention_stack(&tape));
        }
        Ok(Generation { tokens, steps })
    }
}

fn rows_of(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = t.cols();
    Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
