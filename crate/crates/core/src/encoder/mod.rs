//! Four-stage attention encoder with skeleton and order heads.
//!
//! Each scalar `x_ij` is projected to a `d`-vector; the observation stack
//! attends across variables within a row; the variable stack lets `m`
//! learned summary tokens cross-attend to a variable's `n` observation
//! representations; the summaries are merged into one embedding per
//! variable; the context stack attends across variables. No positional
//! encodings are used, so the map is invariant to row order and equivariant
//! to column order.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};

use std::collections::HashMap;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dist::EdgeBeliefs;
use crate::error::Error;
use crate::Result;

/// Logits are clipped to this magnitude when packaged as [`EdgeBeliefs`],
/// which requires `ν` strictly inside `(0, 1)` in double precision.
pub const LOGIT_LIMIT: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub m: usize,
    pub hidden_mult_skeleton: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 32,
            blocks: 2,
            heads: 4,
            ffn_mult: 4,
            m: 4,
            hidden_mult_skeleton: 2,
        }
    }
}

impl EncoderConfig {
    /// Full-size configuration: `d = 512`, three blocks per stage, eight
    /// heads, `m = 16`.
    pub fn large() -> Self {
        EncoderConfig {
            d: 512,
            blocks: 3,
            heads: 8,
            ffn_mult: 4,
            m: 16,
            hidden_mult_skeleton: 2,
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            d: 8,
            blocks: 1,
            heads: 2,
            ffn_mult: 2,
            m: 2,
            hidden_mult_skeleton: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("m", self.m),
            ("hidden_mult_skeleton", self.hidden_mult_skeleton),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("d = {} is not divisible by {} heads", self.d, self.heads),
            ));
        }
        Ok(())
    }

    fn ffn_dim(&self) -> usize {
        self.d * self.ffn_mult
    }

    fn skel_hidden(&self) -> usize {
        self.d * self.hidden_mult_skeleton
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal { fan_in: usize },
    Zeros,
    Ones,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(cfg: &EncoderConfig) -> Vec<Slot> {
    let d = cfg.d;
    let mut slots = Vec::new();
    let mut add =
        |name: String, shape: Vec<usize>, init: Init| slots.push(Slot { name, shape, init });
    let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
        add(format!("{prefix}.g"), vec![d], Init::Ones);
        add(format!("{prefix}.b"), vec![d], Init::Zeros);
    };
    let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
        for w in ["q", "k", "v", "o"] {
            add(
                format!("{prefix}.w{w}"),
                vec![d, d],
                Init::Normal { fan_in: d },
            );
            add(format!("{prefix}.b{w}"), vec![d], Init::Zeros);
        }
    };
    let ffn = |add: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
        let f = cfg.ffn_dim();
        add(
            format!("{prefix}.w1"),
            vec![d, f],
            Init::Normal { fan_in: d },
        );
        add(format!("{prefix}.b1"), vec![f], Init::Zeros);
        add(
            format!("{prefix}.w2"),
            vec![f, d],
            Init::Normal { fan_in: f },
        );
        add(format!("{prefix}.b2"), vec![d], Init::Zeros);
    };

    add("proj.w".into(), vec![1, d], Init::Normal { fan_in: 1 });
    add("proj.b".into(), vec![d], Init::Zeros);
    for stage in ["obs", "var", "ctx"] {
        if stage == "var" {
            add(
                "var.tokens".into(),
                vec![cfg.m, d],
                Init::Normal { fan_in: d },
            );
        }
        for b in 0..cfg.blocks {
            let p = format!("{stage}.{b}");
            norm(&mut add, &format!("{p}.ln1"));
            attn(&mut add, &format!("{p}.attn"));
            norm(&mut add, &format!("{p}.ln2"));
            if stage == "var" {
                attn(&mut add, &format!("{p}.cross"));
                norm(&mut add, &format!("{p}.ln3"));
            }
            ffn(&mut add, &format!("{p}.ffn"));
        }
        norm(&mut add, &format!("{stage}.ln_f"));
        if stage == "var" {
            add(
                "merge.w".into(),
                vec![cfg.m * d, d],
                Init::Normal { fan_in: cfg.m * d },
            );
            add("merge.b".into(), vec![d], Init::Zeros);
        }
    }
    let hd = cfg.skel_hidden();
    // The first skeleton layer acts on [h_j ‖ h_k]; its two halves are
    // stored separately so the pair grid is a sum of per-node projections.
    add(
        "skel.w1a".into(),
        vec![d, hd],
        Init::Normal { fan_in: 2 * d },
    );
    add(
        "skel.w1b".into(),
        vec![d, hd],
        Init::Normal { fan_in: 2 * d },
    );
    add("skel.b1".into(), vec![hd], Init::Zeros);
    add("skel.w2".into(), vec![hd, 1], Init::Normal { fan_in: hd });
    add("skel.b2".into(), vec![1], Init::Zeros);
    add("ord.w".into(), vec![d, 1], Init::Normal { fan_in: d });
    add("ord.b".into(), vec![1], Init::Zeros);
    slots
}

/// Named trainable arrays in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl EncoderParams {
    /// Scaled-normal weights (std `1/√fan_in`), zero biases, unit gains.
    pub fn init(config: &EncoderConfig, rng: &mut impl RngCore) -> Result<Self> {
        config.validate()?;
        let slots = layout(config);
        let mut names = Vec::with_capacity(slots.len());
        let mut tensors = Vec::with_capacity(slots.len());
        for slot in slots {
            let len = slot.shape.iter().product();
            let data = match slot.init {
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
                Init::Normal { fan_in } => {
                    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
                    (0..len).map(|_| dist.sample(rng)).collect()
                }
            };
            names.push(slot.name);
            tensors.push(Tensor::new(&slot.shape, data)?);
        }
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    /// Rebuilds from named arrays, checking them against the config layout.
    pub fn from_named(config: EncoderConfig, arrays: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let slots = layout(&config);
        if slots.len() != arrays.len() {
            return Err(Error::Format(format!(
                "expected {} arrays for this config, found {}",
                slots.len(),
                arrays.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (slot, (name, t)) in slots.into_iter().zip(arrays) {
            if slot.name != name || slot.shape != t.shape() {
                return Err(Error::Format(format!(
                    "array `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    slot.name,
                    slot.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config, names, tensors))
    }

    fn assemble(config: EncoderConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        EncoderParams {
            config,
            names,
            tensors,
            index,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every array on `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'a> {
    params: &'a EncoderParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Var {
        self.vars[self.params.index[name]]
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }
}

/// Stage in which an attention score matrix was formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Observation,
    VariableSelf,
    VariableCross,
    Context,
}

/// Shapes of every attention score matrix built during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    /// `(stage, batch, queries, keys)`; `batch` includes the head axis.
    pub entries: Vec<(Stage, usize, usize, usize)>,
}

/// Tape handles for the two head outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// p×p symmetric edge logits.
    pub logits: Var,
    /// Length-p order scores.
    pub scores: Var,
}

struct Ctx<'a, 'b> {
    tape: &'a mut Tape,
    bound: &'a Bound<'b>,
    trace: Option<&'a mut AttentionTrace>,
}

impl Ctx<'_, '_> {
    fn w(&self, name: &str) -> Var {
        self.bound.var(name)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (g, b) = (
            self.w(&format!("{prefix}.g")),
            self.w(&format!("{prefix}.b")),
        );
        self.tape.layer_norm(x, g, b)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.w(w), self.w(b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    // [B, L, d] → [B·H, L, d/H]
    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let h = self.bound.config().heads;
        let (b, l, d) = (s[0], s[1], s[2]);
        if h == 1 {
            return Ok(x);
        }
        self.tape
            .rearrange(x, &[b, l, h, d / h], &[0, 2, 1, 3], &[b * h, l, d / h])
    }

    // [B·H, L, d/H] → [B, L, d]
    fn merge_heads(&mut self, x: Var, b: usize) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let h = self.bound.config().heads;
        let (l, dh) = (s[1], s[2]);
        if h == 1 {
            return Ok(x);
        }
        self.tape
            .rearrange(x, &[b, h, l, dh], &[0, 2, 1, 3], &[b, l, h * dh])
    }

    /// Multi-head attention of `q_in` [B, Lq, d] over `kv_in` [B, Lk, d].
    fn attention(&mut self, q_in: Var, kv_in: Var, prefix: &str, stage: Stage) -> Result<Var> {
        let batch = self.tape.shape(q_in)[0];
        let d = self.bound.config().d;
        let dh = d / self.bound.config().heads;
        let q = self.linear(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let (q, k, v) = (
            self.split_heads(q)?,
            self.split_heads(k)?,
            self.split_heads(v)?,
        );
        let scores = self.tape.bmm(q, k, true)?;
        if let Some(trace) = self.trace.as_deref_mut() {
            let s = self.tape.shape(scores);
            trace.entries.push((stage, s[0], s[1], s[2]));
        }
        let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = self.tape.softmax(scores);
        let o = self.tape.bmm(att, v, false)?;
        let o = self.merge_heads(o, batch)?;
        self.linear(o, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feedforward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Pre-norm self-attention stack over the middle axis of [B, L, d].
    fn self_stack(&mut self, mut x: Var, stage_name: &str, stage: Stage) -> Result<Var> {
        for b in 0..self.bound.config().blocks {
            let p = format!("{stage_name}.{b}");
            let y = self.norm(x, &format!("{p}.ln1"))?;
            let y = self.attention(y, y, &format!("{p}.attn"), stage)?;
            x = self.tape.add(x, y)?;
            let y = self.norm(x, &format!("{p}.ln2"))?;
            let y = self.feedforward(y, &format!("{p}.ffn"))?;
            x = self.tape.add(x, y)?;
        }
        self.norm(x, &format!("{stage_name}.ln_f"))
    }

    /// Summary tokens [p, m, d] reading from per-variable memories [p, n, d].
    fn variable_stack(&mut self, memory: Var, p: usize) -> Result<Var> {
        let tokens = self.w("var.tokens");
        let mut z = self.tape.tile(tokens, p);
        for b in 0..self.bound.config().blocks {
            let pre = format!("var.{b}");
            let y = self.norm(z, &format!("{pre}.ln1"))?;
            let y = self.attention(y, y, &format!("{pre}.attn"), Stage::VariableSelf)?;
            z = self.tape.add(z, y)?;
            let y = self.norm(z, &format!("{pre}.ln2"))?;
            let y = self.attention(y, memory, &format!("{pre}.cross"), Stage::VariableCross)?;
            z = self.tape.add(z, y)?;
            let y = self.norm(z, &format!("{pre}.ln3"))?;
            let y = self.feedforward(y, &format!("{pre}.ffn"))?;
            z = self.tape.add(z, y)?;
        }
        self.norm(z, "var.ln_f")
    }

    fn embed(&mut self, x: &Tensor) -> Result<Var> {
        let (n, p) = match x.shape() {
            &[n, p] if n > 0 && p > 0 => (n, p),
            s => {
                return Err(Error::shape(
                    "embed",
                    format!("expected a non-empty n×p matrix, got {s:?}"),
                ))
            }
        };
        if !x.is_finite() {
            return Err(Error::NonFinite("input data".into()));
        }
        let d = self.bound.config().d;
        let m = self.bound.config().m;
        let xs = self.tape.constant(x.clone().with_shape(vec![n * p, 1]));
        let r = self.linear(xs, "proj.w", "proj.b")?;
        let r = self.tape.reshape(r, &[n, p, d])?;
        let r = self.self_stack(r, "obs", Stage::Observation)?;
        let memory = self.tape.permute(r, &[1, 0, 2])?;
        let c = self.variable_stack(memory, p)?;
        let c = self.tape.reshape(c, &[p, m * d])?;
        let h = self.linear(c, "merge.w", "merge.b")?;
        let h = self.tape.reshape(h, &[1, p, d])?;
        let h = self.self_stack(h, "ctx", Stage::Context)?;
        self.tape.reshape(h, &[p, d])
    }

    fn skeleton_head(&mut self, h: Var) -> Result<Var> {
        let p = self.tape.shape(h)[0];
        let (wa, wb) = (self.w("skel.w1a"), self.w("skel.w1b"));
        let u = self.tape.matmul(h, wa)?;
        let v = self.tape.matmul(h, wb)?;
        let pre = self.tape.pair_sum(u, v)?;
        let b1 = self.w("skel.b1");
        let pre = self.tape.add_bias(pre, b1)?;
        let act = self.tape.gelu(pre);
        let e = self.linear(act, "skel.w2", "skel.b2")?;
        let e = self.tape.reshape(e, &[p, p])?;
        let et = self.tape.transpose(e)?;
        let sum = self.tape.add(e, et)?;
        Ok(self.tape.scale(sum, 0.5))
    }

    fn order_head(&mut self, h: Var) -> Result<Var> {
        let p = self.tape.shape(h)[0];
        let s = self.linear(h, "ord.w", "ord.b")?;
        self.tape.reshape(s, &[p])
    }
}

/// Variable embeddings `[p, d]` for data `x` (`n×p`).
pub fn embed(tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
    Ctx {
        tape,
        bound,
        trace: None,
    }
    .embed(x)
}

/// Like [`embed`], recording every attention score shape into `trace`.
pub fn embed_traced(
    tape: &mut Tape,
    bound: &Bound,
    x: &Tensor,
    trace: &mut AttentionTrace,
) -> Result<Var> {
    Ctx {
        tape,
        bound,
        trace: Some(trace),
    }
    .embed(x)
}

/// Janossy-pooled pair logits `(g([h_j‖h_k]) + g([h_k‖h_j])) / 2`, `[p, p]`.
pub fn skeleton_head(tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
    Ctx {
        tape,
        bound,
        trace: None,
    }
    .skeleton_head(h)
}

/// Linear per-variable order scores, `[p]`.
pub fn order_head(tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
    Ctx {
        tape,
        bound,
        trace: None,
    }
    .order_head(h)
}

/// Embedding followed by both heads.
pub fn forward_tape(tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<HeadOutputs> {
    let mut ctx = Ctx {
        tape,
        bound,
        trace: None,
    };
    let h = ctx.embed(x)?;
    let logits = ctx.skeleton_head(h)?;
    let scores = ctx.order_head(h)?;
    Ok(HeadOutputs { logits, scores })
}

/// Packages head values as beliefs, clipping logits to `±LOGIT_LIMIT`.
pub fn beliefs_from_heads(tape: &Tape, out: HeadOutputs) -> Result<EdgeBeliefs> {
    let logits = tape.value(out.logits);
    let p = logits.shape()[0];
    let clipped: Vec<f64> = logits
        .data()
        .iter()
        .map(|e| e.clamp(-LOGIT_LIMIT, LOGIT_LIMIT))
        .collect();
    EdgeBeliefs::from_logits(p, &clipped, tape.value(out.scores).data().to_vec())
}

/// Edge beliefs for data `x` under `params`.
pub fn forward(params: &EncoderParams, x: &Tensor) -> Result<EdgeBeliefs> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = forward_tape(&mut tape, &bound, x)?;
    beliefs_from_heads(&tape, out)
}

/// Parameter count of a configuration without allocating it.
pub fn param_count(config: &EncoderConfig) -> usize {
    layout(config)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}
