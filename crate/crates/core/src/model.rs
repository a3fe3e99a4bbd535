//! GPT-2 shaped decoder-only transformer whose attention reads and extends an
//! external key/value memory.
//!
//! The forward pass is written once against [`Graph`] so the same code runs
//! on the recording tape (training, gradient checks) and eagerly (inference).
//! Several independent sequences, each with its own memory, can share one
//! pass: row-wise work runs on the stacked rows and attention runs per
//! sequence.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{attention_weights_in, checkpoint, Eager, Graph, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            vocab_size: 2048,
            max_positions: 512,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// GPT-2 small dimensions.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer count, head count and widths must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Same layer, head and width layout, so memories are interchangeable.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.d_model == other.d_model
            && self.d_ff == other.d_ff
            && self.vocab_size == other.vocab_size
            && self.max_positions == other.max_positions
    }

    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        self.vocab_size * d + self.max_positions * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    /// Per-head projections stored out x in: `[head_dim, d_model]`.
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    pub wv: Vec<T>,
    pub bv: Vec<T>,
    /// Per-head output projections `[d_model, head_dim]`.
    pub wo: Vec<T>,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// One full parameter set. `T` is a tensor, a tape variable, or any other
/// per-parameter payload (names, optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Token embedding, also used as the output projection.
    pub wte: T,
    pub wpe: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_g: T,
    pub lnf_b: T,
}

pub type Params = Weights<Tensor>;

impl<T> LayerWeights<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerWeights<U> {
        let all = |v: &Vec<T>, f: &mut dyn FnMut(&T) -> U| v.iter().map(f).collect::<Vec<U>>();
        LayerWeights {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            wq: all(&self.wq, f),
            bq: all(&self.bq, f),
            wk: all(&self.wk, f),
            bk: all(&self.bk, f),
            wv: all(&self.wv, f),
            bv: all(&self.bv, f),
            wo: all(&self.wo, f),
            bo: f(&self.bo),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.extend([&self.ln1_g, &self.ln1_b]);
        for group in [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo] {
            out.extend(group.iter());
        }
        out.extend([
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]);
    }
}

impl<T> Weights<T> {
    /// Applies `f` to every entry in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            wte: f(&self.wte),
            wpe: f(&self.wpe),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            lnf_g: f(&self.lnf_g),
            lnf_b: f(&self.lnf_b),
        }
    }

    /// All entries in canonical order (the order `map` visits them).
    pub fn entries(&self) -> Vec<&T> {
        let mut out = vec![&self.wte, &self.wpe];
        for l in &self.layers {
            l.visit(&mut out);
        }
        out.extend([&self.lnf_g, &self.lnf_b]);
        out
    }

    /// Rebuilds a structure shaped like `self` from values in canonical order.
    pub fn refill<U>(&self, values: impl IntoIterator<Item = U>) -> Result<Weights<U>> {
        let mut values: Vec<Option<U>> = values.into_iter().map(Some).collect();
        if values.len() != self.entries().len() {
            return Err(Error::shape("Weights::refill", "value count does not match"));
        }
        let mut i = 0;
        Ok(self.map(|_| {
            i += 1;
            values[i - 1].take().expect("each value used once")
        }))
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(cfg: &ModelConfig) -> Weights<Slot> {
    let (d, f, hd) = (cfg.d_model, cfg.d_ff, cfg.head_dim());
    let s = |name: String, shape: &[usize], init| Slot {
        name,
        shape: shape.to_vec(),
        init,
    };
    let heads = |p: &str, what: &str, shape: &[usize], init| -> Vec<Slot> {
        (0..cfg.n_heads)
            .map(|h| s(format!("{p}.attn.{what}.{h}"), shape, init))
            .collect()
    };
    Weights {
        wte: s("wte".into(), &[cfg.vocab_size, d], Init::Normal),
        wpe: s("wpe".into(), &[cfg.max_positions, d], Init::Normal),
        layers: (0..cfg.n_layers)
            .map(|i| {
                let p = format!("layers.{i}");
                LayerWeights {
                    ln1_g: s(format!("{p}.ln1.gain"), &[d], Init::Ones),
                    ln1_b: s(format!("{p}.ln1.bias"), &[d], Init::Zeros),
                    wq: heads(&p, "wq", &[hd, d], Init::Normal),
                    bq: heads(&p, "bq", &[hd], Init::Zeros),
                    wk: heads(&p, "wk", &[hd, d], Init::Normal),
                    bk: heads(&p, "bk", &[hd], Init::Zeros),
                    wv: heads(&p, "wv", &[hd, d], Init::Normal),
                    bv: heads(&p, "bv", &[hd], Init::Zeros),
                    wo: heads(&p, "wo", &[d, hd], Init::Normal),
                    bo: s(format!("{p}.attn.bo"), &[d], Init::Zeros),
                    ln2_g: s(format!("{p}.ln2.gain"), &[d], Init::Ones),
                    ln2_b: s(format!("{p}.ln2.bias"), &[d], Init::Zeros),
                    w1: s(format!("{p}.mlp.w1"), &[f, d], Init::Normal),
                    b1: s(format!("{p}.mlp.b1"), &[f], Init::Zeros),
                    w2: s(format!("{p}.mlp.w2"), &[d, f], Init::Normal),
                    b2: s(format!("{p}.mlp.b2"), &[d], Init::Zeros),
                }
            })
            .collect(),
        lnf_g: s("lnf.gain".into(), &[d], Init::Ones),
        lnf_b: s("lnf.bias".into(), &[d], Init::Zeros),
    }
}

impl Params {
    /// Weights drawn from N(0, 0.02²) with a stream seeded by `cfg.seed`;
    /// layer-norm gains 1, biases 0.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Ok(layout(cfg).map(|slot| {
            let n = slot.shape.iter().product();
            let data = match slot.init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut r)).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            Tensor::new(slot.shape.clone(), data).expect("finite init")
        }))
    }

    pub fn names(cfg: &ModelConfig) -> Weights<String> {
        layout(cfg).map(|s| s.name.clone())
    }

    pub fn numel(&self) -> usize {
        self.entries().iter().map(|t| t.numel()).sum()
    }

    /// True when every tensor has the shape `cfg` prescribes.
    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        let want = layout(cfg);
        let want = want.entries();
        let have = self.entries();
        want.len() == have.len() && want.iter().zip(have).all(|(w, h)| w.shape == h.shape())
    }

    pub fn save(&self, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
        let named: Vec<(String, Tensor)> = Params::names(cfg)
            .entries()
            .into_iter()
            .cloned()
            .zip(self.entries().into_iter().cloned())
            .collect();
        checkpoint::save(path, &named)
    }

    /// Loads a checkpoint written by [`Params::save`] for the same config.
    pub fn load(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        cfg.validate()?;
        let stored = checkpoint::load(path)?;
        let expect = layout(cfg);
        let slots = expect.entries();
        if stored.len() != slots.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config needs {}",
                stored.len(),
                slots.len()
            )));
        }
        for ((name, t), slot) in stored.iter().zip(&slots) {
            if *name != slot.name || t.shape() != slot.shape.as_slice() {
                return Err(Error::Format(format!(
                    "checkpoint entry {name} {:?} does not match {} {:?}",
                    t.shape(),
                    slot.name,
                    slot.shape
                )));
            }
        }
        expect.refill(stored.into_iter().map(|(_, t)| t))
    }
}

/// What happens when a memory would grow past its limits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum OverflowPolicy {
    /// Refuse with [`Error::Capacity`].
    #[default]
    Error,
    /// Keep at most `max_rows` rows by dropping whole turns from the front.
    /// Positions keep counting from where they were, so `max_positions`
    /// still bounds the total number of tokens ever processed.
    TruncateOldestTurns { max_rows: usize },
}

/// Shared counter of memory rows currently held by every memory attached to
/// it, plus the high-water mark.
#[derive(Clone, Debug, Default)]
pub struct RowLedger {
    resident: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

impl RowLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resident(&self) -> usize {
        self.resident.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn add(&self, n: usize) {
        let now = self.resident.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn sub(&self, n: usize) {
        self.resident.fetch_sub(n, Ordering::SeqCst);
    }
}

/// Per-layer, per-head key and value rows for every processed token, plus
/// the absolute position counter and the row at which each turn began.
pub struct Memory<N> {
    n_layers: usize,
    n_heads: usize,
    keys: Vec<Option<N>>,
    values: Vec<Option<N>>,
    len: usize,
    next_pos: usize,
    turn_starts: Vec<usize>,
    policy: OverflowPolicy,
    ledger: Option<RowLedger>,
}

pub type KvMemory = Memory<Tensor>;

impl<N: Clone> Clone for Memory<N> {
    fn clone(&self) -> Self {
        if let Some(l) = &self.ledger {
            l.add(self.len);
        }
        Memory {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            keys: self.keys.clone(),
            values: self.values.clone(),
            len: self.len,
            next_pos: self.next_pos,
            turn_starts: self.turn_starts.clone(),
            policy: self.policy,
            ledger: self.ledger.clone(),
        }
    }
}

impl<N> Drop for Memory<N> {
    fn drop(&mut self) {
        if let Some(l) = &self.ledger {
            l.sub(self.len);
        }
    }
}

impl<N> std::fmt::Debug for Memory<N> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Memory")
            .field("len", &self.len)
            .field("next_pos", &self.next_pos)
            .field("turns", &self.turn_starts.len())
            .finish()
    }
}

impl<N: Clone> Memory<N> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let slots = cfg.n_layers * cfg.n_heads;
        Memory {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            keys: vec![None; slots],
            values: vec![None; slots],
            len: 0,
            next_pos: 0,
            turn_starts: Vec::new(),
            policy: OverflowPolicy::Error,
            ledger: None,
        }
    }

    pub fn with_policy(mut self, policy: OverflowPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Attaches a ledger; the rows already held are counted immediately.
    pub fn with_ledger(mut self, ledger: RowLedger) -> Self {
        if let Some(old) = self.ledger.take() {
            old.sub(self.len);
        }
        ledger.add(self.len);
        self.ledger = Some(ledger);
        self
    }

    /// Rows currently held in every layer.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Absolute position of the next token.
    pub fn next_pos(&self) -> usize {
        self.next_pos
    }

    /// Row index at which each retained turn begins.
    pub fn turn_starts(&self) -> &[usize] {
        &self.turn_starts
    }

    pub fn policy(&self) -> OverflowPolicy {
        self.policy
    }

    pub fn keys(&self, layer: usize, head: usize) -> Option<&N> {
        self.keys[layer * self.n_heads + head].as_ref()
    }

    pub fn values(&self, layer: usize, head: usize) -> Option<&N> {
        self.values[layer * self.n_heads + head].as_ref()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Marks the next token as the start of a new turn.
    pub fn begin_turn(&mut self) {
        self.turn_starts.push(self.len);
    }

    /// Whether `n` more tokens can be processed under the overflow policy.
    pub fn fits(&self, n: usize, cfg: &ModelConfig) -> bool {
        if self.next_pos + n > cfg.max_positions {
            return false;
        }
        match self.policy {
            OverflowPolicy::Error => true,
            OverflowPolicy::TruncateOldestTurns { max_rows } => {
                self.len + n <= max_rows || self.turn_starts.iter().any(|&s| s > 0 && self.len - s + n <= max_rows)
            }
        }
    }

    /// Makes room for `n` more tokens according to the overflow policy.
    fn reserve<G: Graph<Node = N>>(&mut self, g: &mut G, n: usize, cfg: &ModelConfig) -> Result<()> {
        if self.next_pos + n > cfg.max_positions {
            return Err(Error::Capacity {
                limit: cfg.max_positions,
                requested: self.next_pos + n,
            });
        }
        let OverflowPolicy::TruncateOldestTurns { max_rows } = self.policy else {
            return Ok(());
        };
        if self.len + n <= max_rows {
            return Ok(());
        }
        let cut = self
            .turn_starts
            .iter()
            .copied()
            .find(|&s| s > 0 && self.len - s + n <= max_rows)
            .ok_or(Error::Capacity {
                limit: max_rows,
                requested: self.len - self.turn_starts.last().copied().unwrap_or(0) + n,
            })?;
        let keep = self.len - cut;
        for slot in self.keys.iter_mut().chain(self.values.iter_mut()) {
            if let Some(t) = slot.take() {
                *slot = Some(g.slice_rows(&t, cut, keep)?);
            }
        }
        self.turn_starts.retain(|&s| s >= cut);
        for s in &mut self.turn_starts {
            *s -= cut;
        }
        if let Some(l) = &self.ledger {
            l.sub(cut);
        }
        self.len = keep;
        Ok(())
    }

    fn grow(&mut self, n: usize) {
        self.len += n;
        self.next_pos += n;
        if let Some(l) = &self.ledger {
            l.add(n);
        }
    }
}

/// One sequence in a forward pass: new tokens and the memory they extend.
pub struct Segment<'a, N> {
    pub tokens: &'a [u32],
    pub memory: &'a mut Memory<N>,
}

/// Which rows to project to vocabulary logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Emit {
    Nothing,
    /// The last row of every segment, one logits row per segment.
    Last,
    /// Every row, segments stacked in order.
    All,
}

fn linear<G: Graph>(g: &mut G, x: &G::Node, w: &G::Node, b: &G::Node) -> Result<G::Node> {
    let y = g.matmul(x, w, false, true)?;
    g.add(&y, b)
}

/// Runs the transformer over every segment, appending each segment's keys and
/// values to its memory. With `dropout` set, the config's dropout rate is
/// applied to embeddings, attention weights and both residual branches.
///
/// Capacity and token-range checks happen before any memory is touched.
pub fn forward<G: Graph>(
    g: &mut G,
    w: &Weights<G::Node>,
    cfg: &ModelConfig,
    segs: &mut [Segment<'_, G::Node>],
    emit: Emit,
    mut dropout: Option<&mut Rng>,
) -> Result<Option<G::Node>> {
    if segs.is_empty() {
        return Err(Error::InvalidArgument("forward needs at least one segment".into()));
    }
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    for seg in segs.iter_mut() {
        let n = seg.tokens.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty segment".into()));
        }
        if seg.memory.keys.len() != cfg.n_layers * cfg.n_heads {
            return Err(Error::Config("memory was built for a different model shape".into()));
        }
        if let Some(&bad) = seg.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad as usize,
                limit: cfg.vocab_size,
            });
        }
        seg.memory.reserve(g, n, cfg)?;
        ids.extend(seg.tokens.iter().map(|&t| t as usize));
        let start = seg.memory.next_pos;
        pos.extend(start..start + n);
    }

    let rate = cfg.dropout_rate;
    let mut drop = |g: &mut G, x: G::Node| -> Result<G::Node> {
        match dropout.as_deref_mut() {
            Some(r) if rate > 0.0 => g.dropout(&x, rate, r),
            _ => Ok(x),
        }
    };

    let tok = g.embedding(&w.wte, &ids)?;
    let pe = g.embedding(&w.wpe, &pos)?;
    let x0 = g.add(&tok, &pe)?;
    let mut x = drop(g, x0)?;
    let single = segs.len() == 1;

    for (li, layer) in w.layers.iter().enumerate() {
        let h = g.layer_norm(&x, &layer.ln1_g, &layer.ln1_b)?;
        let mut proj: Option<G::Node> = None;
        for head in 0..cfg.n_heads {
            let q = linear(g, &h, &layer.wq[head], &layer.bq[head])?;
            let k = linear(g, &h, &layer.wk[head], &layer.bk[head])?;
            let v = linear(g, &h, &layer.wv[head], &layer.bv[head])?;
            let slot = li * cfg.n_heads + head;
            let mut outs = Vec::with_capacity(segs.len());
            let mut offset = 0;
            for seg in segs.iter_mut() {
                let n = seg.tokens.len();
                let (qs, ks, vs) = if single {
                    (q.clone(), k.clone(), v.clone())
                } else {
                    (
                        g.slice_rows(&q, offset, n)?,
                        g.slice_rows(&k, offset, n)?,
                        g.slice_rows(&v, offset, n)?,
                    )
                };
                offset += n;
                let mem = &mut *seg.memory;
                let causal_from = mem.len;
                let k_all = g.append_rows(mem.keys[slot].take(), &ks)?;
                let v_all = g.append_rows(mem.values[slot].take(), &vs)?;
                let a = attention_weights_in(g, &qs, &k_all, causal_from)?;
                let a = drop(g, a)?;
                outs.push(g.matmul(&a, &v_all, false, false)?);
                mem.keys[slot] = Some(k_all);
                mem.values[slot] = Some(v_all);
            }
            let att = g.concat_rows(&outs)?;
            let o = g.matmul(&att, &layer.wo[head], false, true)?;
            proj = Some(match proj {
                None => o,
                Some(p) => g.add(&p, &o)?,
            });
        }
        let proj = proj.expect("at least one head");
        let proj = g.add(&proj, &layer.bo)?;
        let proj = drop(g, proj)?;
        x = g.add(&x, &proj)?;

        let h2 = g.layer_norm(&x, &layer.ln2_g, &layer.ln2_b)?;
        let f = linear(g, &h2, &layer.w1, &layer.b1)?;
        let f = g.gelu(&f)?;
        let f = linear(g, &f, &layer.w2, &layer.b2)?;
        let f = drop(g, f)?;
        x = g.add(&x, &f)?;
    }

    for seg in segs.iter_mut() {
        seg.memory.grow(seg.tokens.len());
    }

    let hidden = g.layer_norm(&x, &w.lnf_g, &w.lnf_b)?;
    let rows = match emit {
        Emit::Nothing => return Ok(None),
        Emit::All => hidden,
        Emit::Last => {
            let mut end = 0;
            let last: Vec<usize> = segs
                .iter()
                .map(|s| {
                    end += s.tokens.len();
                    end - 1
                })
                .collect();
            g.embedding(&hidden, &last)?
        }
    };
    Ok(Some(g.matmul(&rows, &w.wte, false, true)?))
}

/// Logits for every position of `tokens` from an empty memory.
pub fn forward_full(params: &Params, cfg: &ModelConfig, tokens: &[u32]) -> Result<Tensor> {
    let mut mem = KvMemory::new(cfg);
    feed(params, cfg, tokens, &mut mem, Emit::All).map(|l| l.expect("logits requested"))
}

/// Logits for `tokens` given `memory`, plus the extended memory. The input
/// memory is left as it was.
pub fn forward_with_memory(
    params: &Params,
    cfg: &ModelConfig,
    tokens: &[u32],
    memory: &KvMemory,
) -> Result<(Tensor, KvMemory)> {
    let mut mem = memory.clone();
    let logits = feed(params, cfg, tokens, &mut mem, Emit::All)?.expect("logits requested");
    Ok((logits, mem))
}

/// Eager forward of one sequence, extending `memory` in place.
pub fn feed(
    params: &Params,
    cfg: &ModelConfig,
    tokens: &[u32],
    memory: &mut KvMemory,
    emit: Emit,
) -> Result<Option<Tensor>> {
    let mut segs = [Segment { tokens, memory }];
    forward(&mut Eager, params, cfg, &mut segs, emit, None)
}

/// Eager forward of several independent sequences in one pass.
pub fn feed_batch(
    params: &Params,
    cfg: &ModelConfig,
    segs: &mut [Segment<'_, Tensor>],
    emit: Emit,
) -> Result<Option<Tensor>> {
    forward(&mut Eager, params, cfg, segs, emit, None)
}
