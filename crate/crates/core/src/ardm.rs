//! Two role language models over one shared memory.
//!
//! A dialog is processed left to right. Each turn runs through the parameter
//! set of the role that speaks it and appends its keys and values to the
//! shared [`KvMemory`], which is the only channel between the two models.
//! Within a turn, the logits at position `i` score token `i + 1`; the first
//! token of a turn is its role trigger and is given, not scored.

use serde::{Deserialize, Serialize};

use crate::decode::{filter_logits, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::{self, Emit, KvMemory, Memory, ModelConfig, Params, Segment, Weights};
use crate::rng::Rng;
use crate::tensor::{Eager, Graph, Reduction, Tensor};
use crate::tokenizer::{Role, TokenSeq, Vocab};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Turn {
            role,
            text: text.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub turns: Vec<Turn>,
}

impl Dialog {
    pub fn new(turns: Vec<Turn>) -> Self {
        Dialog { turns }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// True when no two consecutive turns share a role.
    pub fn alternates(&self) -> bool {
        self.turns.windows(2).all(|w| w[0].role != w[1].role)
    }

    /// Canonical token form: each turn framed and encoded.
    pub fn encode(&self, vocab: &Vocab) -> Result<Vec<(Role, TokenSeq)>> {
        self.turns
            .iter()
            .map(|t| Ok((t.role, vocab.encode_turn(t.role, &t.text)?)))
            .collect()
    }
}

/// The user and system parameter sets. A single shared set is also
/// supported; it serves as the one-model baseline with identical code paths.
#[derive(Clone, Debug, PartialEq)]
pub struct ArdmParams {
    config: ModelConfig,
    sets: Vec<Params>,
}

impl ArdmParams {
    /// Both roles initialized from the same seed; they diverge in training.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let p = Params::init(&config)?;
        Ok(ArdmParams {
            config,
            sets: vec![p.clone(), p],
        })
    }

    /// One parameter set used for both roles.
    pub fn shared(config: ModelConfig) -> Result<Self> {
        let p = Params::init(&config)?;
        Ok(ArdmParams { config, sets: vec![p] })
    }

    pub fn from_sets(config: ModelConfig, user: Params, system: Params) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &user)?;
        check_shapes(&config, &system)?;
        Ok(ArdmParams {
            config,
            sets: vec![user, system],
        })
    }

    pub fn from_shared(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &params)?;
        Ok(ArdmParams {
            config,
            sets: vec![params],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_shared(&self) -> bool {
        self.sets.len() == 1
    }

    /// Index into [`ArdmParams::sets`] of the set that speaks for `role`.
    pub fn set_index(&self, role: Role) -> usize {
        if self.is_shared() {
            0
        } else {
            role.index()
        }
    }

    pub fn params(&self, role: Role) -> &Params {
        &self.sets[self.set_index(role)]
    }

    pub fn sets(&self) -> &[Params] {
        &self.sets
    }

    pub fn sets_mut(&mut self) -> &mut [Params] {
        &mut self.sets
    }

    /// Parameters per role model.
    pub fn params_per_model(&self) -> usize {
        self.config.param_count()
    }

    /// An empty memory sized for this model.
    pub fn memory(&self) -> KvMemory {
        KvMemory::new(&self.config)
    }
}

fn check_shapes(cfg: &ModelConfig, p: &Params) -> Result<()> {
    if p.matches(cfg) {
        Ok(())
    } else {
        Err(Error::Config("parameter shapes do not match the config".into()))
    }
}

/// Feeds one framed turn through `role`'s model, extending `memory` in place.
pub fn feed_turn(
    params: &ArdmParams,
    role: Role,
    tokens: &[u32],
    memory: &mut KvMemory,
    emit: Emit,
) -> Result<Option<Tensor>> {
    memory.begin_turn();
    model::feed(params.params(role), &params.config, tokens, memory, emit)
}

/// Logits for a framed turn and the memory extended by it. The input memory
/// is left unchanged.
pub fn process_turn(params: &ArdmParams, role: Role, tokens: &[u32], memory: &KvMemory) -> Result<(Tensor, KvMemory)> {
    let mut mem = memory.clone();
    let logits = feed_turn(params, role, tokens, &mut mem, Emit::All)?.expect("logits requested");
    Ok((logits, mem))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogNll {
    pub user_nll: f64,
    pub system_nll: f64,
    pub total_nll: f64,
    pub user_tokens: usize,
    pub system_tokens: usize,
}

impl DialogNll {
    pub fn tokens(&self) -> usize {
        self.user_tokens + self.system_tokens
    }

    pub fn add(&mut self, other: &DialogNll) {
        self.user_nll += other.user_nll;
        self.system_nll += other.system_nll;
        self.total_nll = self.user_nll + self.system_nll;
        self.user_tokens += other.user_tokens;
        self.system_tokens += other.system_tokens;
    }

    pub fn nll(&self, role: Role) -> f64 {
        match role {
            Role::User => self.user_nll,
            Role::System => self.system_nll,
        }
    }

    pub fn count(&self, role: Role) -> usize {
        match role {
            Role::User => self.user_tokens,
            Role::System => self.system_tokens,
        }
    }
}

/// Summed next-token loss of one turn, as a graph node.
pub struct TurnLoss<N> {
    pub role: Role,
    pub loss: Option<N>,
    pub scored: usize,
}

/// Runs a whole dialog through `sets` (indexed by `route(role)`) on any
/// executor, returning each turn's summed loss. Capacity errors carry the
/// failing turn index.
pub fn turn_losses<G: Graph>(
    g: &mut G,
    sets: &[&Weights<G::Node>],
    route: impl Fn(Role) -> usize,
    cfg: &ModelConfig,
    turns: &[(Role, &[u32])],
    mut dropout: Option<&mut Rng>,
) -> Result<Vec<TurnLoss<G::Node>>> {
    let mut mem: Memory<G::Node> = Memory::new(cfg);
    let mut out = Vec::with_capacity(turns.len());
    for (i, &(role, tokens)) in turns.iter().enumerate() {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("turn {i} has no tokens")));
        }
        mem.begin_turn();
        let n = tokens.len();
        let emit = if n > 1 { Emit::All } else { Emit::Nothing };
        let mut segs = [Segment {
            tokens,
            memory: &mut mem,
        }];
        let logits = model::forward(g, sets[route(role)], cfg, &mut segs, emit, dropout.as_deref_mut()).map_err(
            |e| match e {
                e @ Error::Capacity { .. } => Error::TurnCapacity {
                    turn: i,
                    source: Box::new(e),
                },
                e => e,
            },
        )?;
        let loss = match logits {
            Some(l) => {
                let l = g.slice_rows(&l, 0, n - 1)?;
                let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
                Some(g.cross_entropy(&l, &targets, Reduction::Sum)?)
            }
            None => None,
        };
        out.push(TurnLoss {
            role,
            loss,
            scored: n - 1,
        });
    }
    Ok(out)
}

/// Negative log-likelihood of an encoded dialog with dropout off.
pub fn dialog_nll_tokens(params: &ArdmParams, turns: &[(Role, &[u32])]) -> Result<DialogNll> {
    let sets: Vec<&Params> = params.sets.iter().collect();
    let losses = turn_losses(&mut Eager, &sets, |r| params.set_index(r), &params.config, turns, None)?;
    let mut nll = DialogNll::default();
    for t in losses {
        let v = t.loss.map_or(0.0, |l| l.item());
        match t.role {
            Role::User => {
                nll.user_nll += v;
                nll.user_tokens += t.scored;
            }
            Role::System => {
                nll.system_nll += v;
                nll.system_tokens += t.scored;
            }
        }
    }
    nll.total_nll = nll.user_nll + nll.system_nll;
    Ok(nll)
}

/// A dialog as framed token sequences, one per turn.
pub type EncodedDialog = Vec<(Role, TokenSeq)>;

/// Summed negative log-likelihood over a corpus of encoded dialogs.
pub fn corpus_nll(params: &ArdmParams, dialogs: &[EncodedDialog]) -> Result<DialogNll> {
    let mut total = DialogNll::default();
    for d in dialogs {
        let turns: Vec<(Role, &[u32])> = d.iter().map(|(r, t)| (*r, &t[..])).collect();
        total.add(&dialog_nll_tokens(params, &turns)?);
    }
    Ok(total)
}

/// Negative log-likelihood of a text dialog under `vocab`'s framing.
pub fn dialog_nll(params: &ArdmParams, vocab: &Vocab, dialog: &Dialog) -> Result<DialogNll> {
    let encoded = dialog.encode(vocab)?;
    let refs: Vec<(Role, &[u32])> = encoded.iter().map(|(r, t)| (*r, &t[..])).collect();
    dialog_nll_tokens(params, &refs)
}

/// Filtered next-token distribution for `role`, given the dialog so far in
/// `memory` and the tokens of the current turn not yet in it (at least the
/// role trigger). `memory` is not modified.
pub fn next_token_dist(
    params: &ArdmParams,
    role: Role,
    memory: &KvMemory,
    partial_turn: &[u32],
    sampler: &SamplerConfig,
) -> Result<Vec<f64>> {
    if partial_turn.is_empty() {
        return Err(Error::InvalidArgument(
            "next_token_dist needs the open turn's tokens".into(),
        ));
    }
    let mut mem = memory.clone();
    let logits = feed_turn(params, role, partial_turn, &mut mem, Emit::Last)?.expect("logits requested");
    Ok(filter_logits(logits.row(0), sampler))
}
