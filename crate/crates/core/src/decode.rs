//! Sampling and generation.
//!
//! Every decode is a job: a plan of turns to feed or generate, a memory, and
//! a private random stream seeded with `seed ^ id`. Jobs are plain state
//! machines that ask for one forward pass at a time, so the same job can run
//! alone ([`decode_sequential`]) or packed with others
//! ([`batch_decode_filtered`]). Batched forwards are bit-identical per row,
//! hence both paths produce identical output.
//!
//! Generated turns run on a fork of the memory. A committed turn ends up in
//! memory exactly as if its text had been fed as ground truth.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ardm::{ArdmParams, Dialog, Turn};
use crate::error::{Error, Result};
use crate::model::{self, Emit, KvMemory, ModelConfig, Params, RowLedger, Segment};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::tokenizer::{Role, Vocab, END_OF_UTTERANCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub top_p: f64,
    /// `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
    pub temperature: f64,
    pub max_utterance_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_p: 1.0,
            top_k: None,
            temperature: 1.0,
            max_utterance_tokens: 64,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::Config(format!("temperature {} not in (0, 1]", self.temperature)));
        }
        if self.max_utterance_tokens == 0 {
            return Err(Error::Config("max_utterance_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Named sampler settings plus who opens the conversation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub sampler: SamplerConfig,
    pub system_first: bool,
}

impl Preset {
    pub fn named(name: &str) -> Result<Preset> {
        let (top_p, system_first) = match name {
            "default" => (1.0, false),
            "camrest" => (0.2, false),
            "persuasion" => (0.9, true),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        let temperature = if name == "default" { 1.0 } else { 0.7 };
        Ok(Preset {
            name: name.to_string(),
            sampler: SamplerConfig {
                top_p,
                temperature,
                ..SamplerConfig::default()
            },
            system_first,
        })
    }

    pub const NAMES: [&'static str; 3] = ["default", "camrest", "persuasion"];
}

/// Temperature, softmax, then the nucleus and top-k rules of
/// [`filter_probs`].
pub fn filter_logits(logits: &[f64], cfg: &SamplerConfig) -> Vec<f64> {
    let t = cfg.temperature;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut probs: Vec<f64> = logits.iter().map(|&v| ((v - max) / t).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    filter_probs(&probs, cfg.top_p, cfg.top_k)
}

/// Keeps the smallest prefix of tokens sorted by probability (ties by id)
/// whose mass reaches `top_p`, caps it at `top_k` tokens and renormalizes.
/// Everything outside the kept set is exactly zero.
pub fn filter_probs(probs: &[f64], top_p: f64, top_k: Option<usize>) -> Vec<f64> {
    let kept = kept_set(probs, top_p, top_k);
    // Compensated sum and a remainder-corrected quotient keep the
    // renormalized values correctly rounded in the common case.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &i in &kept {
        let p = probs[i];
        let t = sum + p;
        comp += if sum.abs() >= p.abs() {
            (sum - t) + p
        } else {
            (p - t) + sum
        };
        sum = t;
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &kept {
        let p = probs[i];
        let q = p / sum;
        let r = (-q).mul_add(sum, p);
        out[i] = q + (r - q * comp) / sum;
    }
    out
}

fn kept_set(probs: &[f64], top_p: f64, top_k: Option<usize>) -> Vec<usize> {
    let n = probs.len();
    let k = top_k.unwrap_or(n).min(n);
    let order = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..n).collect();
    if top_p >= 1.0 {
        if k < n {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_unstable();
        return idx;
    }
    // The kept set is a prefix of the sorted order, so sorting only the
    // leading candidates is enough unless they fall short of top_p.
    let mut limit = 64.min(n);
    loop {
        if limit < n {
            idx.select_nth_unstable_by(limit - 1, order);
        }
        idx[..limit].sort_unstable_by(order);
        let mut cum = 0.0;
        for (i, &id) in idx[..limit].iter().enumerate() {
            cum += probs[id];
            if cum + 1e-12 >= top_p || i + 1 == k {
                idx.truncate(i + 1);
                return idx;
            }
        }
        if limit == n {
            return idx;
        }
        limit = (limit * 4).min(n);
    }
}

/// Draws an index from a distribution by walking its cumulative mass.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// One generated turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
    /// Position of the turn in the job's dialog.
    pub turn_index: usize,
    /// Stopped by `max_utterance_tokens` or capacity before the end marker.
    pub truncated: bool,
    /// The memory could not hold the rest of the turn.
    pub hit_capacity: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    /// Feed a ground-truth turn.
    Feed(Turn),
    /// Generate a turn for `role`, with `prefix` forced after the role
    /// marker. With `commit` the turn joins the dialog; otherwise it is
    /// discarded and the memory is left as it was.
    Generate {
        role: Role,
        sampler: SamplerConfig,
        prefix: String,
        commit: bool,
    },
}

impl Step {
    pub fn generate(role: Role, sampler: &SamplerConfig) -> Step {
        Step::Generate {
            role,
            sampler: sampler.clone(),
            prefix: String::new(),
            commit: true,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Plan {
    Script(Vec<Step>),
    /// The two models alternate, starting with `first`. A non-empty opening
    /// is fed as `first`'s turn and generation starts with the other role.
    /// Stops after `max_turns` generated turns or when a role produces two
    /// empty turns in a row.
    SelfPlay {
        first: Role,
        opening: String,
        max_turns: usize,
        user: SamplerConfig,
        system: SamplerConfig,
    },
}

#[derive(Debug)]
pub struct DecodeJob {
    pub id: u64,
    pub seed: u64,
    pub plan: Plan,
    /// Starting memory; empty when `None`.
    pub memory: Option<KvMemory>,
    /// Return the final memory in the output.
    pub keep_memory: bool,
}

impl DecodeJob {
    pub fn new(id: u64, seed: u64, plan: Plan) -> Self {
        DecodeJob {
            id,
            seed,
            plan,
            memory: None,
            keep_memory: false,
        }
    }
}

#[derive(Debug)]
pub struct JobOutput {
    pub id: u64,
    pub generated: Vec<Utterance>,
    /// Every committed turn, fed or generated, in order.
    pub transcript: Dialog,
    pub error: Option<String>,
    pub memory: Option<KvMemory>,
}

impl JobOutput {
    /// Everything but the memory, for comparisons.
    pub fn strings(&self) -> (Vec<Utterance>, Dialog, Option<String>) {
        (self.generated.clone(), self.transcript.clone(), self.error.clone())
    }
}

enum Phase {
    Ready,
    /// Feeding a turn into the base memory.
    Feeding {
        turn: Turn,
        tokens: Vec<u32>,
        generated: Option<Utterance>,
    },
    Generating(Gen),
    /// Feeding the last sampled token into the fork, which then becomes the
    /// base memory.
    Adopting {
        fork: KvMemory,
        token: u32,
        utterance: Utterance,
    },
    Done,
}

struct Gen {
    role: Role,
    sampler: SamplerConfig,
    commit: bool,
    fork: KvMemory,
    /// Marker and forced-prefix tokens.
    opened: Vec<u32>,
    prefix: String,
    sampled: Vec<u32>,
    /// Tokens to feed next; the first request feeds the whole opening.
    pending: Vec<u32>,
}

struct JobState {
    id: u64,
    rng: Rng,
    steps: VecDeque<Step>,
    selfplay: Option<SelfPlayState>,
    memory: KvMemory,
    phase: Phase,
    generated: Vec<Utterance>,
    transcript: Dialog,
    error: Option<String>,
    keep_memory: bool,
}

struct SelfPlayState {
    next: Role,
    remaining: usize,
    empty_streak: [bool; 2],
    samplers: [SamplerConfig; 2],
}

impl JobState {
    fn new(job: DecodeJob, cfg: &ModelConfig, ledger: Option<&RowLedger>) -> JobState {
        let mut memory = job.memory.unwrap_or_else(|| KvMemory::new(cfg));
        if let Some(l) = ledger {
            memory = memory.with_ledger(l.clone());
        }
        let (steps, selfplay) = match job.plan {
            Plan::Script(steps) => (steps.into(), None),
            Plan::SelfPlay {
                first,
                opening,
                max_turns,
                user,
                system,
            } => {
                let mut steps = VecDeque::new();
                let mut next = first;
                if !opening.is_empty() {
                    steps.push_back(Step::Feed(Turn::new(first, opening)));
                    next = first.other();
                }
                let sp = SelfPlayState {
                    next,
                    remaining: max_turns,
                    empty_streak: [false; 2],
                    samplers: [user, system],
                };
                (steps, Some(sp))
            }
        };
        JobState {
            id: job.id,
            rng: rng::seeded(job.seed ^ job.id),
            steps,
            selfplay,
            memory,
            phase: Phase::Ready,
            generated: Vec::new(),
            transcript: Dialog::default(),
            error: None,
            keep_memory: job.keep_memory,
        }
    }

    fn fail(&mut self, e: Error) {
        self.error = Some(e.to_string());
        self.phase = Phase::Done;
    }

    /// Moves to the next step that needs a forward pass, or to `Done`.
    fn start_next(&mut self, vocab: &Vocab, cfg: &ModelConfig) {
        let step = match self.steps.pop_front() {
            Some(s) => s,
            None => match self.next_selfplay_step() {
                Some(s) => s,
                None => {
                    self.phase = Phase::Done;
                    return;
                }
            },
        };
        match step {
            Step::Feed(turn) => match vocab.encode_turn(turn.role, &turn.text) {
                Ok(tokens) => {
                    self.phase = Phase::Feeding {
                        turn,
                        tokens: tokens.0,
                        generated: None,
                    }
                }
                Err(e) => self.fail(e),
            },
            Step::Generate {
                role,
                sampler,
                prefix,
                commit,
            } => {
                if let Err(e) = sampler.validate() {
                    return self.fail(e);
                }
                let prefix = prefix.trim_end_matches('\n').to_string();
                let mut opened = vocab.encode(role.marker()).0;
                opened.extend(vocab.encode(&prefix).iter());
                let mut fork = self.memory.clone();
                fork.begin_turn();
                self.phase = Phase::Generating(Gen {
                    role,
                    sampler,
                    commit,
                    fork,
                    pending: opened.clone(),
                    opened,
                    prefix,
                    sampled: Vec::new(),
                });
            }
        }
        // A step that cannot fit is finished here so that batched forwards
        // never fail on one job's account.
        self.check_capacity(vocab, cfg);
    }

    fn next_selfplay_step(&mut self) -> Option<Step> {
        let sp = self.selfplay.as_mut()?;
        if sp.remaining == 0 {
            return None;
        }
        sp.remaining -= 1;
        Some(Step::generate(sp.next, &sp.samplers[sp.next.index()]))
    }

    fn check_capacity(&mut self, vocab: &Vocab, cfg: &ModelConfig) {
        let (mem, n) = match &self.phase {
            Phase::Feeding { tokens, .. } => (&self.memory, tokens.len()),
            Phase::Generating(g) => (&g.fork, g.pending.len()),
            Phase::Adopting { fork, .. } => (fork, 1),
            Phase::Ready | Phase::Done => return,
        };
        if mem.fits(n, cfg) {
            return;
        }
        let capacity = Error::Capacity {
            limit: cfg.max_positions,
            requested: mem.next_pos() + n,
        };
        match std::mem::replace(&mut self.phase, Phase::Ready) {
            Phase::Generating(g) => {
                let mut u = g.utterance(vocab, self.transcript.len());
                u.truncated = true;
                u.hit_capacity = true;
                self.generated.push(u);
                self.fail(capacity);
            }
            Phase::Feeding {
                generated: Some(mut u), ..
            } => {
                u.hit_capacity = true;
                self.generated.push(u);
                self.fail(capacity);
            }
            Phase::Adopting { mut utterance, .. } => {
                utterance.hit_capacity = true;
                self.generated.push(utterance);
                self.fail(capacity);
            }
            _ => self.fail(capacity),
        }
    }

    /// The model and logits a pending forward pass needs.
    fn pending(&self) -> Option<(Role, Emit)> {
        match &self.phase {
            Phase::Feeding { turn, .. } => Some((turn.role, Emit::Nothing)),
            Phase::Generating(g) => Some((g.role, Emit::Last)),
            Phase::Adopting { utterance, .. } => Some((utterance.role, Emit::Nothing)),
            Phase::Ready | Phase::Done => None,
        }
    }

    /// Tokens and memory for the pending forward pass.
    fn segment(&mut self) -> Option<Segment<'_, Tensor>> {
        let (tokens, memory) = match &mut self.phase {
            Phase::Feeding { tokens, .. } => (tokens.as_slice(), &mut self.memory),
            Phase::Generating(g) => (g.pending.as_slice(), &mut g.fork),
            Phase::Adopting { fork, token, .. } => (std::slice::from_ref(&*token), fork),
            Phase::Ready | Phase::Done => return None,
        };
        Some(Segment { tokens, memory })
    }

    /// Marks the turn start on the memory a feed is about to extend.
    fn prepare_feed(&mut self) {
        if let Phase::Feeding { .. } = self.phase {
            self.memory.begin_turn();
        }
    }

    /// Consumes the result of the forward pass requested by `request`.
    fn advance(&mut self, logits: Option<&[f64]>, vocab: &Vocab, cfg: &ModelConfig) {
        match std::mem::replace(&mut self.phase, Phase::Ready) {
            Phase::Feeding { turn, generated, .. } => {
                if let Some(u) = generated {
                    self.record_generated(u);
                }
                self.transcript.turns.push(turn);
                self.start_next(vocab, cfg);
            }
            Phase::Adopting { fork, utterance, .. } => {
                self.memory = fork;
                self.transcript
                    .turns
                    .push(Turn::new(utterance.role, utterance.text.clone()));
                self.record_generated(utterance);
                self.start_next(vocab, cfg);
            }
            Phase::Generating(mut g) => {
                let logits = logits.expect("generation requests logits");
                // Output rows past the tokenizer's symbols are never sampled.
                let probs = filter_logits(&logits[..vocab.size()], &g.sampler);
                let tok = sample_index(&probs, &mut self.rng) as u32;
                g.sampled.push(tok);
                let body = g.body_bytes(vocab);
                let ended = find(&body, END_OF_UTTERANCE.as_bytes()).is_some();
                if ended || g.sampled.len() >= g.sampler.max_utterance_tokens {
                    self.finish_generation(g, !ended, vocab, cfg);
                } else {
                    g.pending = vec![tok];
                    self.phase = Phase::Generating(g);
                    self.check_capacity(vocab, cfg);
                }
            }
            Phase::Ready | Phase::Done => {}
        }
    }

    fn finish_generation(&mut self, g: Gen, truncated: bool, vocab: &Vocab, cfg: &ModelConfig) {
        let mut u = g.utterance(vocab, self.transcript.len());
        u.truncated = truncated;
        if !g.commit {
            self.record_generated(u);
            self.start_next(vocab, cfg);
            return;
        }
        let canonical = match vocab.encode_turn(g.role, &u.text) {
            Ok(t) => t.0,
            Err(e) => return self.fail(e),
        };
        let mut produced = g.opened.clone();
        produced.extend_from_slice(&g.sampled);
        let last = *g.sampled.last().expect("at least one sampled token");
        self.phase = if !truncated && produced == canonical {
            Phase::Adopting {
                fork: g.fork,
                token: last,
                utterance: u,
            }
        } else {
            drop(g.fork);
            Phase::Feeding {
                turn: Turn::new(g.role, u.text.clone()),
                tokens: canonical,
                generated: Some(u),
            }
        };
        self.check_capacity(vocab, cfg);
    }

    fn record_generated(&mut self, u: Utterance) {
        if let Some(sp) = self.selfplay.as_mut() {
            let r = u.role.index();
            let empty = u.text.is_empty();
            let stop = empty && sp.empty_streak[r];
            sp.empty_streak[r] = empty;
            sp.next = u.role.other();
            if stop {
                sp.remaining = 0;
            }
        }
        self.generated.push(u);
    }

    fn into_output(self) -> JobOutput {
        JobOutput {
            id: self.id,
            generated: self.generated,
            transcript: self.transcript,
            error: self.error,
            memory: if self.keep_memory { Some(self.memory) } else { None },
        }
    }
}

impl Gen {
    fn body_bytes(&self, vocab: &Vocab) -> Vec<u8> {
        let mut body = self.prefix.as_bytes().to_vec();
        body.extend(vocab.decode_bytes(&self.sampled).expect("sampled ids are in range"));
        body
    }

    fn utterance(&self, vocab: &Vocab, turn_index: usize) -> Utterance {
        let body = self.body_bytes(vocab);
        let end = find(&body, END_OF_UTTERANCE.as_bytes()).unwrap_or(body.len());
        let text = String::from_utf8_lossy(&body[..end]);
        Utterance {
            role: self.role,
            text: text.trim_end_matches('\n').to_string(),
            turn_index,
            truncated: false,
            hit_capacity: false,
        }
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn check_vocab(params: &ArdmParams, vocab: &Vocab) -> Result<()> {
    if vocab.size() > params.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} symbols does not fit a model with {} outputs",
            vocab.size(),
            params.config().vocab_size
        )));
    }
    Ok(())
}

/// Runs each job on its own, one after another.
pub fn decode_sequential(params: &ArdmParams, vocab: &Vocab, jobs: Vec<DecodeJob>) -> Result<Vec<JobOutput>> {
    batch_decode_filtered(params, vocab, jobs, 1, None)
}

/// Continuous batching: up to `batch_size` jobs are resident; each tick runs
/// one forward pass per role over all resident jobs, finished jobs are
/// dropped (releasing their memory) and waiting jobs take their slots.
/// Outputs come back in input order.
pub fn batch_decode_filtered(
    params: &ArdmParams,
    vocab: &Vocab,
    jobs: Vec<DecodeJob>,
    batch_size: usize,
    ledger: Option<&RowLedger>,
) -> Result<Vec<JobOutput>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    batch_decode_workers(params, vocab, jobs, batch_size, ledger, workers)
}

/// [`batch_decode_filtered`] with an explicit number of forward threads.
/// Outputs do not depend on `workers`.
pub fn batch_decode_workers(
    params: &ArdmParams,
    vocab: &Vocab,
    jobs: Vec<DecodeJob>,
    batch_size: usize,
    ledger: Option<&RowLedger>,
    workers: usize,
) -> Result<Vec<JobOutput>> {
    if batch_size == 0 || workers == 0 {
        return Err(Error::InvalidArgument("batch_size and workers must be positive".into()));
    }
    check_vocab(params, vocab)?;
    let cfg = params.config();
    let n_jobs = jobs.len();
    let mut waiting: VecDeque<(usize, DecodeJob)> = jobs.into_iter().enumerate().collect();
    let mut active: Vec<(usize, JobState)> = Vec::with_capacity(batch_size);
    let mut done: Vec<Option<JobOutput>> = (0..n_jobs).map(|_| None).collect();

    loop {
        while active.len() < batch_size {
            let Some((slot, job)) = waiting.pop_front() else { break };
            let mut st = JobState::new(job, cfg, ledger);
            st.start_next(vocab, cfg);
            active.push((slot, st));
        }
        // Release finished jobs before the next forward.
        let mut i = 0;
        while i < active.len() {
            if matches!(active[i].1.phase, Phase::Done) {
                let (slot, st) = active.remove(i);
                done[slot] = Some(st.into_output());
            } else {
                i += 1;
            }
        }
        if active.is_empty() {
            if waiting.is_empty() {
                break;
            }
            continue;
        }
        for role in Role::BOTH {
            run_role(params, vocab, role, &mut active, workers)?;
        }
    }
    Ok(done.into_iter().map(|o| o.expect("every job finishes")).collect())
}

/// One batched forward for every resident job whose next pass uses `role`'s
/// model, then advances those jobs.
///
/// Capacity is checked per job before it is queued, so a batch only fails on
/// a numerical fault, which aborts the whole call.
fn run_role(
    params: &ArdmParams,
    vocab: &Vocab,
    role: Role,
    active: &mut [(usize, JobState)],
    workers: usize,
) -> Result<()> {
    let cfg = params.config();
    let mut members = Vec::new();
    let logits = {
        let mut segs = Vec::new();
        for (i, (_, st)) in active.iter_mut().enumerate() {
            match st.pending() {
                Some((r, emit)) if r == role => {
                    st.prepare_feed();
                    members.push((i, emit));
                    segs.push(st.segment().expect("pending job has a segment"));
                }
                _ => {}
            }
        }
        if segs.is_empty() {
            return Ok(());
        }
        forward_split(params.params(role), cfg, &mut segs, workers)?
    };
    let mut rows = logits.iter().flat_map(|t| (0..t.shape()[0]).map(move |r| t.row(r)));
    for &(i, emit) in &members {
        let row = rows.next().expect("one logits row per segment");
        let l = (emit != Emit::Nothing).then_some(row);
        active[i].1.advance(l, vocab, cfg);
    }
    Ok(())
}

/// Last-position logits for every segment. With several workers the
/// segments are split into contiguous groups, one batched forward per
/// thread; rows are independent, so the split does not change any value.
fn forward_split(
    params: &Params,
    cfg: &ModelConfig,
    segs: &mut [Segment<'_, Tensor>],
    workers: usize,
) -> Result<Vec<Tensor>> {
    let workers = workers.min(segs.len());
    let run = |group: &mut [Segment<'_, Tensor>]| {
        model::feed_batch(params, cfg, group, Emit::Last).map(|l| l.expect("logits requested"))
    };
    if workers <= 1 {
        return Ok(vec![run(segs)?]);
    }
    let per = segs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = segs.chunks_mut(per).map(|g| s.spawn(move || run(g))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("forward worker panicked"))
            .collect()
    })
}

/// Generates one turn for `role` on top of `memory` and returns it with the
/// memory extended by the committed turn. `rng` advances by the draws made.
pub fn sample_utterance(
    params: &ArdmParams,
    vocab: &Vocab,
    role: Role,
    memory: &KvMemory,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(Utterance, KvMemory)> {
    check_vocab(params, vocab)?;
    let mcfg = params.config();
    let mut st = JobState::new(
        DecodeJob {
            id: 0,
            seed: 0,
            plan: Plan::Script(vec![Step::generate(role, cfg)]),
            memory: Some(memory.clone()),
            keep_memory: true,
        },
        mcfg,
        None,
    );
    st.rng = rng.clone();
    st.start_next(vocab, mcfg);
    while let Some((role, emit)) = st.pending() {
        st.prepare_feed();
        let logits = {
            let mut segs = [st.segment().expect("pending job has a segment")];
            model::feed_batch(params.params(role), mcfg, &mut segs, Emit::Last)?.expect("logits requested")
        };
        let row = (emit != Emit::Nothing).then(|| logits.row(0));
        st.advance(row, vocab, mcfg);
    }
    *rng = st.rng.clone();
    let out = st.into_output();
    let u = out
        .generated
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument(out.error.clone().unwrap_or_else(|| "no utterance".into())))?;
    Ok((u, out.memory.expect("memory kept")))
}

/// Evaluation mode: every `generate_role` turn is generated from the
/// ground-truth history before it, then replaced by the ground truth.
/// A turn that does not fit is reported with `hit_capacity` and ends the run.
pub fn decode_eval_mode(
    params: &ArdmParams,
    vocab: &Vocab,
    dialog: &Dialog,
    generate_role: Role,
    sampler: &SamplerConfig,
    id: u64,
) -> Result<Vec<Utterance>> {
    let job = eval_job(dialog, generate_role, sampler, id);
    let out = decode_sequential(params, vocab, vec![job])?;
    Ok(out.into_iter().next().expect("one job").generated)
}

/// The job behind [`decode_eval_mode`], for batching many dialogs.
pub fn eval_job(dialog: &Dialog, generate_role: Role, sampler: &SamplerConfig, id: u64) -> DecodeJob {
    let mut steps = Vec::new();
    for turn in &dialog.turns {
        if turn.role == generate_role {
            steps.push(Step::Generate {
                role: turn.role,
                sampler: sampler.clone(),
                prefix: String::new(),
                commit: false,
            });
        }
        steps.push(Step::Feed(turn.clone()));
    }
    DecodeJob::new(id, sampler.seed, Plan::Script(steps))
}

/// Lets the two role models talk to each other.
#[allow(clippy::too_many_arguments)]
pub fn self_play(
    params: &ArdmParams,
    vocab: &Vocab,
    first: Role,
    opening: &str,
    max_turns: usize,
    user: &SamplerConfig,
    system: &SamplerConfig,
    id: u64,
) -> Result<JobOutput> {
    if max_turns == 0 {
        return Err(Error::InvalidArgument("max_turns must be at least 1".into()));
    }
    let job = DecodeJob::new(
        id,
        system.seed,
        Plan::SelfPlay {
            first,
            opening: opening.to_string(),
            max_turns,
            user: user.clone(),
            system: system.clone(),
        },
    );
    Ok(decode_sequential(params, vocab, vec![job])?
        .into_iter()
        .next()
        .expect("one job"))
}
