//! Likelihood training of both role models with AdamW.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ardm::{corpus_nll, turn_losses, ArdmParams, EncodedDialog};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tape, Tensor, Var};
use crate::tokenizer::Role;

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Constant,
    /// Linear to zero at the last step.
    Linear,
}

/// What to do with dialogs longer than the model's position limit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlong {
    #[default]
    Skip,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `None` warms up over one epoch of batches.
    pub warmup_steps: Option<usize>,
    pub decay: Decay,
    /// Overrides the model config's rate during training.
    pub dropout: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Dialogs per optimizer step.
    pub batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub overlong: Overlong,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            warmup_steps: None,
            decay: Decay::Constant,
            dropout: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 3,
            batch_size: 8,
            grad_clip_norm: Some(1.0),
            overlong: Overlong::Skip,
            seed: 0,
        }
    }
}

/// False for NaN as well as for non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !positive(self.learning_rate) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.warmup_steps == Some(0) {
            return bad("warmup_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(positive(self.weight_decay) || self.weight_decay == 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !positive(self.epsilon) {
            return bad("epsilon must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.grad_clip_norm.is_some_and(|c| !positive(c)) {
            return bad("grad_clip_norm must be positive".into());
        }
        Ok(())
    }

    fn warmup(&self, batches_per_epoch: usize) -> usize {
        self.warmup_steps.unwrap_or(batches_per_epoch).max(1)
    }
}

/// Learning rate for optimizer step `step` (the first update is step 1):
/// a linear ramp from 0 to the peak over the warmup, then the decay rule.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, batches_per_epoch: usize) -> f64 {
    let warmup = cfg.warmup(batches_per_epoch);
    let peak = cfg.learning_rate;
    if step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    match cfg.decay {
        Decay::Constant => peak,
        Decay::Linear => {
            let total = (cfg.epochs * batches_per_epoch).max(warmup + 1);
            peak * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
        }
    }
}

/// AdamW moment estimates for a flat list of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
pub fn adamw_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = lr * cfg.weight_decay;
    params
        .iter()
        .zip(grads)
        .enumerate()
        .map(|(i, (p, g))| {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(j, (&w, &gj))| {
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    w - decay * w - lr * m_hat / (v_hat.sqrt() + cfg.epsilon)
                })
                .collect();
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect()
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|x| x * s)?;
        }
    }
    Ok(norm)
}

/// Training and validation numbers for one epoch. NLLs are per scored token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_nll_user: f64,
    pub train_nll_system: f64,
    pub train_nll: f64,
    pub val_ppl: Option<f64>,
    pub val_ppl_user: Option<f64>,
    pub val_ppl_system: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation perplexity (the last epoch's
    /// when there is no validation set).
    pub best: ArdmParams,
    pub best_epoch: usize,
    pub last: ArdmParams,
    pub history: Vec<EpochMetrics>,
    /// Validation perplexity before the first update.
    pub initial_val_ppl: Option<f64>,
    /// Training dialogs dropped for exceeding the position limit.
    pub skipped: usize,
}

fn flatten(params: &ArdmParams) -> Vec<Tensor> {
    params
        .sets()
        .iter()
        .flat_map(|s| s.entries().into_iter().cloned())
        .collect()
}

fn unflatten(params: &mut ArdmParams, flat: Vec<Tensor>) -> Result<()> {
    let mut it = flat.into_iter();
    for set in params.sets_mut() {
        let n = set.entries().len();
        *set = set.refill(it.by_ref().take(n))?;
    }
    Ok(())
}

fn dialog_len(d: &EncodedDialog) -> usize {
    d.iter().map(|(_, t)| t.len()).sum()
}

/// Per-role perplexities from a corpus NLL; `None` for roles with no
/// scored tokens.
fn ppls(params: &ArdmParams, dialogs: &[EncodedDialog]) -> Result<[Option<f64>; 3]> {
    if dialogs.is_empty() {
        return Ok([None; 3]);
    }
    let nll = corpus_nll(params, dialogs)?;
    let ppl = |n: f64, k: usize| (k > 0).then(|| (n / k as f64).exp());
    Ok([
        ppl(nll.total_nll, nll.tokens()),
        ppl(nll.user_nll, nll.user_tokens),
        ppl(nll.system_nll, nll.system_tokens),
    ])
}

/// Summed loss of a batch, one tape for all its dialogs, and the gradient
/// of the per-token mean for every parameter tensor.
struct BatchResult {
    grads: Vec<Tensor>,
    nll: [f64; 2],
    tokens: [usize; 2],
}

fn batch_gradients(
    params: &ArdmParams,
    batch: &[(usize, &EncodedDialog)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<BatchResult> {
    let mcfg = crate::model::ModelConfig {
        dropout_rate: cfg.dropout,
        ..params.config().clone()
    };
    let mut tape = Tape::new();
    let leaves: Vec<crate::model::Weights<Var>> =
        params.sets().iter().map(|s| s.map(|t| tape.leaf(t.clone()))).collect();
    let sets: Vec<&crate::model::Weights<Var>> = leaves.iter().collect();
    let mut total: Option<Var> = None;
    let mut nll = [0.0; 2];
    let mut tokens = [0usize; 2];
    for &(index, dialog) in batch {
        let turns: Vec<(Role, &[u32])> = dialog.iter().map(|(r, t)| (*r, &t[..])).collect();
        let mut drop_rng = rng::derived(cfg.seed, &[2, epoch as u64, index as u64]);
        let dropout = (cfg.dropout > 0.0).then_some(&mut drop_rng);
        let losses = turn_losses(&mut tape, &sets, |r| params.set_index(r), &mcfg, &turns, dropout)?;
        for l in losses {
            let Some(loss) = l.loss else { continue };
            nll[l.role.index()] += tape.value(&loss).item();
            tokens[l.role.index()] += l.scored;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(&t, &loss)?,
            });
        }
    }
    let n = tokens[0] + tokens[1];
    let grads = match total {
        Some(t) => {
            let scale = tape.constant(Tensor::scalar(1.0 / n as f64));
            let mean = tape.mul(&t, &scale)?;
            let g = tape.backward(mean)?;
            leaves
                .iter()
                .flat_map(|w| w.entries().into_iter().map(|v| g.get(*v)).collect::<Vec<_>>())
                .collect()
        }
        None => flatten(params).iter().map(|t| Tensor::zeros(t.shape())).collect(),
    };
    Ok(BatchResult { grads, nll, tokens })
}

/// Trains `params` on `train`, evaluating on `val` after each epoch.
/// `on_epoch` sees each epoch's metrics, the current parameters and whether
/// they are the best so far.
pub fn train(
    mut params: ArdmParams,
    train: &[EncodedDialog],
    val: &[EncodedDialog],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &ArdmParams, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let limit = params.config().max_positions;
    let mut kept: Vec<(usize, &EncodedDialog)> = Vec::new();
    let mut skipped = 0;
    for (i, d) in train.iter().enumerate() {
        let n = dialog_len(d);
        if n > limit {
            if cfg.overlong == Overlong::Reject {
                return Err(Error::Capacity { limit, requested: n });
            }
            skipped += 1;
        } else if n > 0 {
            kept.push((i, d));
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let val: Vec<EncodedDialog> = val.iter().filter(|d| dialog_len(d) <= limit).cloned().collect();

    // Buckets of similar total length; the bucket order is shuffled per epoch.
    kept.sort_by_key(|&(i, d)| (dialog_len(d), i));
    let batches: Vec<&[(usize, &EncodedDialog)]> = kept.chunks(cfg.batch_size).collect();
    let per_epoch = batches.len();

    let initial_val_ppl = ppls(&params, &val)?[0];
    let mut flat = flatten(&params);
    let mut state = OptimState::new(&flat);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ArdmParams, usize)> = None;
    let mut step = 0;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..per_epoch).collect();
        order.shuffle(&mut rng::derived(cfg.seed, &[1, epoch as u64]));
        let mut nll = [0.0; 2];
        let mut tokens = [0usize; 2];
        for &b in &order {
            step += 1;
            let mut res = batch_gradients(&params, batches[b], cfg, epoch).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                e => e,
            })?;
            if !(res.nll[0] + res.nll[1]).is_finite() {
                return Err(Error::Diverged { step });
            }
            if let Some(c) = cfg.grad_clip_norm {
                clip_global_norm(&mut res.grads, c)?;
            }
            lr = lr_schedule(step, cfg, per_epoch);
            flat = adamw_step(&flat, &res.grads, &mut state, cfg, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                e => e,
            })?;
            unflatten(&mut params, flat.clone())?;
            for r in 0..2 {
                nll[r] += res.nll[r];
                tokens[r] += res.tokens[r];
            }
        }
        let per_token = |n: f64, k: usize| if k == 0 { 0.0 } else { n / k as f64 };
        let [val_ppl, val_ppl_user, val_ppl_system] = ppls(&params, &val)?;
        let metrics = EpochMetrics {
            epoch,
            steps: step,
            lr,
            train_nll_user: per_token(nll[0], tokens[0]),
            train_nll_system: per_token(nll[1], tokens[1]),
            train_nll: per_token(nll[0] + nll[1], tokens[0] + tokens[1]),
            val_ppl,
            val_ppl_user,
            val_ppl_system,
        };
        let score = val_ppl.unwrap_or(f64::INFINITY);
        let is_best = val_ppl.is_none() || best.as_ref().is_none_or(|(b, _, _)| score < *b);
        if is_best {
            best = Some((score, params.clone(), epoch));
        }
        on_epoch(&metrics, &params, is_best)?;
        history.push(metrics);
    }
    let (_, best, best_epoch) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
        initial_val_ppl,
        skipped,
    })
}
