//! Perplexity, corpus BLEU, Success F1 and entity-match rate, and the report
//! that combines them over eval-mode generations.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::ardm::{corpus_nll, ArdmParams, EncodedDialog};
use crate::data::{extract_entities, placeholders, split_db_result, DialogRecord, EntityDB, Prepare};
use crate::decode::{batch_decode_filtered, DecodeJob, Plan, SamplerConfig, Step};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::{Role, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleFilter {
    User,
    System,
    Both,
}

/// `exp(NLL / scored tokens)` over the turns the filter admits.
pub fn perplexity(params: &ArdmParams, dialogs: &[EncodedDialog], filter: RoleFilter) -> Result<f64> {
    let nll = corpus_nll(params, dialogs)?;
    let (n, k) = match filter {
        RoleFilter::User => (nll.user_nll, nll.user_tokens),
        RoleFilter::System => (nll.system_nll, nll.system_tokens),
        RoleFilter::Both => (nll.total_nll, nll.tokens()),
    };
    if k == 0 {
        return Err(Error::InvalidArgument(format!("no scored {filter:?} tokens")));
    }
    Ok((n / k as f64).exp())
}

fn ngrams<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Zero n-gram precisions are raised to this value before the geometric mean.
pub const BLEU_SMOOTHING: f64 = 1e-9;

/// Corpus BLEU in [0, 100] over whitespace tokens, one reference per
/// hypothesis: clipped n-gram precisions up to `max_n`, geometric mean,
/// brevity penalty on total lengths.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hg = ngrams(&h, n);
            let rg = ngrams(&r, n);
            for (g, &c) in &hg {
                matched[n - 1] += c.min(rg.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_mean = (0..max_n)
        .map(|i| {
            let p = if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            };
            (if p == 0.0 { BLEU_SMOOTHING } else { p }).ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_mean.exp())
}

/// Micro-averaged F1 of predicted against gold slot sets, pooled over
/// dialogs. Both sides empty everywhere counts as perfect.
pub fn success_f1(predicted: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} annotated dialogs",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Requestable-slot placeholders appearing in a dialog's system turns.
pub fn requested_in<S: AsRef<str>>(system_turns: &[S], requestable: &[&str]) -> BTreeSet<String> {
    system_turns
        .iter()
        .flat_map(|t| placeholders(t.as_ref()))
        .filter(|s| requestable.contains(&s.as_str()))
        .collect()
}

/// Fraction of dialogs whose predicted slot map equals the gold one.
pub fn entity_match_rate(predicted: &[BTreeMap<String, String>], gold: &[BTreeMap<String, String>]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold dialogs",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub user: Option<f64>,
    pub system: Option<f64>,
    pub both: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub dialogs: usize,
    pub generated_turns: usize,
    pub user_tokens: usize,
    pub system_tokens: usize,
    /// Dialogs left out of generation for exceeding the position limit.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: PerplexityReport,
    pub bleu: Option<BleuReport>,
    pub success_f1: Option<f64>,
    pub entity_match_rate: Option<f64>,
    pub counts: Counts,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
}

/// What [`evaluate`] needs besides the model.
pub struct EvalSetup<'a> {
    pub vocab: &'a Vocab,
    pub db: Option<&'a EntityDB>,
    pub sampler: SamplerConfig,
    pub requestable: &'a [&'a str],
    pub batch_size: usize,
    /// Run eval-mode generation for BLEU and Success F1.
    pub generate: bool,
}

/// Perplexity over the prepared corpus, then eval-mode generation of every
/// system turn (conditioned on its database prefix when present) for BLEU
/// and Success F1. Entity match uses the regular-expression tracker over the
/// raw dialogs against their gold entity annotations.
pub fn evaluate(params: &ArdmParams, records: &[DialogRecord], setup: &EvalSetup) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let prep = Prepare {
        db: setup.db,
        ..Prepare::default()
    };
    let dialogs = records.iter().map(|r| r.to_dialog(&prep)).collect::<Result<Vec<_>>>()?;
    let limit = params.config().max_positions;
    let mut encoded = Vec::new();
    let mut fits = Vec::new();
    for d in &dialogs {
        let e = d.encode(setup.vocab)?;
        let ok = e.iter().map(|(_, t)| t.len()).sum::<usize>() <= limit;
        fits.push(ok);
        if ok {
            encoded.push(e);
        }
    }
    let nll = corpus_nll(params, &encoded)?;
    let ppl = |n: f64, k: usize| (k > 0).then(|| (n / k as f64).exp());
    let perplexity = PerplexityReport {
        user: ppl(nll.user_nll, nll.user_tokens),
        system: ppl(nll.system_nll, nll.system_tokens),
        both: ppl(nll.total_nll, nll.tokens()),
    };
    let mut counts = Counts {
        dialogs: records.len(),
        user_tokens: nll.user_tokens,
        system_tokens: nll.system_tokens,
        skipped: fits.iter().filter(|f| !**f).count(),
        ..Counts::default()
    };

    let (mut bleu_report, mut success) = (None, None);
    if setup.generate {
        let jobs: Vec<DecodeJob> = dialogs
            .iter()
            .zip(&fits)
            .enumerate()
            .filter(|(_, (_, ok))| **ok)
            .map(|(i, (d, _))| generation_job(d, &setup.sampler, i as u64))
            .collect();
        let outputs = batch_decode_filtered(params, setup.vocab, jobs, setup.batch_size.max(1), None)?;
        let (mut hyps, mut refs) = (Vec::new(), Vec::new());
        let mut predicted = Vec::new();
        let mut gold = Vec::new();
        for out in &outputs {
            let i = out.id as usize;
            let truth = &dialogs[i];
            let mut said = Vec::new();
            for u in &out.generated {
                let h = strip_prefix(&u.text).to_string();
                refs.push(strip_prefix(&truth.turns[u.turn_index].text).to_string());
                said.push(h.clone());
                hyps.push(h);
            }
            counts.generated_turns += out.generated.len();
            if let Some(req) = &records[i].requested_slots {
                predicted.push(requested_in(&said, setup.requestable));
                gold.push(req.iter().cloned().collect::<BTreeSet<_>>());
            }
        }
        if !hyps.is_empty() {
            bleu_report = Some(BleuReport {
                bleu1: bleu(&hyps, &refs, 1)?,
                bleu2: bleu(&hyps, &refs, 2)?,
                bleu4: bleu(&hyps, &refs, 4)?,
            });
        }
        if !gold.is_empty() {
            success = Some(success_f1(&predicted, &gold)?);
        }
    }

    let entity_match_rate = match setup.db {
        Some(db) if records.iter().all(|r| r.entities.is_some()) => {
            let predicted: Vec<_> = records.iter().map(|r| extract_entities(&r.history(), db)).collect();
            let gold: Vec<_> = records.iter().map(|r| r.entities.clone().unwrap_or_default()).collect();
            Some(entity_match_rate(&predicted, &gold)?)
        }
        _ => None,
    };

    Ok(EvalReport {
        perplexity,
        bleu: bleu_report,
        success_f1: success,
        entity_match_rate,
        counts,
        model: params.config().clone(),
        sampler: setup.sampler.clone(),
    })
}

/// Eval-mode plan for one dialog: each system turn is generated from the
/// ground truth before it, with its database prefix forced, then replaced
/// by the ground truth.
pub fn generation_job(dialog: &crate::ardm::Dialog, sampler: &SamplerConfig, id: u64) -> DecodeJob {
    let mut steps = Vec::new();
    for turn in &dialog.turns {
        if turn.role == Role::System {
            let prefix = split_db_result(&turn.text)
                .map(|(r, _)| r.to_string())
                .unwrap_or_default();
            steps.push(Step::Generate {
                role: Role::System,
                sampler: sampler.clone(),
                prefix,
                commit: false,
            });
        }
        steps.push(Step::Feed(turn.clone()));
    }
    DecodeJob::new(id, sampler.seed, Plan::Script(steps))
}

fn strip_prefix(text: &str) -> &str {
    split_db_result(text).map_or(text, |(_, rest)| rest.trim_start())
}
