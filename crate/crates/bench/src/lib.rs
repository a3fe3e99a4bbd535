//! Shared workloads for the benchmarks: a synthetic corpus, a vocabulary
//! trained on it, and desk-sized models.

use ardm_core::data::{synth_corpus, Prepare, SynthSpec};
use ardm_core::decode::{eval_job, DecodeJob};
use ardm_core::tokenizer::{turn_pieces, Role, Vocab};
use ardm_core::{ArdmParams, Dialog, ModelConfig, SamplerConfig};

pub struct Workload {
    pub dialogs: Vec<Dialog>,
    pub vocab: Vocab,
    pub params: ArdmParams,
}

impl Workload {
    /// `n` delexicalized synthetic dialogs, a BPE vocabulary of up to
    /// `vocab_size` symbols over them, and an untrained model with `config`'s
    /// shape.
    pub fn new(n: usize, vocab_size: usize, config: ModelConfig) -> Workload {
        let (records, db) = synth_corpus(SynthSpec {
            n_dialogs: n,
            grammar_seed: 0,
        })
        .expect("synthetic corpus");
        let prep = Prepare {
            db: Some(&db),
            ..Prepare::default()
        };
        let dialogs: Vec<Dialog> = records
            .iter()
            .map(|r| r.to_dialog(&prep).expect("prepared dialog"))
            .collect();
        let pieces: Vec<String> = dialogs
            .iter()
            .flat_map(|d| &d.turns)
            .flat_map(|t| turn_pieces(t.role, &t.text))
            .collect();
        let vocab = Vocab::train(&pieces, vocab_size, 0, None).expect("vocabulary");
        let params = ArdmParams::new(ModelConfig {
            vocab_size: vocab.size(),
            ..config
        })
        .expect("model");
        Workload { dialogs, vocab, params }
    }

    /// The desk configuration over 200 dialogs.
    pub fn desk() -> Workload {
        Workload::new(200, 2048, ModelConfig::default())
    }

    /// Eval-mode plans generating every system turn of the first `n` dialogs.
    pub fn eval_jobs(&self, n: usize, sampler: &SamplerConfig) -> Vec<DecodeJob> {
        (0..n)
            .map(|i| eval_job(&self.dialogs[i % self.dialogs.len()], Role::System, sampler, i as u64))
            .collect()
    }

    pub fn encoded(&self, i: usize) -> Vec<(Role, Vec<u32>)> {
        self.dialogs[i]
            .encode(&self.vocab)
            .expect("encodable")
            .into_iter()
            .map(|(r, t)| (r, t.0))
            .collect()
    }
}
