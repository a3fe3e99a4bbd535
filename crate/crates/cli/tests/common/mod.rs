#![allow(dead_code)]

use ardm_core::bundle::Bundle;
use ardm_core::data::{synth_corpus, Prepare, SynthSpec};
use ardm_core::tokenizer::{turn_pieces, Vocab};
use ardm_core::{ArdmParams, ModelConfig, Tensor};

/// Untrained bundle over a small synthetic corpus vocabulary.
pub fn bundle(max_positions: usize, d_model: usize) -> Bundle {
    let (records, db) = synth_corpus(SynthSpec {
        n_dialogs: 30,
        grammar_seed: 1,
    })
    .unwrap();
    let prep = Prepare {
        db: Some(&db),
        ..Prepare::default()
    };
    let pieces: Vec<String> = records
        .iter()
        .flat_map(|r| r.to_dialog(&prep).unwrap().turns)
        .flat_map(|t| turn_pieces(t.role, &t.text))
        .collect();
    let vocab = Vocab::train(&pieces, 320, 0, None).unwrap();
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model,
        d_ff: 2 * d_model,
        vocab_size: vocab.size(),
        max_positions,
        dropout_rate: 0.0,
        seed: 4,
    };
    Bundle {
        params: ArdmParams::new(cfg).unwrap(),
        vocab,
        db: Some(db),
    }
}

/// The system model always says "x": only that embedding row is non-zero
/// and the final layer norm outputs a constant vector along it, so replies
/// run to the token limit.
pub fn chatty(mut b: Bundle) -> Bundle {
    let cfg = b.params.config().clone();
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let user = b.params.sets()[0].clone();
    let mut sys = b.params.sets()[1].clone();
    let mut wte = vec![0.0; v * d];
    wte[b'x' as usize * d] = 1.0;
    sys.wte = Tensor::matrix(v, d, wte).unwrap();
    sys.lnf_g = Tensor::zeros(&[d]);
    let mut bias = vec![0.0; d];
    bias[0] = 50.0;
    sys.lnf_b = Tensor::vector(&bias).unwrap();
    b.params = ArdmParams::from_sets(cfg, user, sys).unwrap();
    b
}
