mod common;

use ardm_core::ardm::{dialog_nll, dialog_nll_tokens, next_token_dist, process_turn, turn_losses};
use ardm_core::decode::{filter_probs, SamplerConfig};
use ardm_core::model::{forward_full, forward_with_memory, KvMemory, Params};
use ardm_core::tensor::{softmax, Graph, Tape};
use ardm_core::tokenizer::{turn_pieces, Role, Vocab};
use ardm_core::{ArdmParams, Dialog, Error, ModelConfig, Turn};
use common::{oracle, random_tokens, spread_params, tiny_config};
use rand::Rng as _;

fn pair(cfg: &ModelConfig, seed: u64) -> ArdmParams {
    let user = spread_params(cfg, 0.5, seed);
    let system = spread_params(cfg, 0.5, seed + 1000);
    ArdmParams::from_sets(cfg.clone(), user, system).unwrap()
}

/// Random alternating dialog in token form, starting with `first`.
fn random_dialog(cfg: &ModelConfig, turns: usize, first: Role, seed: u64) -> Vec<(Role, Vec<u32>)> {
    let mut r = ardm_core::rng::seeded(seed);
    let mut role = first;
    (0..turns)
        .map(|i| {
            let n = r.random_range(1..6);
            let t = (role, random_tokens(n, cfg.vocab_size, seed * 100 + i as u64));
            role = role.other();
            t
        })
        .collect()
}

fn refs(d: &[(Role, Vec<u32>)]) -> Vec<(Role, &[u32])> {
    d.iter().map(|(r, t)| (*r, t.as_slice())).collect()
}

/// Concatenated pass where each position runs through its turn's role
/// weights; only within-turn next-token predictions are scored.
fn concatenated_oracle(p: &ArdmParams, d: &[(Role, Vec<u32>)]) -> (f64, f64) {
    let tokens: Vec<u32> = d.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let owners: Vec<&Params> = d
        .iter()
        .flat_map(|(r, t)| std::iter::repeat_n(p.params(*r), t.len()))
        .collect();
    let logits = oracle::transformer_logits(&owners, p.config(), &tokens);
    let (mut user, mut system) = (0.0, 0.0);
    let mut start = 0;
    for (role, t) in d {
        let n = t.len();
        let nll = oracle::nll(&logits[start..start + n - 1], &t[1..]);
        match role {
            Role::User => user += nll,
            Role::System => system += nll,
        }
        start += n;
    }
    (user, system)
}

#[test]
fn nll_matches_concatenated_oracle() {
    let cfg = tiny_config(1);
    for s in 0..20 {
        let p = pair(&cfg, s);
        let first = if s % 4 == 3 { Role::System } else { Role::User };
        let d = random_dialog(&cfg, 2 + (s as usize % 5), first, s);
        let got = dialog_nll_tokens(&p, &refs(&d)).unwrap();
        let (u, sy) = concatenated_oracle(&p, &d);
        assert!((got.user_nll - u).abs() < 1e-8, "dialog {s}: {} vs {u}", got.user_nll);
        assert!((got.system_nll - sy).abs() < 1e-8);
        assert!((got.total_nll - (u + sy)).abs() < 1e-8);
        assert_eq!(got.total_nll, got.user_nll + got.system_nll);
    }
}

#[test]
fn nll_is_the_sum_of_incremental_turn_scores() {
    let cfg = tiny_config(2);
    let p = pair(&cfg, 2);
    let d = random_dialog(&cfg, 6, Role::User, 2);
    let mut mem = KvMemory::new(&cfg);
    let mut total = 0.0;
    let mut counted = 0;
    for (role, toks) in &d {
        let (logits, next) = process_turn(&p, *role, toks, &mem).unwrap();
        for i in 0..toks.len() - 1 {
            let probs = softmax(&Tensor1::row(&logits, i), 0).unwrap();
            total -= probs.data()[toks[i + 1] as usize].ln();
            counted += 1;
        }
        mem = next;
    }
    let got = dialog_nll_tokens(&p, &refs(&d)).unwrap();
    assert!((got.total_nll - total).abs() < 1e-9);
    assert_eq!(got.tokens(), counted);
}

struct Tensor1;
impl Tensor1 {
    fn row(t: &ardm_core::Tensor, i: usize) -> ardm_core::Tensor {
        ardm_core::Tensor::vector(t.row(i)).unwrap()
    }
}

#[test]
fn empty_dialog_has_zero_nll() {
    let cfg = tiny_config(3);
    let p = ArdmParams::new(cfg).unwrap();
    let nll = dialog_nll_tokens(&p, &[]).unwrap();
    assert_eq!(nll.total_nll, 0.0);
    assert_eq!(nll.tokens(), 0);
}

#[test]
fn one_symbol_vocabulary_has_zero_nll() {
    let cfg = ModelConfig {
        vocab_size: 1,
        ..tiny_config(4)
    };
    let p = pair(&cfg, 4);
    let d = vec![(Role::User, vec![0; 4]), (Role::System, vec![0; 3])];
    let nll = dialog_nll_tokens(&p, &refs(&d)).unwrap();
    assert_eq!(nll.total_nll, 0.0);
    assert_eq!(nll.tokens(), 5);
}

#[test]
fn first_user_turn_equals_user_model_forward() {
    let cfg = tiny_config(5);
    let p = pair(&cfg, 5);
    let toks = random_tokens(7, cfg.vocab_size, 5);
    let (logits, _) = process_turn(&p, Role::User, &toks, &KvMemory::new(&cfg)).unwrap();
    assert_eq!(logits, forward_full(p.params(Role::User), &cfg, &toks).unwrap());
}

#[test]
fn system_logits_depend_on_the_user_turn() {
    let cfg = tiny_config(6);
    let p = pair(&cfg, 6);
    let s1 = random_tokens(4, cfg.vocab_size, 60);
    let run = |u1: &[u32]| {
        let (_, m) = process_turn(&p, Role::User, u1, &KvMemory::new(&cfg)).unwrap();
        process_turn(&p, Role::System, &s1, &m).unwrap().0
    };
    let a = run(&[1, 2, 3]);
    let b = run(&[1, 2, 4]);
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn swapping_role_parameters_changes_logits() {
    let cfg = tiny_config(7);
    let p = pair(&cfg, 7);
    let swapped = ArdmParams::from_sets(
        cfg.clone(),
        p.params(Role::System).clone(),
        p.params(Role::User).clone(),
    )
    .unwrap();
    let u1 = random_tokens(5, cfg.vocab_size, 70);
    let s1 = random_tokens(5, cfg.vocab_size, 71);
    let run = |q: &ArdmParams| {
        let (_, m) = process_turn(q, Role::User, &u1, &KvMemory::new(&cfg)).unwrap();
        process_turn(q, Role::System, &s1, &m).unwrap().0
    };
    assert!(run(&p).max_abs_diff(&run(&swapped)) > 1e-6);
}

#[test]
fn system_gradients_are_zero_for_a_user_only_dialog() {
    let cfg = tiny_config(8);
    let p = pair(&cfg, 8);
    let toks = random_tokens(6, cfg.vocab_size, 8);
    let mut tape = Tape::new();
    let user = p.params(Role::User).map(|t| tape.leaf(t.clone()));
    let system = p.params(Role::System).map(|t| tape.leaf(t.clone()));
    let losses = turn_losses(
        &mut tape,
        &[&user, &system],
        |r| r.index(),
        &cfg,
        &[(Role::User, &toks)],
        None,
    )
    .unwrap();
    let loss = losses[0].loss.unwrap();
    assert!(tape.value(&loss).item() > 0.0);
    let grads = tape.backward(loss).unwrap();
    for v in system.entries() {
        assert!(grads.get(*v).data().iter().all(|&g| g == 0.0));
    }
    assert!(user
        .entries()
        .iter()
        .any(|v| grads.get(**v).data().iter().any(|&g| g != 0.0)));
}

#[test]
fn memory_is_identical_built_turn_by_turn_or_replayed() {
    let cfg = tiny_config(9);
    let p = pair(&cfg, 9);
    let d = random_dialog(&cfg, 5, Role::User, 9);
    let mut incremental = KvMemory::new(&cfg);
    for (t, (role, toks)) in d.iter().enumerate() {
        incremental = process_turn(&p, *role, toks, &incremental).unwrap().1;
        let mut replay = KvMemory::new(&cfg);
        for (role, toks) in &d[..=t] {
            replay = process_turn(&p, *role, toks, &replay).unwrap().1;
        }
        assert_eq!(replay.turn_starts(), incremental.turn_starts());
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                assert_eq!(replay.keys(l, h), incremental.keys(l, h));
                assert_eq!(replay.values(l, h), incremental.values(l, h));
            }
        }
    }
}

#[test]
fn capacity_error_reports_the_turn() {
    let cfg = ModelConfig {
        max_positions: 10,
        ..tiny_config(10)
    };
    let p = pair(&cfg, 10);
    let d = vec![
        (Role::User, vec![1; 4]),
        (Role::System, vec![2; 4]),
        (Role::User, vec![3; 4]),
    ];
    match dialog_nll_tokens(&p, &refs(&d)) {
        Err(Error::TurnCapacity { turn, .. }) => assert_eq!(turn, 2),
        other => panic!("expected a turn capacity error, got {other:?}"),
    }
}

#[test]
fn mismatched_parameter_shapes_are_rejected() {
    let cfg = tiny_config(11);
    let other = ModelConfig {
        d_ff: 32,
        ..cfg.clone()
    };
    let user = Params::init(&cfg).unwrap();
    let system = Params::init(&other).unwrap();
    assert!(matches!(
        ArdmParams::from_sets(cfg, user, system),
        Err(Error::Config(_))
    ));
}

#[test]
fn text_dialog_nll_uses_framed_turns() {
    let texts = ["i want cheap food", "restaurant;2 there are two places"];
    let pieces: Vec<String> = texts
        .iter()
        .zip([Role::User, Role::System])
        .flat_map(|(t, r)| turn_pieces(r, t))
        .collect();
    let vocab = Vocab::train(&pieces, 300, 0, None).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        ..tiny_config(12)
    };
    let p = ArdmParams::new(cfg).unwrap();
    let dialog = Dialog::new(vec![Turn::new(Role::User, texts[0]), Turn::new(Role::System, texts[1])]);
    let encoded = dialog.encode(&vocab).unwrap();
    let by_text = dialog_nll(&p, &vocab, &dialog).unwrap();
    let by_tokens = dialog_nll_tokens(
        &p,
        &refs(&encoded.iter().map(|(r, t)| (*r, t.0.clone())).collect::<Vec<_>>()),
    )
    .unwrap();
    assert_eq!(by_text, by_tokens);
    assert_eq!(by_text.user_tokens, encoded[0].1.len() - 1);
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum()
}

#[test]
fn next_token_dist_identity_filter_is_softmax() {
    let cfg = tiny_config(13);
    let p = pair(&cfg, 13);
    let (_, mem) = process_turn(&p, Role::User, &[1, 2, 3], &KvMemory::new(&cfg)).unwrap();
    let open = [4, 5];
    let sampler = SamplerConfig {
        top_k: Some(cfg.vocab_size),
        ..SamplerConfig::default()
    };
    let dist = next_token_dist(&p, Role::System, &mem, &open, &sampler).unwrap();
    let mut m = mem.clone();
    m.begin_turn();
    let (logits, _) = forward_with_memory(p.params(Role::System), &cfg, &open, &m).unwrap();
    let want = softmax(&Tensor1::row(&logits, 1), 0).unwrap();
    for (a, b) in dist.iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-15);
    }

    let sharp = next_token_dist(
        &p,
        Role::System,
        &mem,
        &open,
        &SamplerConfig {
            temperature: 0.25,
            ..sampler.clone()
        },
    )
    .unwrap();
    assert!(entropy(&sharp) < entropy(&dist));
}

#[test]
fn next_token_dist_matches_softmax_then_nucleus_enumeration() {
    let cfg = tiny_config(14);
    let p = pair(&cfg, 14);
    let mem = KvMemory::new(&cfg);
    let sampler = SamplerConfig {
        top_p: 0.6,
        temperature: 0.8,
        ..SamplerConfig::default()
    };
    let dist = next_token_dist(&p, Role::User, &mem, &[7, 8], &sampler).unwrap();
    let logits = forward_full(p.params(Role::User), &cfg, &[7, 8]).unwrap();
    // Independent: scaled softmax, explicit sort, cumulative scan.
    let row = logits.row(1);
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / 0.8).exp()).collect();
    let z: f64 = e.iter().sum();
    let probs: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &i in &order {
        kept.push(i);
        cum += probs[i];
        if cum >= 0.6 {
            break;
        }
    }
    for (i, &d) in dist.iter().enumerate() {
        if kept.contains(&i) {
            assert!((d - probs[i] / cum).abs() < 1e-12);
        } else {
            assert_eq!(d, 0.0);
        }
    }
    assert_eq!(dist, filter_probs(&probs, 0.6, None));
}
