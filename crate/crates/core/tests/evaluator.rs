mod common;

use std::collections::{BTreeMap, BTreeSet};

use ardm_core::bundle::Bundle;
use ardm_core::data::{synth_corpus, EntityDB, Prepare, SynthSpec, REQUESTABLE};
use ardm_core::eval::{bleu, entity_match_rate, evaluate, perplexity, requested_in, success_f1, EvalSetup, RoleFilter};
use ardm_core::rng;
use ardm_core::tokenizer::{turn_pieces, Role, Vocab};
use ardm_core::{ArdmParams, Error, ModelConfig, Params, SamplerConfig, Tensor};
use common::{spread_params, tiny_config};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Straightforward corpus BLEU: n-grams as owned strings, clipping by
/// counting occurrences in the reference with a linear scan.
fn oracle_bleu(hyps: &[String], refs: &[String], max_n: usize) -> f64 {
    let grams = |s: &str, n: usize| -> Vec<String> {
        let w: Vec<&str> = s.split_whitespace().collect();
        if w.len() < n {
            return vec![];
        }
        (0..=w.len() - n).map(|i| w[i..i + n].join(" ")).collect()
    };
    let mut log_p = 0.0;
    let (mut c, mut r) = (0.0, 0.0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.split_whitespace().count() as f64;
        r += rf.split_whitespace().count() as f64;
    }
    if c == 0.0 {
        return 0.0;
    }
    for n in 1..=max_n {
        let (mut m, mut t) = (0.0, 0.0);
        for (h, rf) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            let rg = grams(rf, n);
            let mut seen: Vec<&String> = Vec::new();
            for g in &hg {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let in_h = hg.iter().filter(|x| *x == g).count();
                let in_r = rg.iter().filter(|x| *x == g).count();
                m += in_h.min(in_r) as f64;
            }
            t += hg.len() as f64;
        }
        let p = if t == 0.0 || m == 0.0 { 1e-9 } else { m / t };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * log_p.exp()
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn slots(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn bleu_of_identical_corpus_is_100() {
    let refs = ["the phone number is [restaurant_phone] .", "goodbye and enjoy !"];
    for n in [1, 2, 4] {
        assert!((bleu(&refs, &refs, n).unwrap() - 100.0).abs() < 1e-9);
    }
}

#[test]
fn bleu_brevity_penalty_fixture() {
    let b1 = bleu(&["the cat"], &["the cat sat"], 1).unwrap();
    assert!((b1 - 60.65).abs() < 0.01, "{b1}");
    assert!((b1 - 100.0 * (-0.5f64).exp()).abs() < 1e-9);
    // Longer hypotheses are not penalized for length.
    let b = bleu(&["the cat sat down"], &["the cat sat"], 1).unwrap();
    assert!((b - 75.0).abs() < 1e-9);
}

#[test]
fn bleu_clips_repeated_words() {
    let b = bleu(&["the the the the"], &["the cat is on the mat"], 1).unwrap();
    // Two clipped matches out of four, brevity penalty exp(1 - 6/4).
    let expect = 100.0 * 0.5 * (1.0f64 - 1.5).exp();
    assert!((b - expect).abs() < 1e-9);
}

#[test]
fn bleu_of_disjoint_vocabulary_is_near_zero() {
    let b = bleu(&["alpha beta gamma"], &["one two three"], 4).unwrap();
    assert!(b < 1e-6);
    assert_eq!(bleu(&[""], &["one two"], 4).unwrap(), 0.0);
}

#[test]
fn bleu_rejects_bad_inputs() {
    assert!(bleu::<&str, &str>(&[], &[], 4).is_err());
    assert!(bleu(&["a"], &["a", "b"], 4).is_err());
    assert!(bleu(&["a"], &["a"], 0).is_err());
}

fn random_sentence(r: &mut ardm_core::rng::Rng, words: &[&str]) -> String {
    let n = r.random_range(0..9);
    (0..n)
        .map(|_| words[r.random_range(0..words.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

const WORDS: [&str; 8] = ["the", "a", "table", "is", "booked", "for", "two", "."];

#[test]
fn bleu_matches_oracle_on_random_corpora() {
    let mut r = rng::seeded(5);
    for _ in 0..200 {
        let n = r.random_range(1..6);
        let hyps: Vec<String> = (0..n).map(|_| random_sentence(&mut r, &WORDS)).collect();
        let refs: Vec<String> = (0..n).map(|_| random_sentence(&mut r, &WORDS)).collect();
        for max_n in [1, 2, 4] {
            let got = bleu(&hyps, &refs, max_n).unwrap();
            let want = oracle_bleu(&hyps, &refs, max_n);
            assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn bleu_is_invariant_to_pair_order_and_drops_under_corruption() {
    let mut r = rng::seeded(8);
    let refs: Vec<String> = (0..20)
        .map(|_| format!("{} end", random_sentence(&mut r, &WORDS)))
        .collect();
    let mut idx: Vec<usize> = (0..refs.len()).collect();
    idx.shuffle(&mut r);
    let shuffled: Vec<String> = idx.iter().map(|&i| refs[i].clone()).collect();
    let mut hyps = refs.clone();
    let mut last = bleu(&hyps, &refs, 4).unwrap();
    for i in 0..hyps.len() {
        let shuffled_hyps: Vec<String> = idx.iter().map(|&j| hyps[j].clone()).collect();
        let a = bleu(&hyps, &refs, 4).unwrap();
        let b = bleu(&shuffled_hyps, &shuffled, 4).unwrap();
        assert!((a - b).abs() < 1e-9);
        hyps[i] = hyps[i].replace("end", "zzz");
        let now = bleu(&hyps, &refs, 4).unwrap();
        assert!(now <= last + 1e-12);
        last = now;
    }
}

#[test]
fn success_f1_fixtures() {
    let f = success_f1(&[set(&["phone", "address"])], &[set(&["phone", "postcode"])]).unwrap();
    assert!((f - 0.5).abs() < 1e-12);
    let f = success_f1(&[set(&["phone"])], &[set(&["phone", "postcode"])]).unwrap();
    assert!((f - 2.0 / 3.0).abs() < 1e-12);
    // Pooled: tp 2, fp 0, fn 1 and tp 2, fp 1, fn 0 -> 8 / 10.
    let f = success_f1(
        &[set(&["a", "b"]), set(&["c", "d", "e"])],
        &[set(&["a", "b", "x"]), set(&["c", "d"])],
    )
    .unwrap();
    assert!((f - 0.8).abs() < 1e-12);
    assert_eq!(success_f1(&[set(&["a"])], &[set(&["a"])]).unwrap(), 1.0);
    assert_eq!(success_f1(&[set(&[])], &[set(&[])]).unwrap(), 1.0);
    assert_eq!(success_f1(&[set(&["a"])], &[set(&[])]).unwrap(), 0.0);
    assert!(success_f1(&[set(&[])], &[]).is_err());
}

#[test]
fn requested_slots_are_read_from_placeholders() {
    let turns = [
        "the phone number is [restaurant_phone] .",
        "[restaurant_name] is at [restaurant_address] , [restaurant_phone]",
    ];
    let got = requested_in(&turns, &REQUESTABLE);
    assert_eq!(got, set(&["restaurant_phone", "restaurant_address"]));
}

#[test]
fn entity_match_counts_exact_dialogs() {
    let gold = vec![
        slots(&[("food", "thai")]),
        slots(&[("food", "thai"), ("area", "north")]),
        slots(&[]),
        slots(&[("area", "south")]),
    ];
    assert_eq!(entity_match_rate(&gold, &gold).unwrap(), 1.0);
    let mut pred = gold.clone();
    pred[1] = slots(&[("food", "thai")]);
    assert_eq!(entity_match_rate(&pred, &gold).unwrap(), 0.75);
    assert!(entity_match_rate(&[], &[]).is_err());
    assert!(entity_match_rate(&pred[..2], &gold).is_err());
}

fn small_vocab() -> Vocab {
    let pieces: Vec<String> = ["hello there", "hi , how can i help ?"]
        .iter()
        .enumerate()
        .flat_map(|(i, t)| turn_pieces(Role::BOTH[i % 2], t))
        .collect();
    Vocab::train(&pieces, 270, 0, None).unwrap()
}

fn encoded(vocab: &Vocab, dialogs: &[&[&str]]) -> Vec<ardm_core::ardm::EncodedDialog> {
    dialogs
        .iter()
        .map(|d| {
            d.iter()
                .enumerate()
                .map(|(i, t)| {
                    let role = Role::BOTH[i % 2];
                    (role, vocab.encode_turn(role, t).unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn zeroed_model_has_perplexity_equal_to_vocab_size() {
    let vocab = small_vocab();
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        max_positions: 128,
        ..tiny_config(0)
    };
    let zero = Params::init(&cfg).unwrap().map(|t| Tensor::zeros(t.shape()));
    let params = ArdmParams::from_shared(cfg.clone(), zero).unwrap();
    let data = encoded(&vocab, &[&["hello there", "hi , how can i help ?"], &["hello"]]);
    for f in [RoleFilter::User, RoleFilter::System, RoleFilter::Both] {
        let ppl = perplexity(&params, &data, f).unwrap();
        assert!((ppl - cfg.vocab_size as f64).abs() < 1e-9 * ppl, "{f:?} {ppl}");
    }
}

#[test]
fn both_is_the_token_weighted_combination() {
    let vocab = small_vocab();
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        max_positions: 128,
        ..tiny_config(0)
    };
    let params = ArdmParams::from_sets(cfg.clone(), spread_params(&cfg, 0.5, 1), spread_params(&cfg, 0.5, 2)).unwrap();
    let data = encoded(
        &vocab,
        &[
            &["hello there", "hi , how can i help ?", "hello"],
            &["hi", "hello there"],
        ],
    );
    let pu = perplexity(&params, &data, RoleFilter::User).unwrap();
    let ps = perplexity(&params, &data, RoleFilter::System).unwrap();
    let pb = perplexity(&params, &data, RoleFilter::Both).unwrap();
    let count = |role: Role| -> usize {
        data.iter()
            .flat_map(|d| d.iter())
            .filter(|(r, _)| *r == role)
            .map(|(_, t)| t.len() - 1)
            .sum()
    };
    let (nu, ns) = (count(Role::User) as f64, count(Role::System) as f64);
    let expect = ((nu * pu.ln() + ns * ps.ln()) / (nu + ns)).exp();
    assert!((pb - expect).abs() < 1e-9 * pb);

    let user_only = encoded(&vocab, &[&["hello there"]]);
    assert!(matches!(
        perplexity(&params, &user_only, RoleFilter::System),
        Err(Error::InvalidArgument(_))
    ));
}

struct Fixture {
    records: Vec<ardm_core::data::DialogRecord>,
    db: EntityDB,
    vocab: Vocab,
    params: ArdmParams,
}

fn fixture(n: usize) -> Fixture {
    let (records, db) = synth_corpus(SynthSpec {
        n_dialogs: n,
        grammar_seed: 3,
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
    let vocab = Vocab::train(&pieces, 400, 0, None).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        max_positions: 512,
        ..tiny_config(4)
    };
    let params = ArdmParams::from_sets(cfg.clone(), spread_params(&cfg, 0.4, 7), spread_params(&cfg, 0.4, 8)).unwrap();
    Fixture {
        records,
        db,
        vocab,
        params,
    }
}

fn setup<'a>(f: &'a Fixture, generate: bool) -> EvalSetup<'a> {
    EvalSetup {
        vocab: &f.vocab,
        db: Some(&f.db),
        sampler: SamplerConfig {
            top_p: 0.9,
            max_utterance_tokens: 6,
            seed: 11,
            ..SamplerConfig::default()
        },
        requestable: &REQUESTABLE,
        batch_size: 4,
        generate,
    }
}

#[test]
fn evaluate_reports_every_metric_on_a_synthetic_corpus() {
    let f = fixture(12);
    let report = evaluate(&f.params, &f.records, &setup(&f, true)).unwrap();

    let prep = Prepare {
        db: Some(&f.db),
        ..Prepare::default()
    };
    let dialogs: Vec<_> = f.records.iter().map(|r| r.to_dialog(&prep).unwrap()).collect();
    let enc: Vec<_> = dialogs.iter().map(|d| d.encode(&f.vocab).unwrap()).collect();
    let ppl = perplexity(&f.params, &enc, RoleFilter::Both).unwrap();
    assert_eq!(report.perplexity.both, Some(ppl));
    assert_eq!(
        report.perplexity.user,
        Some(perplexity(&f.params, &enc, RoleFilter::User).unwrap())
    );

    let system_turns: usize = dialogs
        .iter()
        .map(|d| d.turns.iter().filter(|t| t.role == Role::System).count())
        .sum();
    assert_eq!(report.counts.dialogs, 12);
    assert_eq!(report.counts.generated_turns, system_turns);
    assert_eq!(report.counts.skipped, 0);
    let b = report.bleu.as_ref().unwrap();
    for v in [b.bleu1, b.bleu2, b.bleu4] {
        assert!((0.0..=100.0).contains(&v));
    }
    assert!((0.0..=1.0).contains(&report.success_f1.unwrap()));
    // The tracker reads gold entities back from the synthetic surface text.
    assert_eq!(report.entity_match_rate, Some(1.0));

    // Deterministic for a fixed sampler seed.
    assert_eq!(report, evaluate(&f.params, &f.records, &setup(&f, true)).unwrap());
}

#[test]
fn evaluate_without_generation_skips_text_metrics() {
    let f = fixture(4);
    let report = evaluate(&f.params, &f.records, &setup(&f, false)).unwrap();
    assert!(report.bleu.is_none());
    assert!(report.success_f1.is_none());
    assert_eq!(report.counts.generated_turns, 0);
    assert!(report.perplexity.both.is_some());
    assert!(evaluate(&f.params, &[], &setup(&f, false)).is_err());
}

#[test]
fn evaluate_skips_dialogs_beyond_the_position_limit() {
    let f = fixture(6);
    let cfg = ModelConfig {
        max_positions: 40,
        ..f.params.config().clone()
    };
    let params = ArdmParams::new(cfg).unwrap();
    let report = evaluate(&params, &f.records, &setup(&f, true)).unwrap();
    assert!(report.counts.skipped > 0);
    assert!(report.counts.skipped < 6 || report.perplexity.both.is_none());
}

#[test]
fn bundle_round_trips() {
    let f = fixture(3);
    let dir = tempfile::tempdir().unwrap();
    for shared in [false, true] {
        let params = if shared {
            ArdmParams::from_shared(f.params.config().clone(), f.params.sets()[1].clone()).unwrap()
        } else {
            f.params.clone()
        };
        let bundle = Bundle {
            params,
            vocab: f.vocab.clone(),
            db: Some(f.db.clone()),
        };
        let path = dir.path().join(format!("m{shared}"));
        bundle.save(&path).unwrap();
        let back = Bundle::load(&path).unwrap();
        let rounded: Vec<Params> = bundle
            .params
            .sets()
            .iter()
            .map(|p| p.map(Tensor::to_f32_precision))
            .collect();
        assert_eq!(back.params.sets(), &rounded[..]);
        assert_eq!(back.params.config(), bundle.params.config());
        assert_eq!(back.vocab, bundle.vocab);
        assert_eq!(back.db, bundle.db);
    }
}

#[test]
fn bundle_rejects_damaged_directories() {
    let f = fixture(2);
    let dir = tempfile::tempdir().unwrap();
    assert!(Bundle::load(dir.path().join("missing")).is_err());

    let bundle = Bundle {
        params: f.params.clone(),
        vocab: f.vocab.clone(),
        db: None,
    };
    bundle.save(dir.path()).unwrap();
    assert!(Bundle::load(dir.path()).unwrap().db.is_none());

    let manifest = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(
        &manifest,
        text.replace("\"format_version\": 1", "\"format_version\": 9"),
    )
    .unwrap();
    assert!(matches!(Bundle::load(dir.path()), Err(Error::Format(_))));

    std::fs::write(&manifest, text.replace("\"shared\": false", "\"shared\": true")).unwrap();
    assert!(matches!(Bundle::load(dir.path()), Err(Error::Format(_))));

    std::fs::write(&manifest, &text).unwrap();
    std::fs::write(dir.path().join("system.ardm"), b"junk").unwrap();
    assert!(Bundle::load(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn success_f1_is_bounded_and_symmetric(
        p in proptest::collection::vec(proptest::collection::btree_set("[a-e]", 0..4), 1..6),
        seed in 0u64..1000,
    ) {
        let mut r = rng::seeded(seed);
        let g: Vec<BTreeSet<String>> = p.iter().map(|s| {
            let mut g: BTreeSet<String> = s.iter().filter(|_| r.random_bool(0.6)).cloned().collect();
            if r.random_bool(0.3) {
                g.insert("z".into());
            }
            g
        }).collect();
        let a = success_f1(&p, &g).unwrap();
        let b = success_f1(&g, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }
}
