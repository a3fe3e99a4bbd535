use std::hint::black_box;

use ardm_bench::Workload;
use ardm_core::ardm::{corpus_nll, turn_losses};
use ardm_core::model::forward_full;
use ardm_core::tensor::{Graph, Tape};
use ardm_core::tokenizer::Role;
use ardm_core::ModelConfig;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

pub fn forward(c: &mut Criterion) {
    let w = Workload::desk();
    let cfg = w.params.config().clone();
    let p = w.params.params(Role::User);
    let mut group = c.benchmark_group("forward_full");
    for n in [32, 128, 512] {
        let tokens: Vec<u32> = (0..n as u32).map(|i| (i * 37) % cfg.vocab_size as u32).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &tokens, |b, t| {
            b.iter(|| black_box(forward_full(p, &cfg, t).unwrap()))
        });
    }
    group.finish();
}

pub fn dialog_gradient(c: &mut Criterion) {
    let w = Workload::desk();
    let cfg = w.params.config().clone();
    let dialog = w.encoded(0);
    let turns: Vec<(Role, &[u32])> = dialog.iter().map(|(r, t)| (*r, t.as_slice())).collect();
    c.bench_function("dialog loss and gradient", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let user = w.params.params(Role::User).map(|t| tape.leaf(t.clone()));
            let system = w.params.params(Role::System).map(|t| tape.leaf(t.clone()));
            let losses = turn_losses(&mut tape, &[&user, &system], |r| r.index(), &cfg, &turns, None).unwrap();
            let mut total = losses[0].loss.unwrap();
            for l in losses[1..].iter().filter_map(|l| l.loss) {
                total = tape.add(&total, &l).unwrap();
            }
            black_box(tape.backward(total).unwrap())
        })
    });
}

pub fn scoring(c: &mut Criterion) {
    let w = Workload::new(
        50,
        1024,
        ModelConfig {
            dropout_rate: 0.0,
            ..ModelConfig::default()
        },
    );
    let encoded: Vec<_> = w.dialogs.iter().map(|d| d.encode(&w.vocab).unwrap()).collect();
    c.bench_function("corpus nll over 50 dialogs", |b| {
        b.iter(|| black_box(corpus_nll(&w.params, &encoded).unwrap()))
    });
    let text: String = w
        .dialogs
        .iter()
        .flat_map(|d| &d.turns)
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    c.bench_function("bpe encode corpus text", |b| {
        b.iter(|| black_box(w.vocab.encode(&text)))
    });
}

criterion_group!(benches, forward, dialog_gradient, scoring);
criterion_main!(benches);
