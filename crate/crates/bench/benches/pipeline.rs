use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use rgx_bench::{logits, three_band_losses};
use rgx_core::backends::MockBackend;
use rgx_core::emselect::{fit_em_1d, EmConfig};
use rgx_core::plantgen::planted_corpus;
use rgx_core::qaecore::decode_answer;
use rgx_core::spanops::{score_spans, select_topk_nonoverlap};
use rgx_core::synth::{synthesize_corpus, SynthConfig};

fn spans(c: &mut Criterion) {
    let mut g = c.benchmark_group("spans");
    for n in [64usize, 256, 512] {
        let l = logits(n, n as u64);
        g.bench_with_input(BenchmarkId::new("decode_answer", n), &l, |b, l| {
            b.iter(|| decode_answer(black_box(l), 10).unwrap())
        });
        let scored = score_spans(&l.start_logits, &l.end_logits, 10).unwrap();
        g.bench_with_input(BenchmarkId::new("select_topk_nonoverlap", n), &scored, |b, s| {
            b.iter(|| select_topk_nonoverlap(black_box(s), 40))
        });
    }
    g.finish();
}

fn em(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_em_1d");
    for n in [30usize, 300, 3000] {
        let xs = three_band_losses(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &xs, |b, xs| {
            b.iter(|| fit_em_1d(black_box(xs), &EmConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let pc = planted_corpus(20, 1);
    let backend = MockBackend::planted(&pc.entities, 0.5, 1);
    let cfg = SynthConfig::default();
    c.bench_function("synthesize_corpus/20 planted passages", |b| {
        b.iter(|| synthesize_corpus(&backend, black_box(&pc.corpus.passages), &cfg))
    });
}

criterion_group!(benches, spans, em, synthesis);
criterion_main!(benches);
