use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use xlner::codeswitch::{CodeSwitchConfig, Scope};
use xlner::diff::{dot, AdamW, AdamWConfig, ParamStore, Tape, Tensor};
use xlner::model::{ModelConfig, Network};
use xlner::objectives::LossWeights;
use xlner::relcodec::{decode_grid, decode_scored, encode_grid};
use xlner::selftrain::{build_source_examples, source_batch_loss};
use xlner::synth::{derive_context_lexicon, derive_lexicon, gen_source, SynthConfig};

// deterministic filler in [-1, 1)
fn filler(n: usize, salt: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (((i * 2654435761 + salt * 40503) % 1000) as f32) / 500.0 - 1.0)
        .collect()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        d_rel: 32,
        d_proj: 32,
        vocab_buckets: 1 << 14,
        ..ModelConfig::default()
    }
}

fn corpus(n: usize) -> SynthConfig {
    SynthConfig {
        n_sentences: n,
        ..SynthConfig::default()
    }
}

fn bench_kernels(c: &mut Criterion) {
    let a = filler(4096, 1);
    let b = filler(4096, 2);
    c.bench_function("dot_4096", |bch| bch.iter(|| dot(black_box(&a), black_box(&b))));

    let n = 24;
    let d = 64;
    let x = Tensor::new(vec![n, d], filler(n * d, 3)).unwrap();
    let w = Tensor::new(vec![d, d], filler(d * d, 4)).unwrap();
    c.bench_function("tape_matmul_fwd_bwd_24x64x64", |bch| {
        bch.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.var(x.clone());
            let wv = tape.var(w.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn bench_training(c: &mut Criterion) {
    let synth = corpus(32);
    let sentences = gen_source(&synth).unwrap();
    let mut lexicon = derive_lexicon(&synth);
    lexicon.merge(&derive_context_lexicon(&synth));
    let cs = CodeSwitchConfig {
        scope: Scope::EntitiesAndPhrases,
        ..CodeSwitchConfig::default()
    };
    let (net, params) = Network::init(small_model(), 0).unwrap();
    let examples = build_source_examples(&sentences, &net, Some((&lexicon, &cs)), 0).unwrap();
    let batch: Vec<_> = examples.iter().collect();
    let weights = LossWeights {
        tau: 0.3,
        w: 0.1,
        ..LossWeights::default()
    };

    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    for (name, w) in [("source_step_baseline_b32", 0.0), ("source_step_contrastive_b32", weights.w)] {
        let weights = LossWeights { w, ..weights.clone() };
        group.bench_function(name, |bch| {
            bch.iter_batched(
                || (params.clone(), AdamW::new(AdamWConfig::default(), &params)),
                |(mut p, mut opt): (ParamStore<f32>, AdamW<f32>)| {
                    let mut tape = Tape::new();
                    let (root, _) = source_batch_loss(&mut tape, &net, &p, &batch, &weights, false, 0).unwrap();
                    let grads = tape.backward(root).unwrap().into_params();
                    opt.step(&mut p, &grads).unwrap();
                    p
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn bench_inference(c: &mut Criterion) {
    let synth = corpus(64);
    let sentences = gen_source(&synth).unwrap();
    let (net, params) = Network::init(small_model(), 0).unwrap();
    let tokens = &sentences[0].tokens;
    c.bench_function("predict_one_sentence", |bch| bch.iter(|| net.predict(&params, black_box(tokens)).unwrap()));

    let scored: Vec<_> = sentences.iter().map(|s| net.predict(&params, &s.tokens).unwrap()).collect();
    c.bench_function("decode_scored_64", |bch| {
        bch.iter(|| {
            for s in &scored {
                black_box(decode_scored(s));
            }
        })
    });

    let schema = &synth.schema;
    let grids: Vec<_> = sentences
        .iter()
        .map(|s| encode_grid(&s.spans(), s.len(), schema).unwrap())
        .collect();
    c.bench_function("encode_grid_64", |bch| {
        bch.iter(|| {
            for s in &sentences {
                black_box(encode_grid(&s.spans(), s.len(), schema).unwrap());
            }
        })
    });
    c.bench_function("decode_grid_64", |bch| {
        bch.iter(|| {
            for g in &grids {
                black_box(decode_grid(g));
            }
        })
    });
}

criterion_group!(benches, bench_kernels, bench_training, bench_inference);
criterion_main!(benches);
