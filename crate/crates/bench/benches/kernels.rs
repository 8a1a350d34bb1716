use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stfm_core::data::{SyntheticSpec, SyntheticTask};
use stfm_core::eval::corpus_bleu;
use stfm_core::{AttentionMask, Sentence, Tape, Tensor, Trainer, TrainingConfig, TransformerConfig, Variant};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_backward");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [32usize, 128, 512] {
        let (a, b) = (random(n, 64, &mut rng), random(64, 64, &mut rng));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let x = tape.leaf(a.clone(), true);
                let w = tape.leaf(b.clone(), true);
                let y = x.matmul(w).unwrap().sum();
                tape.backward(y).unwrap();
            })
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention_backward");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, len, d) = (32usize, 16usize, 64usize);
    let qkv: Vec<Tensor> = (0..3).map(|_| random(batch * len, d, &mut rng)).collect();
    let lens = vec![len; batch];
    for (name, mask) in [
        ("causal", Arc::new(AttentionMask::causal(len, &lens))),
        ("padding", Arc::new(AttentionMask::key_padding(len, len, &lens))),
    ] {
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let tape = Tape::new();
                let [q, k, v] = [0, 1, 2].map(|i| tape.leaf(qkv[i].clone(), true));
                let out = tape.attention(q, k, v, mask.clone(), 4).unwrap().sum();
                tape.backward(out).unwrap();
            })
        });
    }
    g.finish();
}

fn training_steps(c: &mut Criterion) {
    let task = SyntheticTask::generate(&SyntheticSpec::default_with_seed(1)).unwrap();
    let vocab = task.vocabulary().unwrap();
    let corpora = task.corpora(&vocab, 16);
    let cfg = TransformerConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 64,
        ff_dim: 128,
        max_len: 16,
        vocab_size: vocab.len(),
        num_styles: 2,
    };
    let mut trainer = Trainer::new(TrainingConfig::default(), &cfg, Variant::MultiClass, &corpora).unwrap();
    let mut g = c.benchmark_group("training_step");
    g.sample_size(10).measurement_time(Duration::from_secs(10));
    g.bench_function("discriminator", |bench| {
        bench.iter_batched(|| trainer.clone(), |mut t| {
            let b = t.sample_batch();
            t.discriminator_step(&b).unwrap()
        }, BatchSize::LargeInput)
    });
    g.bench_function("generator", |bench| {
        bench.iter_batched(|| trainer.clone(), |mut t| {
            let b = t.sample_batch();
            t.generator_step(&b).unwrap()
        }, BatchSize::LargeInput)
    });
    g.bench_function("iteration", |bench| bench.iter(|| trainer.iterate().unwrap().clone()));
    g.finish();
}

fn bleu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sentence = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(4..14);
        Sentence::from_content(&(0..n).map(|_| rng.gen_range(4..60)).collect::<Vec<_>>()).unwrap()
    };
    let cands: Vec<Sentence> = (0..400).map(|_| sentence(&mut rng)).collect();
    let refs: Vec<Sentence> = (0..400).map(|_| sentence(&mut rng)).collect();
    let ref_sets: Vec<Vec<&Sentence>> = refs.iter().map(|r| vec![r]).collect();
    c.bench_function("corpus_bleu_400", |bench| bench.iter(|| corpus_bleu(&cands, &ref_sets).unwrap()));
}

criterion_group!(benches, matmul, attention, training_steps, bleu);
criterion_main!(benches);
