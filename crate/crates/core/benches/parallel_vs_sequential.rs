//! Per-sample gradients and pairwise duplicate scans: the library's data-parallel
//! map against a plain sequential loop. Build with `--no-default-features`
//! to make the library path sequential as well.

use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dptwin::corpus::{Corpus, CorpusRole, LabeledRecord};
use dptwin::eval::leakage::{overlaps, TrigramSet};
use dptwin::model::{Example, LanguageModel, LossConfig, ModelConfig, Sequence};
use dptwin::parallel;
use dptwin::prompt::{Attribute, AttributeSchema};
use dptwin::tokenizer::{build_from_texts, BOS, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn label(mode: &str) -> String {
    if mode == "library" {
        format!(
            "library ({})",
            if parallel::is_parallel() { "rayon" } else { "sequential" }
        )
    } else {
        mode.to_string()
    }
}

fn grad_batch(c: &mut Criterion) {
    let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let vocab = build_from_texts([words.join(" ").as_str()], 256).unwrap();
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.context_length = 32;
    let model = LanguageModel::new(cfg, vocab.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq = |rng: &mut ChaCha8Rng| {
        let mut ids = vec![BOS];
        ids.extend((0..20).map(|_| rng.random_range(4..vocab.len() as u32)));
        ids.push(EOS);
        Sequence::new(ids, 4)
    };
    let batch: Vec<Example> = (0..32)
        .map(|_| Example {
            correct: seq(&mut rng),
            wrong: vec![seq(&mut rng)],
        })
        .collect();
    let loss = LossConfig::default();

    let mut g = c.benchmark_group("per_sample_grads_32");
    g.sample_size(10);
    g.bench_function(label("library"), |b| {
        b.iter(|| parallel::map_slice(&batch, |ex| model.per_sample_grad(black_box(ex), &loss).unwrap()))
    });
    g.bench_function(label("sequential"), |b| {
        b.iter(|| {
            batch
                .iter()
                .map(|ex| model.per_sample_grad(black_box(ex), &loss).unwrap())
                .collect::<Vec<_>>()
        })
    });
    g.finish();
}

fn corpus(n: usize, seed: u64) -> Corpus {
    let schema = AttributeSchema::new(vec![Attribute::new("s", &["p", "n"])]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs = (0..n)
        .map(|_| {
            let len = rng.random_range(4..16);
            let text: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..40))).collect();
            let mut a = BTreeMap::new();
            a.insert("s".to_string(), "p".to_string());
            LabeledRecord::new(text.join(" "), a)
        })
        .collect();
    Corpus::new(recs, schema, CorpusRole::Synthetic).unwrap()
}

fn duplicates(c: &mut Criterion) {
    let synth = corpus(1000, 1);
    let train = corpus(1000, 2);
    let train_sets: Vec<TrigramSet> = train.records().iter().map(|r| TrigramSet::of(&r.text)).collect();
    let per_record = |r: &LabeledRecord| {
        let s = TrigramSet::of(&r.text);
        train_sets.iter().filter(|t| overlaps(&s, t)).count()
    };
    let mut g = c.benchmark_group("pairwise_duplicates_1000x1000");
    g.sample_size(10);
    g.bench_function(label("library"), |b| {
        b.iter(|| parallel::map_slice(black_box(synth.records()), per_record))
    });
    g.bench_function(label("sequential"), |b| {
        b.iter(|| black_box(synth.records()).iter().map(per_record).collect::<Vec<_>>())
    });
    g.finish();
}

criterion_group!(benches, grad_batch, duplicates);
criterion_main!(benches);
