//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dptwin::corpus::{Corpus, CorpusRole, LabeledRecord};
use dptwin::prompt::{Attribute, AttributeSchema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn lse(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Order-α Rényi divergence of the subsampled Gaussian, by trapezoidal
/// quadrature of `E_{z~N(0,σ²)} [((1−q) + q·e^{(2z−1)/(2σ²)})^α]` in log
/// space.
pub fn rdp_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let lo = -40.0 * sigma;
    let hi = alpha + 40.0 * sigma;
    let n = 400_000usize;
    let h = (hi - lo) / n as f64;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=n {
        let z = lo + i as f64 * h;
        let inner = lse((1.0 - q).ln(), q.ln() + (2.0 * z - 1.0) / (2.0 * s2));
        let w = if i == 0 || i == n { 0.5f64.ln() } else { 0.0 };
        acc = lse(acc, w + log_norm - z * z / (2.0 * s2) + alpha * inner);
    }
    (acc + h.ln()) / (alpha - 1.0)
}

/// Tight ε of the Gaussian mechanism (sensitivity 1, noise σ) at δ, from
/// `δ(ε) = Φ(1/(2σ) − εσ) − e^ε Φ(−1/(2σ) − εσ)`.
pub fn gaussian_epsilon(sigma: f64, delta: f64) -> f64 {
    let phi = Normal::standard();
    let d = |e: f64| phi.cdf(0.5 / sigma - e * sigma) - e.exp() * phi.cdf(-0.5 / sigma - e * sigma);
    let (mut lo, mut hi) = (0.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn binary_schema() -> AttributeSchema {
    AttributeSchema::new(vec![Attribute::new("s", &["p", "n"])]).unwrap()
}

pub fn labeled(schema: &AttributeSchema, rows: &[(&str, &str)]) -> Corpus {
    let name = schema.names()[0].clone();
    let recs = rows
        .iter()
        .map(|(t, l)| {
            let mut a = BTreeMap::new();
            a.insert(name.clone(), l.to_string());
            LabeledRecord::new(*t, a)
        })
        .collect();
    Corpus::new(recs, schema.clone(), CorpusRole::Train).unwrap()
}

/// Random texts over a small vocabulary so near-duplicates are common.
pub fn random_corpus(n: usize, vocab: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = binary_schema();
    let recs = (0..n)
        .map(|_| {
            let len = rng.random_range(1..9);
            let text: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect();
            let mut a = BTreeMap::new();
            a.insert(
                "s".to_string(),
                if rng.random_bool(0.5) { "p" } else { "n" }.to_string(),
            );
            LabeledRecord::new(text.join(" "), a)
        })
        .collect();
    Corpus::new(recs, schema, CorpusRole::Synthetic).unwrap()
}

/// A pipeline config small enough to run end to end in a few seconds.
pub fn small_config(out: &std::path::Path) -> dptwin::cli::PipelineConfig {
    use dptwin::cli::{CorpusSource, PipelineConfig};
    use dptwin::corpus::ToyCorpusSpec;
    use dptwin::synthesis::{ModelShape, PhaseConfig};

    let mut c = PipelineConfig::default();
    let mut spec = ToyCorpusSpec::sentiment(24, 0);
    spec.public_records = 40;
    c.corpus = CorpusSource::Toy(spec);
    c.train.model = ModelShape {
        embed_dim: 8,
        hidden_dim: 8,
        context_length: 32,
        max_vocab: 512,
    };
    c.train.pretrain.epochs = 1;
    c.train.dp_finetune = PhaseConfig {
        epochs: 2,
        batch_size: 10,
        learning_rate: 1e-2,
    };
    c.train.plain_finetune.epochs = 1;
    c.evaluation.dp_classifier.epochs = 2;
    c.out = out.to_path_buf();
    c
}

pub fn write_config(dir: &std::path::Path, c: &dptwin::cli::PipelineConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(c).unwrap()).unwrap();
    p
}
