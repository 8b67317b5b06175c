//! Corpus-level distribution similarity: `1 − JS` (base 2) between smoothed
//! equal-weight mixtures of the unigram and bigram distributions.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::Corpus;
use crate::tokenizer::Vocabulary;

/// Additive smoothing mass per event.
pub const DEFAULT_SMOOTHING: f64 = 1e-6;

#[derive(Default)]
struct Counts {
    unigrams: BTreeMap<String, f64>,
    bigrams: BTreeMap<(String, String), f64>,
    n_uni: f64,
    n_bi: f64,
}

fn count(c: &Corpus) -> Counts {
    let mut out = Counts::default();
    for r in c.records() {
        let toks = Vocabulary::normalize(&r.text);
        for t in &toks {
            *out.unigrams.entry(t.clone()).or_insert(0.0) += 1.0;
            out.n_uni += 1.0;
        }
        for w in toks.windows(2) {
            *out.bigrams.entry((w[0].clone(), w[1].clone())).or_insert(0.0) += 1.0;
            out.n_bi += 1.0;
        }
    }
    out
}

fn smoothed<K: Ord>(counts: &BTreeMap<K, f64>, total: f64, support: &BTreeSet<&K>, k: f64) -> Vec<f64> {
    let denom = total + k * support.len() as f64;
    support
        .iter()
        .map(|e| (counts.get(*e).copied().unwrap_or(0.0) + k) / denom)
        .collect()
}

fn js_bits(p: &[f64], q: &[f64]) -> f64 {
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).log2();
        }
    }
    js.clamp(0.0, 1.0)
}

/// Similarity in `[0, 1]`; `1` for identical n-gram distributions.
pub fn distribution_similarity(a: &Corpus, b: &Corpus) -> f64 {
    distribution_similarity_with(a, b, DEFAULT_SMOOTHING)
}

pub fn distribution_similarity_with(a: &Corpus, b: &Corpus, smoothing: f64) -> f64 {
    let (ca, cb) = (count(a), count(b));
    let uni: BTreeSet<&String> = ca.unigrams.keys().chain(cb.unigrams.keys()).collect();
    let bi: BTreeSet<&(String, String)> = ca.bigrams.keys().chain(cb.bigrams.keys()).collect();

    // Mixture weights: half unigram, half bigram (all unigram if neither
    // corpus has bigrams).
    let w_bi = if bi.is_empty() { 0.0 } else { 0.5 };
    let mix = |c: &Counts| -> Vec<f64> {
        let mut v: Vec<f64> = smoothed(&c.unigrams, c.n_uni, &uni, smoothing)
            .into_iter()
            .map(|p| p * (1.0 - w_bi))
            .collect();
        if w_bi > 0.0 {
            v.extend(
                smoothed(&c.bigrams, c.n_bi, &bi, smoothing)
                    .into_iter()
                    .map(|p| p * w_bi),
            );
        }
        v
    };
    if uni.is_empty() {
        return 1.0;
    }
    1.0 - js_bits(&mix(&ca), &mix(&cb))
}
