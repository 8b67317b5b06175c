//! Near-duplicate and canary leakage between synthetic and training texts.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::parallel;
use crate::tokenizer::Vocabulary;

/// Word-level trigram set of a normalized text (empty under 3 tokens).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrigramSet(HashSet<[String; 3]>);

impl TrigramSet {
    pub fn of(text: &str) -> Self {
        let toks = Vocabulary::normalize(text);
        TrigramSet(
            toks.windows(3)
                .map(|w| [w[0].clone(), w[1].clone(), w[2].clone()])
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intersection_len(&self, other: &TrigramSet) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.0.iter().filter(|t| large.0.contains(*t)).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[String; 3]> {
        self.0.iter()
    }
}

/// Overlap test on trigram sets: `|A ∩ B| ≥ ½ · min(|A|, |B|)` with both
/// sets non-empty.
pub fn overlaps(a: &TrigramSet, b: &TrigramSet) -> bool {
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        return false;
    }
    2 * a.intersection_len(b) >= na.min(nb)
}

pub fn is_duplicate(a: &str, b: &str) -> bool {
    overlaps(&TrigramSet::of(a), &TrigramSet::of(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateCount {
    /// (synthetic, train) pairs that are duplicates.
    pub pairs: usize,
    /// Synthetic records with at least one duplicate.
    pub synthetic_records: usize,
}

/// Pairwise count over every (synthetic, train) combination.
pub fn duplicate_count_brute_force(synthetic: &Corpus, train: &Corpus) -> DuplicateCount {
    let train_sets: Vec<TrigramSet> = train.records().iter().map(|r| TrigramSet::of(&r.text)).collect();
    let per_record = parallel::map_slice(synthetic.records(), |r| {
        let s = TrigramSet::of(&r.text);
        train_sets.iter().filter(|t| overlaps(&s, t)).count()
    });
    tally(&per_record)
}

/// Same count as [`duplicate_count_brute_force`], using an inverted
/// trigram index so only train records sharing a trigram are examined.
pub fn duplicate_count(synthetic: &Corpus, train: &Corpus) -> DuplicateCount {
    let train_sets: Vec<TrigramSet> = train.records().iter().map(|r| TrigramSet::of(&r.text)).collect();
    let mut index: HashMap<&[String; 3], Vec<usize>> = HashMap::new();
    for (i, s) in train_sets.iter().enumerate() {
        for t in s.iter() {
            index.entry(t).or_default().push(i);
        }
    }
    let per_record = parallel::map_slice(synthetic.records(), |r| {
        let s = TrigramSet::of(&r.text);
        if s.is_empty() {
            return 0;
        }
        let mut shared: HashMap<usize, usize> = HashMap::new();
        for t in s.iter() {
            if let Some(ids) = index.get(t) {
                for &i in ids {
                    *shared.entry(i).or_insert(0) += 1;
                }
            }
        }
        shared
            .into_iter()
            .filter(|&(i, inter)| 2 * inter >= s.len().min(train_sets[i].len()))
            .count()
    });
    tally(&per_record)
}

fn tally(per_record: &[usize]) -> DuplicateCount {
    DuplicateCount {
        pairs: per_record.iter().sum(),
        synthetic_records: per_record.iter().filter(|&&n| n > 0).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanaryHits {
    pub canary: String,
    pub count: usize,
}

/// Number of synthetic records containing each canary as a contiguous
/// token subsequence.
pub fn canary_extraction(synthetic: &Corpus, canaries: &[String]) -> Vec<CanaryHits> {
    let tokenized: Vec<Vec<String>> = synthetic
        .records()
        .iter()
        .map(|r| Vocabulary::normalize(&r.text))
        .collect();
    canaries
        .iter()
        .map(|c| {
            let needle = Vocabulary::normalize(c);
            let count = if needle.is_empty() {
                0
            } else {
                tokenized
                    .iter()
                    .filter(|toks| toks.windows(needle.len()).any(|w| w == needle.as_slice()))
                    .count()
            };
            CanaryHits {
                canary: c.clone(),
                count,
            }
        })
        .collect()
}
