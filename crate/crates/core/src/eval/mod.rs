//! Utility, leakage, label fidelity and distributional quality of
//! synthetic corpora.

pub mod classifier;
pub mod leakage;
pub mod similarity;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use classifier::{
    dp_classifier_baseline, label_fidelity, train_tfidf_classifier, utility_gap, DpBaseline, DpClassifierConfig,
    LinearClassifier, PrivacyTarget, TfidfVectorizer,
};
pub use leakage::{canary_extraction, duplicate_count, is_duplicate, CanaryHits, DuplicateCount, TrigramSet};
pub use similarity::distribution_similarity;

/// Utility of one attribute's classifiers, all scored on the same test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeUtility {
    pub attribute: String,
    pub real_accuracy: f64,
    pub synthetic_accuracy: f64,
    pub dp_real_accuracy: Option<f64>,
    /// Synthetic records whose prompted label the real-data classifier
    /// agrees with.
    pub label_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub duplicates: DuplicateCount,
    pub canaries: Vec<CanaryHits>,
    pub utility: Vec<AttributeUtility>,
    pub similarity: f64,
    pub synthetic_records: usize,
    pub train_records: usize,
    pub test_records: usize,
    /// Run metadata: seed, config hash, privacy parameters and the like.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "records          synthetic {}  train {}  test {}",
            self.synthetic_records, self.train_records, self.test_records
        );
        let _ = writeln!(
            s,
            "duplicates       {} pairs, {} synthetic records",
            self.duplicates.pairs, self.duplicates.synthetic_records
        );
        for c in &self.canaries {
            let _ = writeln!(s, "canary           {:?}: {}", c.canary, c.count);
        }
        let _ = writeln!(s, "similarity       {:.4}", self.similarity);
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>10} {:>8} {:>9}",
            "attribute", "real", "synthetic", "dp-real", "fidelity"
        );
        for u in &self.utility {
            let dp = u.dp_real_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:<16} {:>8.4} {:>10.4} {:>8} {:>9.4}",
                u.attribute, u.real_accuracy, u.synthetic_accuracy, dp, u.label_fidelity
            );
        }
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k:<16} {v}");
        }
        s
    }
}

/// Inputs of a full audit.
pub struct AuditInputs<'a> {
    pub synthetic: &'a crate::corpus::Corpus,
    pub train: &'a crate::corpus::Corpus,
    pub test: &'a crate::corpus::Corpus,
    pub canaries: &'a [String],
    /// When set, also train the DP classifier on real data with this target
    /// and feature map.
    pub dp_baseline: Option<(PrivacyTarget, &'a TfidfVectorizer, &'a DpClassifierConfig)>,
}

/// Every metric for every schema attribute.
pub fn audit(inputs: &AuditInputs<'_>, metadata: BTreeMap<String, serde_json::Value>) -> crate::Result<AuditReport> {
    if inputs.synthetic.is_empty() {
        return Err(crate::Error::Evaluation("synthetic corpus is empty".into()));
    }
    let mut utility = Vec::new();
    for name in inputs.train.schema().names() {
        let real = train_tfidf_classifier(inputs.train, &name)?;
        let synth = train_tfidf_classifier(inputs.synthetic, &name)?;
        let dp_real_accuracy = match &inputs.dp_baseline {
            Some((target, features, cfg)) => {
                Some(dp_classifier_baseline(inputs.train, inputs.test, &name, *target, features, cfg)?.accuracy)
            }
            None => None,
        };
        utility.push(AttributeUtility {
            real_accuracy: real.accuracy(inputs.test)?,
            synthetic_accuracy: synth.accuracy(inputs.test)?,
            dp_real_accuracy,
            label_fidelity: label_fidelity(inputs.synthetic, &real)?,
            attribute: name,
        });
    }
    Ok(AuditReport {
        duplicates: duplicate_count(inputs.synthetic, inputs.train),
        canaries: canary_extraction(inputs.synthetic, inputs.canaries),
        utility,
        similarity: distribution_similarity(inputs.synthetic, inputs.train),
        synthetic_records: inputs.synthetic.len(),
        train_records: inputs.train.len(),
        test_records: inputs.test.len(),
        metadata,
    })
}
