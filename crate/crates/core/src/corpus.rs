//! Labeled text corpora: JSONL ingestion and serialization, stratified
//! splitting, and a seeded toy-corpus generator with planted canaries.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Assignment, Attribute, AttributeSchema};
use crate::seed;

/// One text and its attribute assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub text: String,
    #[serde(default)]
    pub attrs: Assignment,
}

impl LabeledRecord {
    pub fn new(text: impl Into<String>, attrs: Assignment) -> Self {
        LabeledRecord {
            text: text.into(),
            attrs,
        }
    }

    fn validate(&self, schema: &AttributeSchema) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("text is empty".into());
        }
        schema.check_partial(&self.attrs).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    Train,
    Test,
    Synthetic,
    Public,
}

/// An ordered collection of records validated against a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<LabeledRecord>,
    schema: AttributeSchema,
    role: CorpusRole,
}

impl Corpus {
    pub fn new(records: Vec<LabeledRecord>, schema: AttributeSchema, role: CorpusRole) -> Result<Self> {
        for (index, r) in records.iter().enumerate() {
            r.validate(&schema)
                .map_err(|message| Error::InvalidRecord { index, message })?;
        }
        Ok(Corpus { records, schema, role })
    }

    pub fn records(&self) -> &[LabeledRecord] {
        &self.records
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_role(mut self, role: CorpusRole) -> Self {
        self.role = role;
        self
    }

    /// Values of `attribute` per record (`None` where unlabeled).
    pub fn labels(&self, attribute: &str) -> Vec<Option<&str>> {
        self.records
            .iter()
            .map(|r| r.attrs.get(attribute).map(String::as_str))
            .collect()
    }

    /// Record counts per complete assignment.
    pub fn class_counts(&self) -> BTreeMap<Assignment, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.attrs.clone()).or_insert(0) += 1;
        }
        m
    }

    /// Require every record to carry a complete assignment.
    pub fn check_fully_labeled(&self) -> Result<()> {
        for (index, r) in self.records.iter().enumerate() {
            self.schema.check_complete(&r.attrs).map_err(|e| Error::InvalidRecord {
                index,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Read one record per non-blank line.
pub fn load_jsonl(path: impl AsRef<Path>, schema: &AttributeSchema, role: CorpusRole) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabeledRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Err(message) = rec.validate(schema) {
            return Err(Error::InvalidRecord {
                index: records.len(),
                message: format!("line {}: {message}", i + 1),
            });
        }
        records.push(rec);
    }
    Ok(Corpus {
        records,
        schema: schema.clone(),
        role,
    })
}

/// Write one JSON object per line. Newlines inside text are escaped.
pub fn write_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &corpus.records {
        let line = serde_json::to_string(r).expect("record serializes");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stratified random split into `(train, test)`.
///
/// Sizes are `floor(n * f)` and the remainder; each class (complete
/// assignment) is allocated within one record of its proportional share.
/// Records keep their original relative order in both halves.
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(
            "train_fraction",
            format!("{train_fraction} is outside (0, 1)"),
        ));
    }
    if corpus.is_empty() {
        return Err(Error::config("corpus", "cannot split an empty corpus"));
    }
    let n = corpus.len();
    let n_train = (n as f64 * train_fraction).floor() as usize;

    let mut classes: BTreeMap<&Assignment, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.records.iter().enumerate() {
        classes.entry(&r.attrs).or_default().push(i);
    }

    // Largest-remainder allocation of train slots across classes.
    let shares: Vec<f64> = classes
        .values()
        .map(|idx| idx.len() as f64 * n_train as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut left = n_train - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[c] < classes.values().nth(c).unwrap().len() {
            quota[c] += 1;
            left -= 1;
        }
    }

    let mut rng = seed::stream(seed, "split", 0);
    let mut in_train = vec![false; n];
    for (c, idx) in classes.values().enumerate() {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..quota[c]] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (i, r) in corpus.records.iter().enumerate() {
        if in_train[i] {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((
        Corpus {
            records: train,
            schema: corpus.schema.clone(),
            role: CorpusRole::Train,
        },
        Corpus {
            records: test,
            schema: corpus.schema.clone(),
            role: CorpusRole::Test,
        },
    ))
}

/// One value of a toy attribute and the words that signal it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyValue {
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalization: Option<String>,
    pub lexicon: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyAttribute {
    pub name: String,
    pub values: Vec<ToyValue>,
}

/// A secret token sequence and how many private records receive it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canary {
    pub text: String,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanaryPlacement {
    /// At a uniformly random word boundary.
    #[default]
    Random,
    /// At the start of the text.
    Start,
}

/// Recipe for a synthetic bag-of-words corpus with class-specific lexicons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub attributes: Vec<ToyAttribute>,
    pub neutral: Vec<String>,
    /// Private records per complete assignment.
    pub records_per_class: usize,
    /// Size of the unlabeled public corpus.
    pub public_records: usize,
    /// Inclusive token-count range of a sentence.
    pub length_range: (usize, usize),
    /// Share of each private sentence drawn from its signature lexicons.
    #[serde(default = "default_signature_fraction")]
    pub signature_fraction: f64,
    #[serde(default)]
    pub canaries: Vec<Canary>,
    #[serde(default)]
    pub canary_placement: CanaryPlacement,
    pub seed: u64,
}

fn default_signature_fraction() -> f64 {
    0.7
}

const POSITIVE: &[&str] = &[
    "great",
    "wonderful",
    "superb",
    "brilliant",
    "delightful",
    "excellent",
    "lovely",
    "charming",
    "gripping",
    "masterful",
    "stunning",
    "joyful",
    "moving",
    "fantastic",
    "terrific",
    "beautiful",
    "engaging",
    "splendid",
    "marvelous",
    "inspiring",
];
const NEGATIVE: &[&str] = &[
    "awful",
    "boring",
    "dreadful",
    "terrible",
    "dull",
    "tedious",
    "clumsy",
    "horrible",
    "bland",
    "weak",
    "messy",
    "annoying",
    "poor",
    "lifeless",
    "painful",
    "shallow",
    "clichéd",
    "sloppy",
    "forgettable",
    "disappointing",
];
const NEUTRAL: &[&str] = &[
    "the",
    "story",
    "plot",
    "scene",
    "actor",
    "film",
    "it",
    "was",
    "and",
    "with",
    "this",
    "of",
    "ending",
    "music",
    "cast",
    "director",
    "really",
    "very",
    "quite",
    "some",
    "moments",
    "script",
    "character",
    "time",
    "overall",
    "screen",
    "watching",
    "hour",
    "i",
    "felt",
];
const BOOKS: &[&str] = &[
    "chapter",
    "author",
    "novel",
    "pages",
    "prose",
    "paperback",
    "narrator",
    "reading",
    "sequel",
    "hardcover",
];
const ELECTRONICS: &[&str] = &[
    "battery",
    "charger",
    "screen-size",
    "cable",
    "device",
    "volume",
    "firmware",
    "wireless",
    "speaker",
    "adapter",
];

fn words(w: &[&str]) -> Vec<String> {
    w.iter().map(|s| s.to_string()).collect()
}

impl ToyCorpusSpec {
    /// Binary sentiment corpus with the built-in lexicons.
    pub fn sentiment(records_per_class: usize, seed: u64) -> Self {
        ToyCorpusSpec {
            attributes: vec![ToyAttribute {
                name: "sentiment".into(),
                values: vec![
                    ToyValue {
                        value: "positive".into(),
                        verbalization: None,
                        lexicon: words(POSITIVE),
                    },
                    ToyValue {
                        value: "negative".into(),
                        verbalization: None,
                        lexicon: words(NEGATIVE),
                    },
                ],
            }],
            neutral: words(NEUTRAL),
            records_per_class,
            public_records: 1000,
            length_range: (8, 14),
            signature_fraction: default_signature_fraction(),
            canaries: Vec::new(),
            canary_placement: CanaryPlacement::Random,
            seed,
        }
    }

    /// Sentiment × product-category corpus (four classes).
    pub fn sentiment_category(records_per_class: usize, seed: u64) -> Self {
        let mut spec = Self::sentiment(records_per_class, seed);
        spec.attributes.push(ToyAttribute {
            name: "category".into(),
            values: vec![
                ToyValue {
                    value: "books".into(),
                    verbalization: Some("a book".into()),
                    lexicon: words(BOOKS),
                },
                ToyValue {
                    value: "electronics".into(),
                    verbalization: Some("an electronics product".into()),
                    lexicon: words(ELECTRONICS),
                },
            ],
        });
        spec
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        AttributeSchema::new(
            self.attributes
                .iter()
                .map(|a| {
                    let mut attr = Attribute {
                        name: a.name.clone(),
                        values: a.values.iter().map(|v| v.value.clone()).collect(),
                        verbalizer: BTreeMap::new(),
                    };
                    for v in &a.values {
                        if let Some(verbal) = &v.verbalization {
                            attr.verbalizer.insert(v.value.clone(), verbal.clone());
                        }
                    }
                    attr
                })
                .collect(),
        )
    }

    /// Every word the generator can emit, including canary tokens.
    pub fn all_words(&self) -> Vec<String> {
        let mut out: Vec<String> = self.neutral.clone();
        for a in &self.attributes {
            for v in &a.values {
                out.extend(v.lexicon.iter().cloned());
            }
        }
        for c in &self.canaries {
            out.extend(c.text.split_whitespace().map(str::to_string));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return Err(Error::config("length_range", format!("invalid range ({lo}, {hi})")));
        }
        if !(0.6..=1.0).contains(&self.signature_fraction) {
            return Err(Error::config(
                "signature_fraction",
                format!("{} is outside [0.6, 1]", self.signature_fraction),
            ));
        }
        if self.neutral.is_empty() {
            return Err(Error::config("neutral", "neutral lexicon is empty"));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for a in &self.attributes {
            for v in &a.values {
                if v.lexicon.is_empty() {
                    return Err(Error::config(
                        "lexicon",
                        format!("{}={} has an empty lexicon", a.name, v.value),
                    ));
                }
                for w in &v.lexicon {
                    if !seen.insert(w) {
                        return Err(Error::config(
                            "lexicon",
                            format!("word '{w}' appears in more than one signature lexicon"),
                        ));
                    }
                }
            }
        }
        let lexicon_words: HashSet<&str> = seen
            .iter()
            .copied()
            .chain(self.neutral.iter().map(String::as_str))
            .collect();
        let n_private = self.records_per_class * self.schema()?.assignments().len();
        for c in &self.canaries {
            let toks: Vec<&str> = c.text.split_whitespace().collect();
            if toks.is_empty() {
                return Err(Error::config("canaries", "empty canary"));
            }
            if let Some(t) = toks.iter().find(|t| lexicon_words.contains(**t)) {
                return Err(Error::config(
                    "canaries",
                    format!("canary token '{t}' occurs in a lexicon"),
                ));
            }
            if c.count > n_private {
                return Err(Error::config(
                    "canaries",
                    format!("insertion count {} exceeds the {n_private} private records", c.count),
                ));
            }
        }
        Ok(())
    }
}

/// Generate `(private, public)` corpora from a toy spec.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<(Corpus, Corpus)> {
    spec.validate()?;
    let schema = spec.schema()?;
    let mut rng = seed::stream(spec.seed, "toy-corpus", 0);
    let (lo, hi) = spec.length_range;

    let mut private = Vec::new();
    for a in schema.assignments() {
        let lexicons: Vec<&[String]> = spec
            .attributes
            .iter()
            .map(|attr| {
                let v = attr.values.iter().find(|v| v.value == a[&attr.name]).unwrap();
                v.lexicon.as_slice()
            })
            .collect();
        for _ in 0..spec.records_per_class {
            let len = rng.random_range(lo..=hi);
            let n_sig = ((spec.signature_fraction * len as f64).ceil() as usize).min(len);
            let mut toks: Vec<&str> = Vec::with_capacity(len);
            for _ in 0..n_sig {
                let lex = lexicons[rng.random_range(0..lexicons.len())];
                toks.push(&lex[rng.random_range(0..lex.len())]);
            }
            for _ in n_sig..len {
                toks.push(&spec.neutral[rng.random_range(0..spec.neutral.len())]);
            }
            toks.shuffle(&mut rng);
            private.push(LabeledRecord::new(toks.join(" "), a.clone()));
        }
    }
    private.shuffle(&mut rng);

    for c in &spec.canaries {
        for i in index::sample(&mut rng, private.len(), c.count) {
            let rec = &mut private[i];
            let mut toks: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
            let at = match spec.canary_placement {
                CanaryPlacement::Random => rng.random_range(0..=toks.len()),
                CanaryPlacement::Start => 0,
            };
            toks.insert(at, c.text.split_whitespace().collect::<Vec<_>>().join(" "));
            rec.text = toks.join(" ");
        }
    }

    let mut public = Vec::with_capacity(spec.public_records);
    for _ in 0..spec.public_records {
        let len = rng.random_range(lo..=hi);
        let toks: Vec<&str> = (0..len)
            .map(|_| spec.neutral[rng.random_range(0..spec.neutral.len())].as_str())
            .collect();
        public.push(LabeledRecord::new(toks.join(" "), Assignment::new()));
    }

    Ok((
        Corpus::new(private, schema.clone(), CorpusRole::Train)?,
        Corpus::new(public, schema, CorpusRole::Public)?,
    ))
}
