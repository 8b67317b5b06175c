//! Command-line front end: one JSON config, flag overrides, and the
//! gen-corpus → train → generate → evaluate pipeline.
//!
//! Layout of the output directory:
//!
//! ```text
//! corpus/{public,private-train,private-test}.jsonl, corpus/manifest.json
//! model/checkpoint.bin, model/ledger.json
//! synthetic/synthetic.jsonl, synthetic/metadata.json
//! report/report.json, report/report.txt
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::accountant::PrivacyTarget;
use crate::checkpoint;
use crate::corpus::{self, Corpus, CorpusRole, ToyCorpusSpec};
use crate::error::Error;
use crate::eval::{self, AuditInputs, DpClassifierConfig, TfidfVectorizer};
use crate::prompt::{AttributeSchema, PromptTemplate};
use crate::seed;
use crate::synthesis::{self, GenerationPlan, SynthesisMetadata, TrainPlan, TrainSummary};
use crate::tokenizer::Vocabulary;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Where the corpora come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Toy(ToyCorpusSpec),
    Jsonl {
        public: PathBuf,
        private: PathBuf,
        schema: AttributeSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    /// Also train the linear classifier on real data under DP.
    #[serde(default = "default_true")]
    pub dp_baseline: bool,
    #[serde(default)]
    pub dp_classifier: DpClassifierConfig,
    /// Canaries to search for besides those planted by a toy corpus.
    #[serde(default)]
    pub canaries: Vec<String>,
}

fn default_true() -> bool {
    true
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            dp_baseline: true,
            dp_classifier: DpClassifierConfig::default(),
            canaries: Vec::new(),
        }
    }
}

/// Synthetic sample count; defaults to the private training set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    #[serde(default)]
    pub total: Option<usize>,
    #[serde(flatten)]
    pub plan: GenerationPlan,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            total: None,
            plan: GenerationPlan::new(0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: CorpusSource,
    pub template: String,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Every other seed is derived from this one.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_train_fraction() -> f64 {
    5.0 / 6.0
}
fn default_out() -> PathBuf {
    PathBuf::from("dptwin-out")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut train = TrainPlan::default();
        train.epsilon = Some(8.0);
        train.loss.wrong_cap_per_token = Some(crate::model::DEFAULT_WRONG_CAP);
        PipelineConfig {
            corpus: CorpusSource::Toy(ToyCorpusSpec::sentiment(3000, 0)),
            template: "a {sentiment} review :".into(),
            train_fraction: default_train_fraction(),
            train,
            generation: GenerationConfig::default(),
            evaluation: EvaluationConfig::default(),
            seed: 0,
            out: default_out(),
        }
    }
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            error: e.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. }
            | Error::Schema(_)
            | Error::Template(_)
            | Error::Assignment(_)
            | Error::Infeasible(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        CliError { code, error: e.into() }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            error,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn parse_epsilon(s: &str) -> std::result::Result<f64, String> {
    match s.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "none" => Ok(f64::INFINITY),
        _ => {
            let v: f64 = s.parse().map_err(|_| format!("not a number or 'inf': {s}"))?;
            if v > 0.0 {
                Ok(v)
            } else {
                Err("epsilon must be positive".into())
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON pipeline config; built-in toy defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Target ε for fine-tuning; `inf` disables privacy.
    #[arg(long, value_parser = parse_epsilon)]
    pub epsilon: Option<f64>,
    /// Weight of the wrong-prompt penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Share of the private corpus used for training.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "dptwin", version, about = "Differentially private synthetic twin corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write public, private-train and private-test corpora.
    GenCorpus(Common),
    /// Pretrain and fine-tune; write the checkpoint and privacy ledger.
    Train(Common),
    /// Sample the synthetic corpus from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Audit a synthetic corpus against the real splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Run every stage, skipping those whose outputs are current.
    Pipeline(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus(c) | Command::Train(c) | Command::Pipeline(c) => c,
            Command::Generate { common, .. } | Command::Evaluate { common, .. } => common,
        }
    }
}

/// A validated config plus its identity.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: PipelineConfig,
    pub hash: String,
    pub schema: AttributeSchema,
    pub template: PromptTemplate,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(Error::io(path, e)))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(anyhow::anyhow!("{}: invalid config: {e}", path.display())))
    }

    fn apply(&mut self, c: &Common) {
        if let Some(s) = c.seed {
            self.seed = s;
        }
        if let Some(e) = c.epsilon {
            self.train.epsilon = e.is_finite().then_some(e);
        }
        if let Some(l) = c.lambda {
            self.train.loss.lambda = l;
        }
        if let Some(o) = &c.out {
            self.out = o.clone();
        }
        if let Some(f) = c.train_fraction {
            self.train_fraction = f;
        }
    }

    /// SHA-256 of the config's canonical JSON, excluding the output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Derive nested seeds from the master seed and validate.
    pub fn resolve(mut self) -> CliResult<Resolved> {
        let master = self.seed;
        if let CorpusSource::Toy(spec) = &mut self.corpus {
            spec.seed = seed::derive(master, "toy-corpus", 0);
        }
        self.train.seed = seed::derive(master, "train", 0);
        self.generation.plan.seed = seed::derive(master, "generate", 0);
        self.evaluation.dp_classifier.seed = seed::derive(master, "dp-classifier", 0);

        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction", "must lie strictly between 0 and 1").into());
        }
        let schema = match &self.corpus {
            CorpusSource::Toy(spec) => {
                spec.validate()?;
                let mut plan_words = spec.all_words();
                plan_words.retain(|w| !self.train.reserved_words.contains(w));
                self.train.reserved_words.extend(plan_words);
                spec.schema()?
            }
            CorpusSource::Jsonl {
                public,
                private,
                schema,
            } => {
                for (field, p) in [("corpus.jsonl.public", public), ("corpus.jsonl.private", private)] {
                    if !p.is_file() {
                        return Err(Error::config(field, format!("{} does not exist", p.display())).into());
                    }
                }
                schema.clone()
            }
        };
        let template = PromptTemplate::for_schema(&self.template, &schema)?;
        self.train.validate()?;
        self.generation.plan.validate(&schema)?;
        let dp = &self.evaluation.dp_classifier;
        if !(dp.sampling_rate > 0.0 && dp.sampling_rate <= 1.0) {
            return Err(Error::config("evaluation.dp_classifier.sampling_rate", "must lie in (0, 1]").into());
        }
        let hash = self.hash();
        Ok(Resolved {
            config: self,
            hash,
            schema,
            template,
        })
    }
}

impl Resolved {
    fn path(&self, rel: &str) -> PathBuf {
        self.config.out.join(rel)
    }

    fn provenance(&self) -> Value {
        json!({ "seed": self.config.seed, "config_hash": self.hash })
    }

    fn canaries(&self) -> Vec<String> {
        let mut out = self.config.evaluation.canaries.clone();
        if let CorpusSource::Toy(spec) = &self.config.corpus {
            out.extend(spec.canaries.iter().map(|c| c.text.clone()));
        }
        out
    }
}

fn mkdirs(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    mkdirs(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(anyhow::Error::from)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()).into())
}

fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

const PUBLIC: &str = "corpus/public.jsonl";
const TRAIN: &str = "corpus/private-train.jsonl";
const TEST: &str = "corpus/private-test.jsonl";
const CORPUS_MANIFEST: &str = "corpus/manifest.json";
const CHECKPOINT: &str = "model/checkpoint.bin";
const LEDGER: &str = "model/ledger.json";
const SYNTHETIC: &str = "synthetic/synthetic.jsonl";
const METADATA: &str = "synthetic/metadata.json";
const REPORT: &str = "report/report.json";
const REPORT_TXT: &str = "report/report.txt";
const MANIFEST: &str = "manifest.json";

/// Stage record kept in the top-level manifest.
fn stage_entry(r: &Resolved, files: &[&str], extra: Value) -> CliResult<Value> {
    let mut hashes = BTreeMap::new();
    for f in files {
        hashes.insert(f.to_string(), file_sha256(&r.path(f))?);
    }
    Ok(json!({ "config_hash": r.hash, "seed": r.config.seed, "files": hashes, "info": extra }))
}

fn update_manifest(r: &Resolved, stage: &str, entry: Value) -> CliResult<()> {
    let path = r.path(MANIFEST);
    let mut m: BTreeMap<String, Value> = if path.is_file() {
        read_json(&path)?
    } else {
        BTreeMap::new()
    };
    m.insert("config_hash".into(), json!(r.hash));
    m.insert("seed".into(), json!(r.config.seed));
    let mut stages: BTreeMap<String, Value> = m
        .get("stages")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(anyhow::Error::from)?
        .unwrap_or_default();
    stages.insert(stage.into(), entry);
    m.insert(
        "stages".into(),
        serde_json::to_value(stages).map_err(anyhow::Error::from)?,
    );
    write_json(&path, &m)
}

/// Whether `stage` already completed under this config with intact outputs.
fn stage_current(r: &Resolved, stage: &str) -> bool {
    let Ok(m) = read_json::<Value>(&r.path(MANIFEST)) else {
        return false;
    };
    let Some(entry) = m.get("stages").and_then(|s| s.get(stage)) else {
        return false;
    };
    if entry.get("config_hash") != Some(&json!(r.hash)) {
        return false;
    }
    entry.get("files").and_then(Value::as_object).is_some_and(|files| {
        files
            .iter()
            .all(|(f, h)| file_sha256(&r.path(f)).ok().as_deref() == h.as_str())
    })
}

pub fn cmd_gen_corpus(r: &Resolved) -> CliResult<()> {
    let (private, public) = match &r.config.corpus {
        CorpusSource::Toy(spec) => corpus::generate_toy_corpus(spec)?,
        CorpusSource::Jsonl {
            public,
            private,
            schema,
        } => (
            corpus::load_jsonl(private, schema, CorpusRole::Train)?,
            corpus::load_jsonl(public, schema, CorpusRole::Public)?,
        ),
    };
    private.check_fully_labeled()?;
    let (train, test) = corpus::split(
        &private,
        r.config.train_fraction,
        seed::derive(r.config.seed, "split", 0),
    )?;
    for (rel, c) in [(PUBLIC, &public), (TRAIN, &train), (TEST, &test)] {
        mkdirs(&r.path(rel))?;
        corpus::write_jsonl(c, r.path(rel))?;
    }
    let info = json!({
        "public_records": public.len(),
        "train_records": train.len(),
        "test_records": test.len(),
        "train_fraction": r.config.train_fraction,
    });
    let mut manifest = r.provenance();
    manifest["files"] = json!([PUBLIC, TRAIN, TEST]);
    manifest["counts"] = info.clone();
    write_json(&r.path(CORPUS_MANIFEST), &manifest)?;
    update_manifest(
        r,
        "gen_corpus",
        stage_entry(r, &[PUBLIC, TRAIN, TEST, CORPUS_MANIFEST], info)?,
    )?;
    println!(
        "corpora: {} public, {} train, {} test -> {}",
        public.len(),
        train.len(),
        test.len(),
        r.path("corpus").display()
    );
    Ok(())
}

fn load_split(r: &Resolved, rel: &str, role: CorpusRole, flag: Option<&PathBuf>) -> CliResult<Corpus> {
    let path = flag.cloned().unwrap_or_else(|| r.path(rel));
    if !path.is_file() {
        return Err(Error::config(rel, format!("{} does not exist; run gen-corpus first", path.display())).into());
    }
    Ok(corpus::load_jsonl(&path, &r.schema, role)?)
}

pub fn cmd_train(r: &Resolved) -> CliResult<()> {
    let public = load_split(r, PUBLIC, CorpusRole::Public, None)?;
    let train = load_split(r, TRAIN, CorpusRole::Train, None)?;
    let plan = &r.config.train;
    let (model, ledger) = synthesis::train(plan, &public, &train, &r.template, &r.schema)?;
    let summary = TrainSummary::of(plan, &ledger, train.len());
    // The ledger goes to disk first; nothing derived from the model leaves
    // the process before it.
    write_json(
        &r.path(LEDGER),
        &json!({ "ledger": ledger, "summary": summary, "provenance": r.provenance() }),
    )?;
    mkdirs(&r.path(CHECKPOINT))?;
    checkpoint::save(r.path(CHECKPOINT), &model, &ledger, r.provenance())?;
    match summary.epsilon {
        Some(e) => println!(
            "trained: σ = {:.6}, q = {:.6}, steps = {}, spent ε = {:.6} at δ = {:e}",
            summary.noise_multiplier, summary.sampling_rate, summary.steps, e, summary.delta
        ),
        None => println!("trained without privacy (ε = ∞); ledger empty"),
    }
    update_manifest(
        r,
        "train",
        stage_entry(r, &[LEDGER, CHECKPOINT], serde_json::to_value(&summary).unwrap())?,
    )?;
    Ok(())
}

pub fn cmd_generate(r: &Resolved, checkpoint_path: Option<&PathBuf>) -> CliResult<()> {
    let ck = checkpoint_path.cloned().unwrap_or_else(|| r.path(CHECKPOINT));
    let (model, header) = checkpoint::load(&ck)?;
    let train = load_split(r, TRAIN, CorpusRole::Train, None)?;
    let summary = TrainSummary::of(&r.config.train, &header.ledger, train.len());
    let ledger_path = r.path(LEDGER);
    if !ledger_path.is_file() {
        write_json(
            &ledger_path,
            &json!({ "ledger": header.ledger, "summary": summary, "provenance": r.provenance() }),
        )?;
    }
    let mut plan = r.config.generation.plan.clone();
    plan.total = r.config.generation.total.unwrap_or(train.len());
    // Only the model, the template and the schema reach the generator.
    drop(train);
    let out = synthesis::generate(&model, &plan, &r.template, &r.schema)?;
    let meta = SynthesisMetadata::new(&summary, &r.config.train.loss, &plan, &out, r.config.train.seed);
    let mut meta_json = serde_json::to_value(&meta).map_err(anyhow::Error::from)?;
    meta_json["provenance"] = r.provenance();
    write_json(&r.path(METADATA), &meta_json)?;
    mkdirs(&r.path(SYNTHETIC))?;
    corpus::write_jsonl(&out.corpus, r.path(SYNTHETIC))?;
    println!(
        "generated {} records ({} flagged) -> {}",
        out.corpus.len(),
        out.flagged.len(),
        r.path(SYNTHETIC).display()
    );
    update_manifest(
        r,
        "generate",
        stage_entry(
            r,
            &[SYNTHETIC, METADATA],
            json!({ "records": out.corpus.len(), "epsilon": meta.epsilon }),
        )?,
    )?;
    Ok(())
}

/// Fixed feature map for the DP classifier: public words and reserved words.
fn public_features(r: &Resolved, public: &Corpus) -> CliResult<TfidfVectorizer> {
    let vocab = synthesis::build_vocabulary(&r.config.train, public, &r.template, &r.schema)?;
    let terms = (Vocabulary::FIRST_LEARNED..vocab.len() as u32).filter_map(|i| vocab.token(i).map(str::to_string));
    Ok(TfidfVectorizer::from_terms(
        terms,
        public.records().iter().map(|x| x.text.as_str()),
    ))
}

pub fn cmd_evaluate(
    r: &Resolved,
    synthetic: Option<&PathBuf>,
    train: Option<&PathBuf>,
    test: Option<&PathBuf>,
) -> CliResult<()> {
    let synth = load_split(r, SYNTHETIC, CorpusRole::Synthetic, synthetic)?;
    let train_c = load_split(r, TRAIN, CorpusRole::Train, train)?;
    let test_c = load_split(r, TEST, CorpusRole::Test, test)?;
    if synth.is_empty() {
        return Err(Error::Evaluation("synthetic corpus is empty; nothing to evaluate".into()).into());
    }
    let canaries = r.canaries();
    let ev = &r.config.evaluation;
    let features;
    let target = PrivacyTarget {
        epsilon: r.config.train.epsilon.unwrap_or(f64::INFINITY),
        delta: r.config.train.delta_for(train_c.len()),
    };
    let dp = if ev.dp_baseline {
        let public = load_split(r, PUBLIC, CorpusRole::Public, None)?;
        features = public_features(r, &public)?;
        Some((target, &features, &ev.dp_classifier))
    } else {
        None
    };
    let mut metadata = BTreeMap::new();
    metadata.insert("seed".into(), json!(r.config.seed));
    metadata.insert("config_hash".into(), json!(r.hash));
    metadata.insert("target_epsilon".into(), json!(r.config.train.epsilon));
    metadata.insert("delta".into(), json!(target.delta));
    let meta_path = r.path(METADATA);
    if synthetic.is_none() && meta_path.is_file() {
        let m: Value = read_json(&meta_path)?;
        metadata.insert("spent_epsilon".into(), m["epsilon"].clone());
        metadata.insert("sigma".into(), m["sigma"].clone());
    }
    let report = eval::audit(
        &AuditInputs {
            synthetic: &synth,
            train: &train_c,
            test: &test_c,
            canaries: &canaries,
            dp_baseline: dp,
        },
        metadata,
    )?;
    let mut js = report.to_json();
    js.push('\n');
    write_file(&r.path(REPORT), js.as_bytes())?;
    let table = report.to_table();
    write_file(&r.path(REPORT_TXT), table.as_bytes())?;
    print!("{table}");
    update_manifest(r, "evaluate", stage_entry(r, &[REPORT, REPORT_TXT], json!({}))?)?;
    Ok(())
}

pub fn cmd_pipeline(r: &Resolved) -> CliResult<()> {
    type Stage = fn(&Resolved) -> CliResult<()>;
    let stages: [(&str, Stage); 4] = [
        ("gen_corpus", cmd_gen_corpus),
        ("train", cmd_train),
        ("generate", |r| cmd_generate(r, None)),
        ("evaluate", |r| cmd_evaluate(r, None, None, None)),
    ];
    let mut fresh = false;
    for (name, run) in stages {
        // A rerun stage invalidates everything after it.
        if !fresh && stage_current(r, name) {
            info!("stage {name} is current; skipping");
            continue;
        }
        fresh = true;
        run(r)?;
    }
    let m: Value = read_json(&r.path(MANIFEST))?;
    let eps = &m["stages"]["train"]["info"]["epsilon"];
    println!(
        "pipeline complete: spent ε = {eps}, manifest {}",
        r.path(MANIFEST).display()
    );
    Ok(())
}

/// Parse, resolve and dispatch; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            e.code
        }
    }
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    let common = cmd.common();
    let mut config = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    config.apply(common);
    let r = config.resolve()?;
    match cmd {
        Command::GenCorpus(_) => cmd_gen_corpus(&r),
        Command::Train(_) => cmd_train(&r),
        Command::Generate { checkpoint, .. } => cmd_generate(&r, checkpoint.as_ref()),
        Command::Evaluate {
            synthetic, train, test, ..
        } => cmd_evaluate(&r, synthetic.as_ref(), train.as_ref(), test.as_ref()),
        Command::Pipeline(_) => cmd_pipeline(&r),
    }
}
