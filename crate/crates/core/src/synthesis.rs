//! Training phases (public pretraining, private fine-tuning) and generation
//! of the labeled synthetic corpus.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::accountant::{self, AccountantConfig, PrivacyLedger, PrivacySpec};
use crate::corpus::{Corpus, CorpusRole, LabeledRecord};
use crate::dp_optim::{AdamTrainer, DpOptimConfig, DpTrainer};
use crate::error::{Error, Result};
use crate::model::{Example, LanguageModel, LossConfig, LossMask, ModelConfig, SamplerConfig, Sequence};
use crate::prompt::{self, Assignment, AttributeSchema, PromptTemplate, WrongPromptMode};
use crate::seed;
use crate::tokenizer::{self, TokenId, Vocabulary};

/// Resampling attempts for a generation shorter than the minimum length.
pub const MAX_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_context")]
    pub context_length: usize,
    #[serde(default = "default_vocab_max")]
    pub max_vocab: usize,
}

fn default_embed() -> usize {
    64
}
fn default_hidden() -> usize {
    128
}
fn default_context() -> usize {
    64
}
fn default_vocab_max() -> usize {
    tokenizer::DEFAULT_MAX_SIZE
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            context_length: default_context(),
            max_vocab: default_vocab_max(),
        }
    }
}

/// Optimizer settings of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    /// Expected (DP) or fixed (non-private) batch size.
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    #[serde(default)]
    pub model: ModelShape,
    /// Words always in the vocabulary besides those of the public corpus.
    #[serde(default)]
    pub reserved_words: Vec<String>,
    #[serde(default = "default_pretrain")]
    pub pretrain: PhaseConfig,
    /// Fine-tuning under DP-Adam, used when `epsilon` is set.
    #[serde(default = "default_dp_finetune")]
    pub dp_finetune: PhaseConfig,
    /// Fine-tuning with plain Adam, used when `epsilon` is unset.
    #[serde(default = "default_plain_finetune")]
    pub plain_finetune: PhaseConfig,
    /// Target ε; `None` trains without privacy.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Target δ; defaults to `1 / (2n)`.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub wrong_prompts: WrongPromptMode,
    #[serde(default)]
    pub accountant: AccountantConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_pretrain() -> PhaseConfig {
    PhaseConfig {
        epochs: 2,
        batch_size: 32,
        learning_rate: 3e-3,
    }
}
fn default_dp_finetune() -> PhaseConfig {
    PhaseConfig {
        epochs: 5,
        batch_size: 250,
        learning_rate: 3e-3,
    }
}
fn default_plain_finetune() -> PhaseConfig {
    PhaseConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 3e-4,
    }
}
fn default_clip() -> f64 {
    1.0
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            model: ModelShape::default(),
            reserved_words: Vec::new(),
            pretrain: default_pretrain(),
            dp_finetune: default_dp_finetune(),
            plain_finetune: default_plain_finetune(),
            epsilon: None,
            delta: None,
            clip_norm: default_clip(),
            loss: LossConfig::default(),
            wrong_prompts: WrongPromptMode::default(),
            accountant: AccountantConfig::default(),
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.epsilon {
            if !(e > 0.0) || e.is_nan() {
                return Err(Error::config("epsilon", "must be positive"));
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config("delta", "must lie in (0, 1)"));
            }
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        for (name, p) in [
            ("pretrain", &self.pretrain),
            ("dp_finetune", &self.dp_finetune),
            ("plain_finetune", &self.plain_finetune),
        ] {
            if p.batch_size == 0 {
                return Err(Error::config(&format!("{name}.batch_size"), "must be at least 1"));
            }
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return Err(Error::config(&format!("{name}.learning_rate"), "must be positive"));
            }
        }
        if self.model.max_vocab <= Vocabulary::FIRST_LEARNED as usize {
            return Err(Error::config("model.max_vocab", "leaves no room for learned tokens"));
        }
        self.loss.validate()?;
        self.accountant.validate()
    }

    /// Whether fine-tuning runs under DP (a finite ε target).
    pub fn is_private(&self) -> bool {
        self.epsilon.is_some_and(f64::is_finite)
    }

    pub fn delta_for(&self, n: usize) -> f64 {
        self.delta.unwrap_or_else(|| accountant::delta_default(n.max(1)))
    }

    /// The fine-tuning phase that will run.
    pub fn finetune(&self) -> &PhaseConfig {
        if self.is_private() {
            &self.dp_finetune
        } else {
            &self.plain_finetune
        }
    }

    /// Expected batch size actually used for DP fine-tuning on `n` records.
    pub fn dp_batch(&self, n: usize) -> usize {
        self.dp_finetune.batch_size.min(n).max(1)
    }

    /// DP steps planned for `n` records: `epochs / q`, rounded.
    pub fn dp_steps(&self, n: usize) -> u64 {
        let q = self.dp_batch(n) as f64 / n.max(1) as f64;
        (self.dp_finetune.epochs as f64 / q).round() as u64
    }
}

/// Private-data summary of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub private: bool,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub delta: f64,
    /// `None` for a non-private run.
    pub epsilon: Option<f64>,
}

impl TrainSummary {
    pub fn of(plan: &TrainPlan, ledger: &PrivacyLedger, n: usize) -> Self {
        let delta = plan.delta_for(n);
        let entry = ledger.entries().last();
        TrainSummary {
            private: plan.is_private(),
            noise_multiplier: entry.map_or(0.0, |e| e.noise_multiplier),
            sampling_rate: entry.map_or(0.0, |e| e.sampling_rate),
            steps: ledger.total_steps(),
            delta,
            epsilon: plan.is_private().then(|| ledger.epsilon(delta)),
        }
    }
}

/// Build the vocabulary from public texts, the schema's prompt words, and
/// the plan's reserved words.
pub fn build_vocabulary(
    plan: &TrainPlan,
    public: &Corpus,
    template: &PromptTemplate,
    schema: &AttributeSchema,
) -> Result<Vocabulary> {
    let mut texts: Vec<String> = public.records().iter().map(|r| r.text.clone()).collect();
    for a in schema.assignments() {
        texts.push(prompt::render(template, schema, &a)?);
    }
    texts.extend(plan.reserved_words.iter().cloned());
    tokenizer::build_from_texts(texts.iter().map(String::as_str), plan.model.max_vocab)
}

fn shuffled(n: usize, master: u64, domain: &str, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(master, domain, epoch));
    idx
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Diverged { step, message: m },
        other => other,
    }
}

/// Plain NLL on BOS + text + EOS over the public corpus.
pub fn pretrain(model: &mut LanguageModel, public: &Corpus, phase: &PhaseConfig, master: u64) -> Result<()> {
    let ctx = model.config().context_length;
    let seqs: Vec<Vec<TokenId>> = public
        .records()
        .iter()
        .map(|r| tokenizer::encode(model.vocab(), &r.text, ctx))
        .collect();
    if seqs.is_empty() || phase.epochs == 0 {
        return Ok(());
    }
    let mut opt = AdamTrainer::new(phase.learning_rate, model.num_params());
    let mut step = 0u64;
    for epoch in 0..phase.epochs as u64 {
        let order = shuffled(seqs.len(), master, "pretrain-order", epoch);
        for batch in order.chunks(phase.batch_size) {
            let m = &*model;
            let g = opt
                .mean_gradient(batch, |i| {
                    let mut g = vec![0.0; m.num_params()];
                    m.accumulate_nll_grad(&seqs[i], LossMask::ALL, 1.0, &mut g)?;
                    Ok(g)
                })
                .map_err(|e| diverged(step, e))?;
            opt.apply(model.params_mut(), &g).map_err(|e| diverged(step, e))?;
            step += 1;
        }
        debug!("pretrain epoch {} done ({} steps)", epoch + 1, step);
    }
    info!("pretrained on {} public records, {} steps", seqs.len(), step);
    Ok(())
}

/// Training streams for one private record.
struct Prepared {
    correct: Sequence,
    wrong: Vec<Sequence>,
}

fn prepare(
    model: &LanguageModel,
    private: &Corpus,
    template: &PromptTemplate,
    schema: &AttributeSchema,
    mode: WrongPromptMode,
    need_wrong: bool,
) -> Result<Vec<Prepared>> {
    let v = model.vocab();
    let ctx = model.config().context_length;
    let seq = |prompt: &str, text: &str| {
        let start = 1 + v.ids(prompt).len();
        Sequence::new(tokenizer::encode_pair(v, prompt, text, ctx), start)
    };
    private
        .records()
        .iter()
        .map(|r| {
            let correct = seq(&prompt::render(template, schema, &r.attrs)?, &r.text);
            let wrong = if need_wrong {
                prompt::wrong_prompts_with(template, schema, &r.attrs, mode)?
                    .iter()
                    .map(|p| seq(p, &r.text))
                    .collect()
            } else {
                Vec::new()
            };
            Ok(Prepared { correct, wrong })
        })
        .collect()
}

fn example(p: &Prepared, cfg: &LossConfig, master: u64, step: u64, i: usize) -> Example {
    let wrong = match cfg.wrong_samples {
        Some(k) if k < p.wrong.len() => {
            let s = seed::derive(master, "wrong-sample", step.wrapping_mul(1 << 32) ^ i as u64);
            prompt::sample_subset(p.wrong.clone(), k, s)
        }
        _ => p.wrong.clone(),
    };
    Example {
        correct: p.correct.clone(),
        wrong,
    }
}

/// Pretrain on `public`, then fine-tune on `private` with the combined
/// loss; DP-Adam with a calibrated σ when the plan sets a finite ε.
pub fn train(
    plan: &TrainPlan,
    public: &Corpus,
    private: &Corpus,
    template: &PromptTemplate,
    schema: &AttributeSchema,
) -> Result<(LanguageModel, PrivacyLedger)> {
    plan.validate()?;
    template.check_schema(schema)?;
    if private.schema() != schema {
        return Err(Error::Schema("private corpus uses a different schema".into()));
    }
    private.check_fully_labeled()?;
    let n = private.len();
    let ft = plan.finetune();

    // Calibrate before any training so an infeasible target costs nothing.
    let mut ledger = PrivacyLedger::new(plan.accountant.clone());
    let dp = if plan.is_private() && ft.epochs > 0 && n > 0 {
        let batch = plan.dp_batch(n);
        let q = batch as f64 / n as f64;
        let steps = plan.dp_steps(n);
        let sigma = accountant::calibrate_sigma(
            &PrivacySpec {
                target_epsilon: plan.epsilon.unwrap(),
                target_delta: plan.delta_for(n),
                dataset_size: n,
                sampling_rate: q,
                steps,
            },
            &plan.accountant,
        )?;
        info!("calibrated σ = {sigma:.4} for q = {q:.4}, T = {steps}");
        Some((batch, q, steps, sigma))
    } else {
        None
    };

    let vocab = build_vocabulary(plan, public, template, schema)?;
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.embed_dim = plan.model.embed_dim;
    cfg.hidden_dim = plan.model.hidden_dim;
    cfg.context_length = plan.model.context_length;
    cfg.init_seed = seed::derive(plan.seed, "init", 0);
    let mut model = LanguageModel::new(cfg, vocab)?;
    pretrain(
        &mut model,
        public,
        &plan.pretrain,
        seed::derive(plan.seed, "pretrain", 0),
    )?;

    if ft.epochs == 0 || n == 0 {
        return Ok((model, ledger));
    }
    let data = prepare(
        &model,
        private,
        template,
        schema,
        plan.wrong_prompts,
        plan.loss.lambda > 0.0,
    )?;
    let loss = &plan.loss;
    let master = seed::derive(plan.seed, "finetune", 0);

    match dp {
        Some((batch, q, steps, sigma)) => {
            let mut optim = DpOptimConfig::new(batch, ft.learning_rate);
            optim.clip_norm = plan.clip_norm;
            optim.noise_multiplier = sigma;
            optim.seed = master;
            let mut trainer = DpTrainer::new(optim, n, model.num_params())?;
            let mut clipped = 0.0;
            for step in 0..steps {
                let (g, stats) = {
                    let m = &model;
                    trainer
                        .noisy_gradient(|i| m.per_sample_grad(&example(&data[i], loss, master, step, i), loss))
                        .map_err(|e| diverged(step, e))?
                };
                clipped += stats.clipped_fraction;
                trainer.apply(model.params_mut(), &g).map_err(|e| diverged(step, e))?;
                if (step + 1) % 100 == 0 {
                    debug!(
                        "dp step {}/{} mean clipped fraction {:.3}",
                        step + 1,
                        steps,
                        clipped / 100.0
                    );
                    clipped = 0.0;
                }
            }
            ledger.record(sigma, q, steps)?;
            info!(
                "fine-tuned with DP-Adam: {} steps, spent ε = {:.4} at δ = {:e}",
                steps,
                ledger.epsilon(plan.delta_for(n)),
                plan.delta_for(n)
            );
        }
        None => {
            let mut opt = AdamTrainer::new(ft.learning_rate, model.num_params());
            let mut step = 0u64;
            for epoch in 0..ft.epochs as u64 {
                let order = shuffled(n, master, "finetune-order", epoch);
                for b in order.chunks(ft.batch_size) {
                    let g = {
                        let m = &model;
                        opt.mean_gradient(b, |i| {
                            m.per_sample_grad(&example(&data[i], loss, master, step, i), loss)
                        })
                        .map_err(|e| diverged(step, e))?
                    };
                    opt.apply(model.params_mut(), &g).map_err(|e| diverged(step, e))?;
                    step += 1;
                }
            }
            info!("fine-tuned without privacy: {step} steps");
        }
    }
    Ok((model, ledger))
}

/// Target share of one attribute assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub attrs: Assignment,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    /// Runtime sample count; configs carry their own (optional) total.
    #[serde(skip)]
    pub total: usize,
    /// Empty means uniform over all assignments of the schema.
    #[serde(default)]
    pub proportions: Vec<ClassShare>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Minimum generated tokens before a record is accepted.
    #[serde(default = "default_min_len")]
    pub min_length: usize,
    /// Generated tokens beyond this are dropped.
    #[serde(default)]
    pub max_length: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_len() -> usize {
    1
}

impl GenerationPlan {
    pub fn new(total: usize, seed: u64) -> Self {
        GenerationPlan {
            total,
            proportions: Vec::new(),
            sampler: SamplerConfig::default(),
            min_length: default_min_len(),
            max_length: None,
            seed,
        }
    }

    /// Resolved shares: explicit ones, or uniform over the schema.
    pub fn shares(&self, schema: &AttributeSchema) -> Result<Vec<ClassShare>> {
        if self.proportions.is_empty() {
            let all = schema.assignments();
            let p = 1.0 / all.len() as f64;
            return Ok(all
                .into_iter()
                .map(|attrs| ClassShare { attrs, proportion: p })
                .collect());
        }
        let mut sum = 0.0;
        for (i, s) in self.proportions.iter().enumerate() {
            schema.check_complete(&s.attrs)?;
            if !(s.proportion >= 0.0 && s.proportion.is_finite()) {
                return Err(Error::config(
                    &format!("generation.proportions[{i}]"),
                    "must be non-negative",
                ));
            }
            if self.proportions[..i].iter().any(|o| o.attrs == s.attrs) {
                return Err(Error::config(
                    &format!("generation.proportions[{i}]"),
                    "duplicate assignment",
                ));
            }
            sum += s.proportion;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("generation.proportions", format!("sum to {sum}, not 1")));
        }
        Ok(self.proportions.clone())
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if !(self.sampler.top_p > 0.0 && self.sampler.top_p <= 1.0) {
            return Err(Error::config("generation.sampler.top_p", "must lie in (0, 1]"));
        }
        if let Some(m) = self.max_length {
            if m < self.min_length {
                return Err(Error::config("generation.max_length", "below min_length"));
            }
        }
        self.shares(schema).map(|_| ())
    }
}

/// Per-class counts summing to `total`: floors, then the largest fractional
/// parts (earlier classes first on ties) get one more each.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub corpus: Corpus,
    /// Records kept despite missing the minimum length.
    pub flagged: Vec<usize>,
    pub counts: Vec<(Assignment, usize)>,
}

/// Prompt `model` with each assignment's instruction and label the
/// continuations with the prompted attributes. Only the model and public
/// configuration are read.
pub fn generate(
    model: &LanguageModel,
    plan: &GenerationPlan,
    template: &PromptTemplate,
    schema: &AttributeSchema,
) -> Result<Generated> {
    plan.validate(schema)?;
    template.check_schema(schema)?;
    let shares = plan.shares(schema)?;
    let counts = largest_remainder(&shares.iter().map(|s| s.proportion).collect::<Vec<_>>(), plan.total);
    let mut jobs: Vec<(usize, Vec<TokenId>)> = Vec::with_capacity(plan.total);
    for (c, (share, &k)) in shares.iter().zip(&counts).enumerate() {
        let instruction = tokenizer::encode_prompt(model.vocab(), &prompt::render(template, schema, &share.attrs)?);
        jobs.extend(std::iter::repeat_n((c, instruction), k));
    }
    let outputs = crate::parallel::map_range(jobs.len(), |i| -> Result<(String, bool)> {
        let (_, instruction) = &jobs[i];
        let mut last = Vec::new();
        for attempt in 0..MAX_ATTEMPTS as u64 {
            let s = seed::derive(plan.seed, "generate", ((i as u64) << 8) | attempt);
            let mut ids = model.sample(instruction, &plan.sampler, s)?;
            if let Some(m) = plan.max_length {
                ids.truncate(m);
            }
            if ids.len() >= plan.min_length {
                return Ok((tokenizer::decode(model.vocab(), &ids)?, false));
            }
            last = ids;
        }
        Ok((tokenizer::decode(model.vocab(), &last)?, true))
    });
    let mut records = Vec::with_capacity(jobs.len());
    let mut flagged = Vec::new();
    for (i, (out, (c, _))) in outputs.into_iter().zip(&jobs).enumerate() {
        let (text, short) = out?;
        if short {
            flagged.push(i);
        }
        records.push(LabeledRecord::new(text, shares[*c].attrs.clone()));
    }
    if !flagged.is_empty() {
        warn!("{} generated records stayed below the minimum length", flagged.len());
    }
    Ok(Generated {
        corpus: Corpus::new(records, schema.clone(), CorpusRole::Synthetic)?,
        flagged,
        counts: shares.into_iter().map(|s| s.attrs).zip(counts).collect(),
    })
}

/// Compact `name=value,...` key for an assignment.
pub fn assignment_key(a: &Assignment) -> String {
    a.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

/// Sidecar written next to a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMetadata {
    /// Spent ε; `None` when fine-tuning was not private.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    pub lambda: f64,
    pub nucleus_p: f64,
    pub seeds: BTreeMap<String, u64>,
    pub counts_per_class: BTreeMap<String, usize>,
    pub flagged: Vec<usize>,
}

impl SynthesisMetadata {
    pub fn new(
        summary: &TrainSummary,
        loss: &LossConfig,
        plan: &GenerationPlan,
        out: &Generated,
        train_seed: u64,
    ) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("train".to_string(), train_seed);
        seeds.insert("generation".to_string(), plan.seed);
        SynthesisMetadata {
            epsilon: summary.epsilon,
            delta: summary.delta,
            sigma: summary.noise_multiplier,
            q: summary.sampling_rate,
            steps: summary.steps,
            lambda: loss.lambda,
            nucleus_p: plan.sampler.top_p,
            seeds,
            counts_per_class: out.counts.iter().map(|(a, c)| (assignment_key(a), *c)).collect(),
            flagged: out.flagged.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_corpus, ToyCorpusSpec};

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 100), vec![50, 50]);
        assert_eq!(largest_remainder(&[0.33, 0.33, 0.34], 10), vec![3, 3, 4]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 0), vec![0, 0]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
    }

    fn tiny_plan() -> TrainPlan {
        let mut p = TrainPlan::default();
        p.model = ModelShape {
            embed_dim: 8,
            hidden_dim: 8,
            context_length: 24,
            max_vocab: 256,
        };
        p.pretrain.epochs = 1;
        p.dp_finetune = PhaseConfig {
            epochs: 1,
            batch_size: 5,
            learning_rate: 1e-2,
        };
        p.plain_finetune.epochs = 1;
        p
    }

    fn toy() -> (Corpus, Corpus, PromptTemplate, AttributeSchema) {
        let mut spec = ToyCorpusSpec::sentiment(10, 1);
        spec.public_records = 20;
        let (private, public) = generate_toy_corpus(&spec).unwrap();
        let schema = spec.schema().unwrap();
        let template = PromptTemplate::for_schema("a {sentiment} review :", &schema).unwrap();
        (public, private, template, schema)
    }

    #[test]
    fn zero_finetune_epochs_leave_ledger_empty() {
        let (public, private, template, schema) = toy();
        let mut plan = tiny_plan();
        plan.epsilon = Some(3.0);
        plan.dp_finetune.epochs = 0;
        let (_, ledger) = train(&plan, &public, &private, &template, &schema).unwrap();
        assert!(ledger.is_empty());
        assert_eq!(ledger.epsilon(1e-5), 0.0);
    }

    #[test]
    fn private_training_stays_within_target() {
        let (public, private, template, schema) = toy();
        let mut plan = tiny_plan();
        plan.epsilon = Some(3.0);
        let (_, ledger) = train(&plan, &public, &private, &template, &schema).unwrap();
        let s = TrainSummary::of(&plan, &ledger, private.len());
        assert_eq!(s.steps, plan.dp_steps(private.len()));
        assert!(s.epsilon.unwrap() <= 3.0);
        assert!(s.noise_multiplier > 0.0);
    }

    #[test]
    fn infeasible_target_fails_before_training() {
        let (public, private, template, schema) = toy();
        let mut plan = tiny_plan();
        plan.epsilon = Some(1e-6);
        plan.delta = Some(1e-12);
        plan.dp_finetune.epochs = 1000;
        assert!(matches!(
            train(&plan, &public, &private, &template, &schema),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn generation_counts_and_labels() {
        let (public, private, template, schema) = toy();
        let (model, _) = train(&tiny_plan(), &public, &private, &template, &schema).unwrap();
        let plan = GenerationPlan::new(10, 4);
        let a = generate(&model, &plan, &template, &schema).unwrap();
        let b = generate(&model, &plan, &template, &schema).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.corpus.len(), 10);
        assert!(a.counts.iter().all(|(_, c)| *c == 5));
        assert_eq!(a.corpus.records()[0].attrs, a.counts[0].0);
        let empty = generate(&model, &GenerationPlan::new(0, 4), &template, &schema).unwrap();
        assert!(empty.corpus.is_empty());
    }
}
