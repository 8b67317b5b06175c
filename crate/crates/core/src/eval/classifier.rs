//! Tf-idf features and one-vs-rest linear SVMs (squared hinge, L2).
//!
//! The non-private classifier is fit to convergence with L-BFGS. The DP
//! baseline trains the same model with clipped, noised DP-Adam steps under
//! the Rényi accountant, on a feature map fixed from public data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use crate::accountant::PrivacyTarget;
use crate::accountant::{self, AccountantConfig, PrivacySpec};
use crate::corpus::Corpus;
use crate::dp_optim::{DpOptimConfig, DpTrainer};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

pub type SparseVec = Vec<(usize, f64)>;

/// Sublinear tf × smoothed idf, L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfVectorizer {
    index: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

fn idf_value(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

impl TfidfVectorizer {
    /// Vocabulary and document frequencies both from `texts`.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let docs: Vec<Vec<String>> = texts.into_iter().map(Vocabulary::normalize).collect();
        let mut terms: Vec<String> = docs.iter().flatten().cloned().collect();
        terms.sort();
        terms.dedup();
        Self::with_terms(terms, &docs)
    }

    /// A fixed term list, with document frequencies from `idf_texts`. Terms
    /// never seen there get the maximal idf.
    pub fn from_terms<'a>(
        terms: impl IntoIterator<Item = String>,
        idf_texts: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut terms: Vec<String> = terms.into_iter().collect();
        terms.sort();
        terms.dedup();
        let docs: Vec<Vec<String>> = idf_texts.into_iter().map(Vocabulary::normalize).collect();
        Self::with_terms(terms, &docs)
    }

    fn with_terms(terms: Vec<String>, docs: &[Vec<String>]) -> Self {
        let index: BTreeMap<String, usize> = terms.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        let mut df = vec![0usize; terms.len()];
        for d in docs {
            let mut seen: Vec<usize> = d.iter().filter_map(|t| index.get(t).copied()).collect();
            seen.sort_unstable();
            seen.dedup();
            for i in seen {
                df[i] += 1;
            }
        }
        let idf = df.iter().map(|&d| idf_value(docs.len(), d)).collect();
        TfidfVectorizer { index, idf }
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    pub fn transform(&self, text: &str) -> SparseVec {
        let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
        for t in Vocabulary::normalize(text) {
            if let Some(&i) = self.index.get(&t) {
                *tf.entry(i).or_insert(0.0) += 1.0;
            }
        }
        let mut v: SparseVec = tf.into_iter().map(|(i, c)| (i, (1.0 + c.ln()) * self.idf[i])).collect();
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|(_, x)| *x /= norm);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// L2 regularization strength.
    #[serde(default = "default_reg")]
    pub reg: f64,
    /// Stop when the gradient's max-norm falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_reg() -> f64 {
    1e-3
}
fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    2000
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            reg: default_reg(),
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

/// One-vs-rest linear classifier for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub attribute: String,
    pub classes: Vec<String>,
    vectorizer: TfidfVectorizer,
    /// Per class: `dim` weights followed by the bias.
    weights: Vec<Vec<f64>>,
}

impl LinearClassifier {
    fn scores(&self, x: &SparseVec) -> Vec<f64> {
        self.weights.iter().map(|w| score(w, x)).collect()
    }

    pub fn predict(&self, text: &str) -> &str {
        let s = self.scores(&self.vectorizer.transform(text));
        let best = s.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
        &self.classes[best.0]
    }

    /// Accuracy on records labeled for this classifier's attribute.
    pub fn accuracy(&self, corpus: &Corpus) -> Result<f64> {
        let labeled: Vec<(&str, &str)> = corpus
            .records()
            .iter()
            .filter_map(|r| r.attrs.get(&self.attribute).map(|l| (r.text.as_str(), l.as_str())))
            .collect();
        if labeled.is_empty() {
            return Err(Error::Evaluation(format!(
                "no records labeled with '{}'",
                self.attribute
            )));
        }
        let hits = crate::parallel::map_slice(&labeled, |(t, l)| self.predict(t) == *l);
        Ok(hits.iter().filter(|&&h| h).count() as f64 / labeled.len() as f64)
    }

    pub fn vectorizer(&self) -> &TfidfVectorizer {
        &self.vectorizer
    }
}

fn score(w: &[f64], x: &SparseVec) -> f64 {
    let d = w.len() - 1;
    x.iter().map(|&(i, v)| w[i] * v).sum::<f64>() + w[d]
}

struct Dataset {
    xs: Vec<SparseVec>,
    labels: Vec<usize>,
    classes: Vec<String>,
}

fn dataset(train: &Corpus, attribute: &str, vectorizer: &TfidfVectorizer) -> Result<Dataset> {
    let attr = train
        .schema()
        .attribute(attribute)
        .ok_or_else(|| Error::Classifier(format!("unknown attribute '{attribute}'")))?;
    let labeled: Vec<(&str, &str)> = train
        .records()
        .iter()
        .filter_map(|r| r.attrs.get(attribute).map(|l| (r.text.as_str(), l.as_str())))
        .collect();
    let classes: Vec<String> = attr
        .values
        .iter()
        .filter(|v| labeled.iter().any(|(_, l)| l == v))
        .cloned()
        .collect();
    if classes.len() < 2 {
        return Err(Error::Classifier(format!(
            "attribute '{attribute}' has {} class(es) in the training data; need at least 2",
            classes.len()
        )));
    }
    let xs = labeled.iter().map(|(t, _)| vectorizer.transform(t)).collect();
    let labels = labeled
        .iter()
        .map(|(_, l)| classes.iter().position(|c| c == l).unwrap())
        .collect();
    Ok(Dataset { xs, labels, classes })
}

/// Mean squared-hinge loss plus `reg/2 ‖w‖²` for one binary problem, and
/// its gradient.
fn svm_objective(w: &[f64], xs: &[SparseVec], ys: &[f64], reg: f64, grad: &mut [f64]) -> f64 {
    let n = xs.len() as f64;
    let d = w.len() - 1;
    grad.iter_mut().zip(w).for_each(|(g, wi)| *g = reg * wi);
    let mut loss = 0.5 * reg * w.iter().map(|x| x * x).sum::<f64>();
    for (x, &y) in xs.iter().zip(ys) {
        let margin = 1.0 - y * score(w, x);
        if margin > 0.0 {
            loss += margin * margin / n;
            let c = -2.0 * y * margin / n;
            for &(i, v) in x {
                grad[i] += c * v;
            }
            grad[d] += c;
        }
    }
    loss
}

/// Limited-memory BFGS with Armijo backtracking.
fn lbfgs(x0: Vec<f64>, tol: f64, max_iter: usize, f: impl Fn(&[f64], &mut [f64]) -> f64) -> Vec<f64> {
    const MEMORY: usize = 10;
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < tol {
            break;
        }
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        let dir = if slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            slope = -dot(&g, &g);
            g.iter().map(|v| -v).collect()
        } else {
            dir
        };
        let mut step = 1.0;
        let mut g_new = vec![0.0; n];
        let (x_new, f_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let fc = f(&cand, &mut g_new);
            if fc <= fx + 1e-4 * step * slope || step < 1e-20 {
                break (cand, fc);
            }
            step *= 0.5;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        x = x_new;
        g = g_new;
        let converged = (fx - f_new).abs() <= f64::EPSILON * fx.abs().max(1.0) && step < 1e-20;
        fx = f_new;
        if converged {
            break;
        }
        if sy > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
    }
    x
}

/// Fit tf-idf on `train` and a one-vs-rest linear SVM for `attribute`.
pub fn train_tfidf_classifier(train: &Corpus, attribute: &str) -> Result<LinearClassifier> {
    train_tfidf_classifier_with(train, attribute, &ClassifierConfig::default())
}

pub fn train_tfidf_classifier_with(
    train: &Corpus,
    attribute: &str,
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier> {
    let vectorizer = TfidfVectorizer::fit(train.records().iter().map(|r| r.text.as_str()));
    let data = dataset(train, attribute, &vectorizer)?;
    let dim = vectorizer.dim() + 1;
    let weights = crate::parallel::map_range(data.classes.len(), |k| {
        let ys: Vec<f64> = data.labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
        lbfgs(vec![0.0; dim], cfg.tol, cfg.max_iter, |w, g| {
            svm_objective(w, &data.xs, &ys, cfg.reg, g)
        })
    });
    Ok(LinearClassifier {
        attribute: attribute.to_string(),
        classes: data.classes,
        vectorizer,
        weights,
    })
}

/// Accuracy on the same real test corpus of classifiers trained on real and
/// on synthetic data.
pub fn utility_gap(
    real_train: &Corpus,
    synthetic_train: &Corpus,
    test: &Corpus,
    attribute: &str,
) -> Result<(f64, f64)> {
    if real_train.schema() != synthetic_train.schema() || real_train.schema() != test.schema() {
        return Err(Error::Evaluation("corpora do not share a schema".into()));
    }
    let real = train_tfidf_classifier(real_train, attribute)?;
    let synth = train_tfidf_classifier(synthetic_train, attribute)?;
    Ok((real.accuracy(test)?, synth.accuracy(test)?))
}

/// Fraction of synthetic records whose prompted label agrees with the
/// reference classifier.
pub fn label_fidelity(synthetic: &Corpus, reference: &LinearClassifier) -> Result<f64> {
    reference.accuracy(synthetic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpClassifierConfig {
    #[serde(default = "default_dp_epochs")]
    pub epochs: usize,
    /// Expected batch as a fraction of the training set.
    #[serde(default = "default_dp_rate")]
    pub sampling_rate: f64,
    #[serde(default = "default_dp_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_dp_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_reg")]
    pub reg: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub accountant: AccountantConfig,
}

fn default_dp_epochs() -> usize {
    20
}
fn default_dp_rate() -> f64 {
    0.05
}
fn default_dp_lr() -> f64 {
    0.05
}
fn default_dp_clip() -> f64 {
    1.0
}

impl Default for DpClassifierConfig {
    fn default() -> Self {
        DpClassifierConfig {
            epochs: default_dp_epochs(),
            sampling_rate: default_dp_rate(),
            learning_rate: default_dp_lr(),
            clip_norm: default_dp_clip(),
            reg: default_reg(),
            seed: 0,
            accountant: AccountantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpBaseline {
    pub accuracy: f64,
    pub noise_multiplier: f64,
    pub epsilon_spent: f64,
    pub delta: f64,
    pub steps: u64,
}

/// Per-record gradient of `Σ_k sqhinge_k` (without the regularizer).
fn record_grad(weights: &[f64], k: usize, dim: usize, x: &SparseVec, label: usize) -> Vec<f64> {
    let mut g = vec![0.0; weights.len()];
    for c in 0..k {
        let w = &weights[c * dim..(c + 1) * dim];
        let y = if c == label { 1.0 } else { -1.0 };
        let margin = 1.0 - y * score(w, x);
        if margin > 0.0 {
            let coef = -2.0 * y * margin;
            for &(i, v) in x {
                g[c * dim + i] += coef * v;
            }
            g[c * dim + dim - 1] += coef;
        }
    }
    g
}

/// Total loss (mean squared hinge + regularizer) of the DP model, for
/// gradient checks.
pub fn dp_objective(weights: &[f64], k: usize, xs: &[SparseVec], labels: &[usize], reg: f64) -> f64 {
    let dim = weights.len() / k;
    let n = xs.len() as f64;
    let mut loss = 0.5 * reg * weights.iter().map(|w| w * w).sum::<f64>();
    for (x, &l) in xs.iter().zip(labels) {
        for c in 0..k {
            let y = if c == l { 1.0 } else { -1.0 };
            let m = (1.0 - y * score(&weights[c * dim..(c + 1) * dim], x)).max(0.0);
            loss += m * m / n;
        }
    }
    loss
}

/// Full-data gradient of [`dp_objective`].
pub fn dp_objective_grad(weights: &[f64], k: usize, xs: &[SparseVec], labels: &[usize], reg: f64) -> Vec<f64> {
    let dim = weights.len() / k;
    let n = xs.len() as f64;
    let mut g: Vec<f64> = weights.iter().map(|w| reg * w).collect();
    for (x, &l) in xs.iter().zip(labels) {
        for (gi, ri) in g.iter_mut().zip(record_grad(weights, k, dim, x, l)) {
            *gi += ri / n;
        }
    }
    g
}

/// Train the linear classifier on real data with DP-Adam and report its
/// test accuracy. `features` must be fixed from public information.
pub fn dp_classifier_baseline(
    train: &Corpus,
    test: &Corpus,
    attribute: &str,
    target: PrivacyTarget,
    features: &TfidfVectorizer,
    cfg: &DpClassifierConfig,
) -> Result<DpBaseline> {
    let data = dataset(train, attribute, features)?;
    let n = data.xs.len();
    let k = data.classes.len();
    let dim = features.dim() + 1;
    let batch = ((cfg.sampling_rate * n as f64).round() as usize).clamp(1, n);
    let q = batch as f64 / n as f64;
    let steps = ((cfg.epochs as f64) / q).round() as u64;
    let sigma = if target.is_private() {
        accountant::calibrate_sigma(
            &PrivacySpec {
                target_epsilon: target.epsilon,
                target_delta: target.delta,
                dataset_size: n,
                sampling_rate: q,
                steps,
            },
            &cfg.accountant,
        )?
    } else {
        0.0
    };
    let mut optim = DpOptimConfig::new(batch, cfg.learning_rate);
    optim.clip_norm = cfg.clip_norm;
    optim.noise_multiplier = sigma;
    optim.seed = cfg.seed;
    let mut trainer = DpTrainer::new(optim, n, k * dim)?;
    let mut weights = vec![0.0; k * dim];
    for _ in 0..steps {
        let (mut g, _) = {
            let w = &weights;
            trainer.noisy_gradient(|i| Ok(record_grad(w, k, dim, &data.xs[i], data.labels[i])))?
        };
        for (gi, wi) in g.iter_mut().zip(&weights) {
            *gi += cfg.reg * wi;
        }
        trainer.apply(&mut weights, &g)?;
    }
    let mut ledger = accountant::PrivacyLedger::new(cfg.accountant.clone());
    if sigma > 0.0 {
        ledger.record(sigma, q, steps)?;
    }
    let clf = LinearClassifier {
        attribute: attribute.to_string(),
        classes: data.classes,
        vectorizer: features.clone(),
        weights: weights.chunks(dim).map(<[f64]>::to_vec).collect(),
    };
    Ok(DpBaseline {
        accuracy: clf.accuracy(test)?,
        noise_multiplier: sigma,
        epsilon_spent: if sigma > 0.0 {
            ledger.epsilon(target.delta)
        } else if steps == 0 {
            0.0
        } else {
            f64::INFINITY
        },
        delta: target.delta,
        steps,
    })
}

/// Expose the dataset construction for tests of the DP objective.
pub fn featurize(
    train: &Corpus,
    attribute: &str,
    features: &TfidfVectorizer,
) -> Result<(Vec<SparseVec>, Vec<usize>, Vec<String>)> {
    let d = dataset(train, attribute, features)?;
    Ok((d.xs, d.labels, d.classes))
}
