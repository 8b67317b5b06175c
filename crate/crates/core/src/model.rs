//! A small autoregressive language model with exact per-sample gradients.
//!
//! Architecture (fixed): token + learned position embedding, one causal
//! single-head self-attention block with a residual connection, a
//! position-wise tanh feed-forward block with a residual connection, and an
//! output projection tied to the token embedding (plus an output bias).
//!
//! All arithmetic is `f64`. Parameters live in one flat vector whose layout
//! is a pure function of [`ModelConfig`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Embedding, one causal attention block, tanh MLP, tied output.
    #[default]
    TiedAttention1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_context")]
    pub context_length: usize,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub init_seed: u64,
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

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            context_length: default_context(),
            architecture: Architecture::TiedAttention1,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 || self.embed_dim < 1 || self.hidden_dim < 1 {
            return Err(Error::config("model", "dimensions must be at least 1"));
        }
        if self.context_length < 2 {
            return Err(Error::config("model.context_length", "must be at least 2"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    tok: usize,
    pos: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let (v, e, h, t) = (c.vocab_size, c.embed_dim, c.hidden_dim, c.context_length);
        let tok = 0;
        let pos = tok + v * e;
        let wq = pos + t * e;
        let wk = wq + e * e;
        let wv = wk + e * e;
        let wo = wv + e * e;
        let w1 = wo + e * e;
        let b1 = w1 + h * e;
        let w2 = b1 + h;
        let b2 = w2 + e * h;
        let out_b = b2 + e;
        let total = out_b + v;
        Layout {
            tok,
            pos,
            wq,
            wk,
            wv,
            wo,
            w1,
            b1,
            w2,
            b2,
            out_b,
            total,
        }
    }
}

/// Which positions contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask {
    /// Index of the first token that is scored as a prediction target.
    /// `1` scores everything after BOS.
    pub first_target: usize,
}

impl LossMask {
    pub const ALL: LossMask = LossMask { first_target: 1 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the wrong-prompt penalty.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Number of wrong prompts sampled per record; `None` uses all.
    #[serde(default)]
    pub wrong_samples: Option<usize>,
    /// Per-token cap on each wrong-prompt NLL, in nats.
    #[serde(default)]
    pub wrong_cap_per_token: Option<f64>,
    /// Score only text tokens (not the instruction).
    #[serde(default)]
    pub text_only: bool,
}

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_WRONG_CAP: f64 = 10.0;

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            wrong_samples: None,
            wrong_cap_per_token: None,
            text_only: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be a finite non-negative number"));
        }
        if let Some(c) = self.wrong_cap_per_token {
            if !(c >= 0.0) {
                return Err(Error::config("loss.wrong_cap_per_token", "must be non-negative"));
            }
        }
        if self.wrong_samples == Some(0) {
            return Err(Error::config("loss.wrong_samples", "must be at least 1"));
        }
        Ok(())
    }
}

/// A token stream plus the index where its text part starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<TokenId>,
    pub text_start: usize,
}

impl Sequence {
    pub fn new(ids: Vec<TokenId>, text_start: usize) -> Self {
        Sequence { ids, text_start }
    }

    fn mask(&self, cfg: &LossConfig) -> LossMask {
        if cfg.text_only {
            LossMask {
                first_target: self.text_start.max(1),
            }
        } else {
            LossMask::ALL
        }
    }
}

/// One training record: its correct stream and its wrong-prompt streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub correct: Sequence,
    pub wrong: Vec<Sequence>,
}

/// Activations of one forward pass.
struct Trace {
    len: usize,
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    f: Vec<f64>,
    /// Softmax outputs of scored positions, `len × vocab` (zero elsewhere).
    probs: Vec<f64>,
    scored: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    vocab: Vocabulary,
    params: Vec<f64>,
}

#[inline]
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = dot(row, x);
    }
}

#[inline]
fn matvec_add_t(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = dx.len();
    for (d, row) in dy.iter().zip(w.chunks_exact(n)) {
        axpy(*d, row, dx);
    }
}

#[inline]
fn outer_add(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let n = x.len();
    for (d, row) in dy.iter().zip(dw.chunks_exact_mut(n)) {
        axpy(*d, x, row);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// In-place softmax; returns log of the normalizer.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
    m + s.ln()
}

impl LanguageModel {
    /// A freshly initialized model.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Dimension {
                expected: vocab.len(),
                got: config.vocab_size,
            });
        }
        let lay = Layout::new(&config);
        let mut rng = seed::stream(config.init_seed, "model-init", 0);
        let mut params = vec![0.0; lay.total];
        let e = config.embed_dim as f64;
        let h = config.hidden_dim as f64;
        let mut fill = |range: std::ops::Range<usize>, std: f64| {
            for p in &mut params[range] {
                let z: f64 = rng.sample(StandardNormal);
                *p = z * std;
            }
        };
        fill(lay.tok..lay.pos, 0.1);
        fill(lay.pos..lay.wq, 0.1);
        fill(lay.wq..lay.w1, 1.0 / e.sqrt());
        fill(lay.w1..lay.b1, 1.0 / e.sqrt());
        fill(lay.w2..lay.b2, 0.5 / h.sqrt());
        Ok(LanguageModel { config, vocab, params })
    }

    /// A model with explicit parameters.
    pub fn from_params(config: ModelConfig, vocab: Vocabulary, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Dimension {
                expected: vocab.len(),
                got: config.vocab_size,
            });
        }
        let total = config.param_count();
        if params.len() != total {
            return Err(Error::Dimension {
                expected: total,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(LanguageModel { config, vocab, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() < 2 {
            return Err(Error::SequenceTooShort(ids.len()));
        }
        if ids.len() > self.config.context_length {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                context: self.config.context_length,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary(format!("token id {bad} out of range")));
        }
        Ok(())
    }

    fn scored_positions(ids: &[TokenId], mask: LossMask) -> Vec<bool> {
        // Position t predicts ids[t + 1].
        (0..ids.len())
            .map(|t| t + 1 < ids.len() && t + 1 >= mask.first_target && ids[t + 1] != PAD)
            .collect()
    }

    fn forward(&self, ids: &[TokenId], scored: Vec<bool>) -> Trace {
        let lay = Layout::new(&self.config);
        let (e, hd, vs) = (self.config.embed_dim, self.config.hidden_dim, self.config.vocab_size);
        let p = &self.params;
        let l = ids.len();
        let scale = 1.0 / (e as f64).sqrt();

        let mut x = vec![0.0; l * e];
        for (t, &id) in ids.iter().enumerate() {
            let tok = &p[lay.tok + id as usize * e..][..e];
            let pos = &p[lay.pos + t * e..][..e];
            for ((xi, a), b) in x[t * e..(t + 1) * e].iter_mut().zip(tok).zip(pos) {
                *xi = a + b;
            }
        }
        let mut q = vec![0.0; l * e];
        let mut k = vec![0.0; l * e];
        let mut v = vec![0.0; l * e];
        for t in 0..l {
            let xt = &x[t * e..(t + 1) * e];
            matvec(&p[lay.wq..lay.wk], xt, &mut q[t * e..(t + 1) * e]);
            matvec(&p[lay.wk..lay.wv], xt, &mut k[t * e..(t + 1) * e]);
            matvec(&p[lay.wv..lay.wo], xt, &mut v[t * e..(t + 1) * e]);
        }
        let mut att = vec![0.0; l * l];
        let mut c = vec![0.0; l * e];
        for t in 0..l {
            let qt = &q[t * e..(t + 1) * e];
            let row = &mut att[t * l..t * l + t + 1];
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * dot(qt, &k[j * e..(j + 1) * e]);
            }
            softmax_in_place(row);
            let ct = &mut c[t * e..(t + 1) * e];
            for j in 0..=t {
                axpy(att[t * l + j], &v[j * e..(j + 1) * e], ct);
            }
        }
        let mut h = x.clone();
        let mut tmp = vec![0.0; e];
        for t in 0..l {
            matvec(&p[lay.wo..lay.w1], &c[t * e..(t + 1) * e], &mut tmp);
            for (hi, ti) in h[t * e..(t + 1) * e].iter_mut().zip(&tmp) {
                *hi += ti;
            }
        }
        let mut g = vec![0.0; l * hd];
        let mut f = h.clone();
        for t in 0..l {
            let gt = &mut g[t * hd..(t + 1) * hd];
            matvec(&p[lay.w1..lay.b1], &h[t * e..(t + 1) * e], gt);
            for (gi, bi) in gt.iter_mut().zip(&p[lay.b1..lay.w2]) {
                *gi = (*gi + bi).tanh();
            }
            matvec(&p[lay.w2..lay.b2], gt, &mut tmp);
            for ((fi, ti), bi) in f[t * e..(t + 1) * e].iter_mut().zip(&tmp).zip(&p[lay.b2..lay.out_b]) {
                *fi += ti + bi;
            }
        }
        let mut probs = vec![0.0; l * vs];
        let emb = &p[lay.tok..lay.pos];
        let out_b = &p[lay.out_b..lay.total];
        for t in (0..l).filter(|&t| scored[t]) {
            let ft = &f[t * e..(t + 1) * e];
            let row = &mut probs[t * vs..(t + 1) * vs];
            matvec(emb, ft, row);
            for (r, b) in row.iter_mut().zip(out_b) {
                *r += b;
            }
            softmax_in_place(row);
        }
        Trace {
            len: l,
            x,
            q,
            k,
            v,
            att,
            c,
            h,
            g,
            f,
            probs,
            scored,
        }
    }

    fn trace_nll(trace: &Trace, ids: &[TokenId], vs: usize) -> f64 {
        (0..trace.len)
            .filter(|&t| trace.scored[t])
            .map(|t| -trace.probs[t * vs + ids[t + 1] as usize].ln())
            .sum()
    }

    /// Accumulate `coef * d NLL / d θ` into `grad`.
    fn backward(&self, ids: &[TokenId], tr: &Trace, coef: f64, grad: &mut [f64]) {
        let lay = Layout::new(&self.config);
        let (e, hd, vs) = (self.config.embed_dim, self.config.hidden_dim, self.config.vocab_size);
        let p = &self.params;
        let l = tr.len;
        let scale = 1.0 / (e as f64).sqrt();

        let mut df = vec![0.0; l * e];
        let mut dlogit = vec![0.0; vs];
        for t in (0..l).filter(|&t| tr.scored[t]) {
            dlogit.copy_from_slice(&tr.probs[t * vs..(t + 1) * vs]);
            dlogit[ids[t + 1] as usize] -= 1.0;
            for d in dlogit.iter_mut() {
                *d *= coef;
            }
            let ft = &tr.f[t * e..(t + 1) * e];
            for (gb, d) in grad[lay.out_b..lay.total].iter_mut().zip(&dlogit) {
                *gb += d;
            }
            outer_add(&mut grad[lay.tok..lay.pos], &dlogit, ft);
            matvec_add_t(&p[lay.tok..lay.pos], &dlogit, &mut df[t * e..(t + 1) * e]);
        }

        // Feed-forward block.
        let mut dh = df.clone();
        let mut du = vec![0.0; hd];
        for t in 0..l {
            let dft = &df[t * e..(t + 1) * e];
            if dft.iter().all(|&d| d == 0.0) {
                continue;
            }
            let gt = &tr.g[t * hd..(t + 1) * hd];
            outer_add(&mut grad[lay.w2..lay.b2], dft, gt);
            for (gb, d) in grad[lay.b2..lay.out_b].iter_mut().zip(dft) {
                *gb += d;
            }
            du.iter_mut().for_each(|d| *d = 0.0);
            matvec_add_t(&p[lay.w2..lay.b2], dft, &mut du);
            for (d, gi) in du.iter_mut().zip(gt) {
                *d *= 1.0 - gi * gi;
            }
            outer_add(&mut grad[lay.w1..lay.b1], &du, &tr.h[t * e..(t + 1) * e]);
            for (gb, d) in grad[lay.b1..lay.w2].iter_mut().zip(&du) {
                *gb += d;
            }
            matvec_add_t(&p[lay.w1..lay.b1], &du, &mut dh[t * e..(t + 1) * e]);
        }

        // Attention block.
        let mut dx = dh.clone();
        let mut dc = vec![0.0; l * e];
        for t in 0..l {
            let dht = &dh[t * e..(t + 1) * e];
            outer_add(&mut grad[lay.wo..lay.w1], dht, &tr.c[t * e..(t + 1) * e]);
            matvec_add_t(&p[lay.wo..lay.w1], dht, &mut dc[t * e..(t + 1) * e]);
        }
        let mut dq = vec![0.0; l * e];
        let mut dk = vec![0.0; l * e];
        let mut dv = vec![0.0; l * e];
        let mut datt = vec![0.0; l];
        for t in 0..l {
            let dct = &dc[t * e..(t + 1) * e];
            let arow = &tr.att[t * l..t * l + t + 1];
            for j in 0..=t {
                datt[j] = dot(dct, &tr.v[j * e..(j + 1) * e]);
                axpy(arow[j], dct, &mut dv[j * e..(j + 1) * e]);
            }
            let mean: f64 = (0..=t).map(|j| arow[j] * datt[j]).sum();
            for j in 0..=t {
                let ds = arow[j] * (datt[j] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                let (kj, qt) = (&tr.k[j * e..(j + 1) * e], &tr.q[t * e..(t + 1) * e]);
                axpy(ds, kj, &mut dq[t * e..(t + 1) * e]);
                axpy(ds, qt, &mut dk[j * e..(j + 1) * e]);
            }
        }
        for t in 0..l {
            let xt = &tr.x[t * e..(t + 1) * e];
            let dxt = &mut dx[t * e..(t + 1) * e];
            for (w0, d) in [(lay.wq, &dq), (lay.wk, &dk), (lay.wv, &dv)] {
                let dt = &d[t * e..(t + 1) * e];
                outer_add(&mut grad[w0..w0 + e * e], dt, xt);
                matvec_add_t(&p[w0..w0 + e * e], dt, dxt);
            }
        }

        // Embeddings.
        for (t, &id) in ids.iter().enumerate() {
            let dxt = &dx[t * e..(t + 1) * e];
            axpy(1.0, dxt, &mut grad[lay.tok + id as usize * e..][..e]);
            axpy(1.0, dxt, &mut grad[lay.pos + t * e..][..e]);
        }
    }

    /// Negative log-likelihood of every token after BOS given its prefix.
    pub fn nll(&self, ids: &[TokenId]) -> Result<f64> {
        self.nll_masked(ids, LossMask::ALL)
    }

    pub fn nll_masked(&self, ids: &[TokenId], mask: LossMask) -> Result<f64> {
        self.check_ids(ids)?;
        let tr = self.forward(ids, Self::scored_positions(ids, mask));
        Ok(Self::trace_nll(&tr, ids, self.config.vocab_size))
    }

    /// Number of scored prediction positions of `ids` under `mask`.
    pub fn scored_count(ids: &[TokenId], mask: LossMask) -> usize {
        Self::scored_positions(ids, mask).iter().filter(|&&s| s).count()
    }

    /// Add `coef * d NLL / d θ` to `grad` and return the NLL.
    pub fn accumulate_nll_grad(&self, ids: &[TokenId], mask: LossMask, coef: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_ids(ids)?;
        if grad.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let tr = self.forward(ids, Self::scored_positions(ids, mask));
        let nll = Self::trace_nll(&tr, ids, self.config.vocab_size);
        if coef != 0.0 {
            self.backward(ids, &tr, coef, grad);
        }
        Ok(nll)
    }

    /// Next-token distributions at every position of `ids`.
    pub fn position_distributions(&self, ids: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        if ids.is_empty() || ids.len() > self.config.context_length {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                context: self.config.context_length,
            });
        }
        let vs = self.config.vocab_size;
        let tr = self.forward(ids, vec![true; ids.len()]);
        Ok(tr.probs.chunks(vs).map(<[f64]>::to_vec).collect())
    }

    fn wrong_terms(&self, ex: &Example, cfg: &LossConfig) -> Result<Vec<(f64, bool)>> {
        // (nll, capped?) per wrong sequence
        ex.wrong
            .iter()
            .map(|w| {
                let mask = w.mask(cfg);
                let nll = self.nll_masked(&w.ids, mask)?;
                Ok(match cfg.wrong_cap_per_token {
                    Some(cap) => {
                        let limit = cap * Self::scored_count(&w.ids, mask) as f64;
                        if nll > limit {
                            (limit, true)
                        } else {
                            (nll, false)
                        }
                    }
                    None => (nll, false),
                })
            })
            .collect()
    }

    /// `NLL(correct) − λ · mean(NLL(wrong))`.
    pub fn combined_loss(&self, ex: &Example, cfg: &LossConfig) -> Result<f64> {
        let correct = self.nll_masked(&ex.correct.ids, ex.correct.mask(cfg))?;
        if cfg.lambda == 0.0 {
            return Ok(correct);
        }
        if ex.wrong.is_empty() {
            return Err(Error::config("loss", "λ > 0 needs at least one wrong prompt"));
        }
        let terms = self.wrong_terms(ex, cfg)?;
        let mean = terms.iter().map(|t| t.0).sum::<f64>() / terms.len() as f64;
        Ok(correct - cfg.lambda * mean)
    }

    /// Exact gradient of [`combined_loss`](Self::combined_loss) for one record.
    pub fn per_sample_grad(&self, ex: &Example, cfg: &LossConfig) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_nll_grad(&ex.correct.ids, ex.correct.mask(cfg), 1.0, &mut grad)?;
        if cfg.lambda > 0.0 {
            if ex.wrong.is_empty() {
                return Err(Error::config("loss", "λ > 0 needs at least one wrong prompt"));
            }
            let coef = -cfg.lambda / ex.wrong.len() as f64;
            let capped = match cfg.wrong_cap_per_token {
                Some(_) => self.wrong_terms(ex, cfg)?.into_iter().map(|t| t.1).collect(),
                None => vec![false; ex.wrong.len()],
            };
            for (w, capped) in ex.wrong.iter().zip(capped) {
                if !capped {
                    self.accumulate_nll_grad(&w.ids, w.mask(cfg), coef, &mut grad)?;
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("per-sample gradient".into()));
        }
        Ok(grad)
    }

    /// Sample a continuation of `instruction` (which should start with BOS).
    /// The returned ids exclude the instruction and the terminating EOS.
    pub fn sample(&self, instruction: &[TokenId], sampler: &SamplerConfig, seed: u64) -> Result<Vec<TokenId>> {
        let ctx = self.config.context_length;
        if instruction.is_empty() || instruction.len() >= ctx {
            return Err(Error::SequenceTooLong {
                len: instruction.len(),
                context: ctx,
            });
        }
        let mut rng = seed::stream(seed, "sample", 0);
        let mut dec = Decoder::new(self);
        let mut probs = Vec::new();
        for &id in instruction {
            probs = dec.push(id);
        }
        let mut out = Vec::new();
        while instruction.len() + out.len() < ctx {
            if sampler.suppress_specials {
                for s in [PAD, BOS] {
                    probs[s as usize] = 0.0;
                }
            }
            let next = sample_nucleus(&probs, sampler.top_p, rng.random::<f64>());
            if next == EOS {
                break;
            }
            out.push(next);
            if instruction.len() + out.len() >= ctx {
                break;
            }
            probs = dec.push(next);
        }
        Ok(out)
    }
}

/// Incremental decoding with cached keys and values.
struct Decoder<'m> {
    model: &'m LanguageModel,
    lay: Layout,
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl<'m> Decoder<'m> {
    fn new(model: &'m LanguageModel) -> Self {
        Decoder {
            model,
            lay: Layout::new(&model.config),
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
        }
    }

    /// Append a token; return the next-token distribution.
    fn push(&mut self, id: TokenId) -> Vec<f64> {
        let (lay, cfg, p) = (self.lay, &self.model.config, &self.model.params);
        let (e, hd, vs) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
        let t = self.len;
        let x: Vec<f64> = p[lay.tok + id as usize * e..][..e]
            .iter()
            .zip(&p[lay.pos + t * e..][..e])
            .map(|(a, b)| a + b)
            .collect();
        let mut q = vec![0.0; e];
        let mut k = vec![0.0; e];
        let mut v = vec![0.0; e];
        matvec(&p[lay.wq..lay.wk], &x, &mut q);
        matvec(&p[lay.wk..lay.wv], &x, &mut k);
        matvec(&p[lay.wv..lay.wo], &x, &mut v);
        self.keys.extend_from_slice(&k);
        self.values.extend_from_slice(&v);
        self.len += 1;
        let scale = 1.0 / (e as f64).sqrt();
        let mut att: Vec<f64> = self.keys.chunks_exact(e).map(|kj| scale * dot(&q, kj)).collect();
        softmax_in_place(&mut att);
        let mut c = vec![0.0; e];
        for (a, vj) in att.iter().zip(self.values.chunks_exact(e)) {
            axpy(*a, vj, &mut c);
        }
        let mut h = vec![0.0; e];
        matvec(&p[lay.wo..lay.w1], &c, &mut h);
        for (hi, xi) in h.iter_mut().zip(&x) {
            *hi += xi;
        }
        let mut g = vec![0.0; hd];
        matvec(&p[lay.w1..lay.b1], &h, &mut g);
        for (gi, bi) in g.iter_mut().zip(&p[lay.b1..lay.w2]) {
            *gi = (*gi + bi).tanh();
        }
        let mut f = vec![0.0; e];
        matvec(&p[lay.w2..lay.b2], &g, &mut f);
        for ((fi, hi), bi) in f.iter_mut().zip(&h).zip(&p[lay.b2..lay.out_b]) {
            *fi += hi + bi;
        }
        let mut logits = vec![0.0; vs];
        matvec(&p[lay.tok..lay.pos], &f, &mut logits);
        for (l, b) in logits.iter_mut().zip(&p[lay.out_b..lay.total]) {
            *l += b;
        }
        softmax_in_place(&mut logits);
        logits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    /// Never emit PAD or BOS.
    #[serde(default = "default_true")]
    pub suppress_specials: bool,
}

pub const DEFAULT_TOP_P: f64 = 0.8;

fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}
fn default_true() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_p: DEFAULT_TOP_P,
            suppress_specials: true,
        }
    }
}

/// The nucleus of `probs`: the smallest prefix of tokens sorted by
/// decreasing probability (ties by id) whose mass reaches `top_p`,
/// renormalized. `top_p >= 1` keeps every token with non-zero mass.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(TokenId, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut keep = order.len();
    if top_p < 1.0 {
        let target = top_p * total;
        let mut cum = 0.0;
        for (n, &i) in order.iter().enumerate() {
            cum += probs[i];
            if cum >= target {
                keep = n + 1;
                break;
            }
        }
        keep = keep.max(1);
    }
    let kept = &order[..keep];
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    kept.iter().map(|&i| (i as TokenId, probs[i] / mass)).collect()
}

/// Draw from the nucleus using a uniform variate `u ∈ [0, 1)`.
pub fn sample_nucleus(probs: &[f64], top_p: f64, u: f64) -> TokenId {
    let nuc = nucleus(probs, top_p);
    let mut cum = 0.0;
    for &(id, p) in &nuc {
        cum += p;
        if u < cum {
            return id;
        }
    }
    nuc.last().map(|x| x.0).unwrap_or(EOS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_from_texts;

    fn tiny(e: usize, h: usize) -> LanguageModel {
        let vocab = build_from_texts(["a b c d e"], 16).unwrap();
        let mut cfg = ModelConfig::new(vocab.len());
        cfg.embed_dim = e;
        cfg.hidden_dim = h;
        cfg.context_length = 12;
        cfg.init_seed = 5;
        LanguageModel::new(cfg, vocab).unwrap()
    }

    #[test]
    fn param_count_is_function_of_config() {
        let m = tiny(4, 6);
        let c = m.config();
        let expect = 9 * 4 + 12 * 4 + 4 * 16 + 2 * 4 * 6 + 6 + 4 + 9;
        assert_eq!(c.param_count(), expect);
        assert_eq!(m.num_params(), expect);
    }

    #[test]
    fn zero_params_give_uniform_nll() {
        let m = tiny(4, 6);
        let zero = vec![0.0; m.num_params()];
        let m = LanguageModel::from_params(m.config().clone(), m.vocab().clone(), zero).unwrap();
        let ids = [BOS, 4, 5, 6, EOS];
        let expect = 4.0 * (9f64).ln();
        assert!((m.nll(&ids).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let m = tiny(4, 6);
        for row in m.position_distributions(&[BOS, 4, 7, 5, 8]).unwrap() {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_lengths() {
        let m = tiny(4, 6);
        assert!(matches!(m.nll(&[BOS]), Err(Error::SequenceTooShort(1))));
        assert!(matches!(m.nll(&[BOS; 13]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn trailing_padding_is_inert() {
        let m = tiny(4, 6);
        let base = [BOS, 4, 5, EOS];
        let padded = [BOS, 4, 5, EOS, PAD, PAD];
        let mut g1 = vec![0.0; m.num_params()];
        let mut g2 = vec![0.0; m.num_params()];
        let n1 = m.accumulate_nll_grad(&base, LossMask::ALL, 1.0, &mut g1).unwrap();
        let n2 = m.accumulate_nll_grad(&padded, LossMask::ALL, 1.0, &mut g2).unwrap();
        assert!((n1 - n2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_prefix_rule() {
        let nuc = nucleus(&[0.5, 0.3, 0.2], 0.8);
        assert_eq!(nuc.len(), 2);
        assert!((nuc[0].1 - 0.625).abs() < 1e-12);
        assert!((nuc[1].1 - 0.375).abs() < 1e-12);
        assert_eq!(nucleus(&[0.5, 0.3, 0.2], 1.0).len(), 3);
        assert_eq!(nucleus(&[0.2, 0.5, 0.3], 1e-9), vec![(1, 1.0)]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = tiny(4, 6);
        let s = SamplerConfig::default();
        let a = m.sample(&[BOS, 4], &s, 9).unwrap();
        assert_eq!(a, m.sample(&[BOS, 4], &s, 9).unwrap());
        assert!(a.len() + 2 <= 12);
        assert!(!a.contains(&EOS));
    }

    #[test]
    fn decoder_matches_full_forward() {
        let m = tiny(5, 7);
        let ids = [BOS, 4, 6, 5, 8, 7];
        let full = m.position_distributions(&ids).unwrap();
        let mut dec = Decoder::new(&m);
        for (t, &id) in ids.iter().enumerate() {
            let p = dec.push(id);
            for (a, b) in p.iter().zip(&full[t]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
