use dptwin::model::*;
use dptwin::tokenizer::{self, TokenId, BOS, EOS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(e: usize, ctx: usize, init_seed: u64) -> LanguageModel {
    let vocab = tokenizer::build_from_texts(["a b c"], 16).unwrap();
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.embed_dim = e;
    cfg.hidden_dim = 3;
    cfg.context_length = ctx;
    cfg.init_seed = init_seed;
    LanguageModel::new(cfg, vocab).unwrap()
}

fn log_softmax(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits[i] - m - z.ln()
}

#[test]
fn hand_set_three_token_nll() {
    // With attention and MLP weights at zero the block is the identity, so
    // the logits at position t are E (tok[id_t] + pos[t]) + b.
    let mut m = model(2, 4, 0);
    let v = m.config().vocab_size;
    let e = 2;
    let tok: Vec<[f64; 2]> = (0..v).map(|i| [0.3 * i as f64 - 0.5, (i as f64 * 0.7).sin()]).collect();
    let pos = [[0.1, -0.2], [0.4, 0.05], [-0.3, 0.2], [0.0, 0.0]];
    let bias: Vec<f64> = (0..v).map(|i| 0.05 * i as f64).collect();
    let p = m.params_mut();
    p.iter_mut().for_each(|x| *x = 0.0);
    for (i, t) in tok.iter().enumerate() {
        p[i * e..i * e + 2].copy_from_slice(t);
    }
    for (t, q) in pos.iter().enumerate() {
        p[v * e + t * e..v * e + t * e + 2].copy_from_slice(q);
    }
    let n = p.len();
    p[n - v..].copy_from_slice(&bias);

    let a = m.vocab().id("a").unwrap();
    let ids: [TokenId; 3] = [BOS, a, EOS];
    let mut want = 0.0;
    for t in 0..2 {
        let x = [tok[ids[t] as usize][0] + pos[t][0], tok[ids[t] as usize][1] + pos[t][1]];
        let logits: Vec<f64> = (0..v).map(|j| tok[j][0] * x[0] + tok[j][1] * x[1] + bias[j]).collect();
        want -= log_softmax(&logits, ids[t + 1] as usize);
    }
    let got = m.nll(&ids).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn zero_model_is_uniform() {
    let mut m = model(3, 8, 1);
    m.params_mut().iter_mut().for_each(|x| *x = 0.0);
    let v = m.config().vocab_size as f64;
    let a = m.vocab().id("a").unwrap();
    let ids = [BOS, a, a, EOS];
    assert!((m.nll(&ids).unwrap() - 3.0 * v.ln()).abs() < 1e-12);
}

#[test]
fn distributions_sum_to_one() {
    let m = model(4, 10, 7);
    let ids = m.vocab().ids("a b c a");
    for row in m.position_distributions(&ids).unwrap() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

fn example(m: &LanguageModel, correct: &str, wrong: &[&str]) -> Example {
    let seq = |s: &str| {
        let ids = tokenizer::encode(m.vocab(), s, m.config().context_length);
        Sequence::new(ids, 1)
    };
    Example {
        correct: seq(correct),
        wrong: wrong.iter().map(|w| seq(w)).collect(),
    }
}

#[test]
fn combined_loss_algebra() {
    let m = model(4, 10, 3);
    let ex = example(&m, "a b c", &["b b c", "c b c", "a a c"]);
    let nll = |s: &Sequence| m.nll(&s.ids).unwrap();
    let c = nll(&ex.correct);
    let ws: Vec<f64> = ex.wrong.iter().map(nll).collect();

    let zero = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    assert_eq!(m.combined_loss(&ex, &zero).unwrap(), c);
    let lone = Example {
        correct: ex.correct.clone(),
        wrong: vec![],
    };
    assert_eq!(m.combined_loss(&lone, &zero).unwrap(), c);
    assert_eq!(
        m.per_sample_grad(&ex, &zero).unwrap(),
        m.per_sample_grad(&lone, &zero).unwrap()
    );

    let cfg = LossConfig {
        lambda: 0.3,
        ..LossConfig::default()
    };
    let mean = ws.iter().sum::<f64>() / 3.0;
    assert!((m.combined_loss(&ex, &cfg).unwrap() - (c - 0.3 * mean)).abs() < 1e-12);

    // Mean, not sum: duplicating every wrong prompt leaves the loss unchanged.
    let mut doubled = ex.clone();
    doubled.wrong.extend(ex.wrong.clone());
    assert!((m.combined_loss(&doubled, &cfg).unwrap() - m.combined_loss(&ex, &cfg).unwrap()).abs() < 1e-12);

    assert!(m.combined_loss(&lone, &cfg).is_err());
}

#[test]
fn wrong_cap_bounds_the_penalty() {
    let m = model(4, 10, 3);
    let ex = example(&m, "a b c", &["b b c"]);
    let w = m.nll(&ex.wrong[0].ids).unwrap();
    let scored = LanguageModel::scored_count(&ex.wrong[0].ids, LossMask::ALL) as f64;
    let cap = 0.5 * w / scored;
    let cfg = LossConfig {
        lambda: 1.0,
        wrong_cap_per_token: Some(cap),
        ..LossConfig::default()
    };
    let c = m.nll(&ex.correct.ids).unwrap();
    assert!((m.combined_loss(&ex, &cfg).unwrap() - (c - cap * scored)).abs() < 1e-12);
    // A capped term contributes no gradient.
    let plain = LossConfig {
        lambda: 0.0,
        ..LossConfig::default()
    };
    assert_eq!(
        m.per_sample_grad(&ex, &cfg).unwrap(),
        m.per_sample_grad(&ex, &plain).unwrap()
    );
}

#[test]
fn sampling_is_a_function_of_the_seed() {
    let m = model(4, 16, 9);
    let instr = tokenizer::encode_prompt(m.vocab(), "a b");
    let s = SamplerConfig::default();
    let a = m.sample(&instr, &s, 42).unwrap();
    assert_eq!(a, m.sample(&instr, &s, 42).unwrap());
    let distinct: std::collections::HashSet<Vec<TokenId>> = (0..20).map(|k| m.sample(&instr, &s, k).unwrap()).collect();
    assert!(distinct.len() > 1);
    assert!(a.len() < 16);
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..40).prop_filter_map("non-zero mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-9).then(|| w.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn nucleus_is_the_minimal_prefix(probs in distribution(), pi in 0usize..3) {
        let top_p = [0.2, 0.8, 1.0][pi];
        let nuc = nucleus(&probs, top_p);
        prop_assert!(!nuc.is_empty());
        let total: f64 = probs.iter().sum();
        let kept: f64 = nuc.iter().map(|&(i, _)| probs[i as usize]).sum();
        prop_assert!(kept >= top_p.min(1.0) * total - 1e-12);
        // Minimal: dropping the smallest kept token falls below the target.
        if top_p < 1.0 && nuc.len() > 1 {
            let last = probs[nuc.last().unwrap().0 as usize];
            prop_assert!(kept - last < top_p * total);
        }
        // Every kept token is at least as likely as every dropped one.
        let min_kept = nuc.iter().map(|&(i, _)| probs[i as usize]).fold(f64::INFINITY, f64::min);
        for (i, &p) in probs.iter().enumerate() {
            if !nuc.iter().any(|&(j, _)| j as usize == i) {
                prop_assert!(p <= min_kept);
            }
        }
        let renorm: f64 = nuc.iter().map(|x| x.1).sum();
        prop_assert!((renorm - 1.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(probs.len() as u64);
        let id = sample_nucleus(&probs, top_p, rng.random::<f64>());
        prop_assert!(nuc.iter().any(|&(j, _)| j == id));
    }
}
