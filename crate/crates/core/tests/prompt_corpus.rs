use std::collections::{BTreeMap, HashSet};

use dptwin::corpus::*;
use dptwin::prompt::*;
use dptwin::tokenizer::{self, Vocabulary, BOS, EOS};
use proptest::prelude::*;

fn schema_of(sizes: &[usize]) -> AttributeSchema {
    AttributeSchema::new(
        sizes
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let values: Vec<String> = (0..k).map(|v| format!("a{j}v{v}")).collect();
                let refs: Vec<&str> = values.iter().map(String::as_str).collect();
                Attribute::new(&format!("a{j}"), &refs)
            })
            .collect(),
    )
    .unwrap()
}

fn template_of(sizes: &[usize]) -> String {
    let parts: Vec<String> = (0..sizes.len()).map(|j| format!("{{a{j}}}")).collect();
    format!("write about {} :", parts.join(" and "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instructions_are_injective(sizes in prop::collection::vec(2usize..5, 1..4)) {
        let schema = schema_of(&sizes);
        let template = PromptTemplate::for_schema(&template_of(&sizes), &schema).unwrap();
        let all = schema.assignments();
        prop_assert_eq!(all.len(), sizes.iter().product::<usize>());
        let rendered: HashSet<String> = all.iter().map(|a| render(&template, &schema, a).unwrap()).collect();
        prop_assert_eq!(rendered.len(), all.len());
    }

    #[test]
    fn wrong_prompt_set_sizes(sizes in prop::collection::vec(2usize..5, 1..4), pick in 0usize..1000) {
        let schema = schema_of(&sizes);
        let all = schema.assignments();
        let a = &all[pick % all.len()];
        let every = wrong_assignments(&schema, a, WrongPromptMode::AllDiffer).unwrap();
        prop_assert_eq!(every.len(), sizes.iter().map(|k| k - 1).product::<usize>());
        for w in &every {
            for name in schema.names() {
                prop_assert_ne!(&w[&name], &a[&name]);
            }
        }
        let any = wrong_assignments(&schema, a, WrongPromptMode::AnyDiffer).unwrap();
        prop_assert_eq!(any.len(), all.len() - 1);
        prop_assert!(!any.contains(a));
    }

    #[test]
    fn jsonl_round_trip(texts in prop::collection::vec("[a-zA-Z0-9 \"\\\\é,.!?]{0,30}[a-z]", 0..30), labels in prop::collection::vec(0usize..3, 30)) {
        let schema = schema_of(&[2]);
        let recs: Vec<LabeledRecord> = texts
            .iter()
            .zip(&labels)
            .map(|(t, &l)| {
                let mut a = BTreeMap::new();
                if l < 2 {
                    a.insert("a0".to_string(), format!("a0v{l}"));
                }
                LabeledRecord::new(t.clone(), a)
            })
            .collect();
        let c = Corpus::new(recs, schema.clone(), CorpusRole::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&c, &path).unwrap();
        let back = load_jsonl(&path, &schema, CorpusRole::Train).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn split_is_a_stratified_partition(per_class in prop::collection::vec(1usize..40, 2..4), f in 0.1f64..0.9, seed in 0u64..1000) {
        let schema = schema_of(&[per_class.len()]);
        let mut recs = Vec::new();
        for (c, &k) in per_class.iter().enumerate() {
            for i in 0..k {
                let mut a = BTreeMap::new();
                a.insert("a0".to_string(), format!("a0v{c}"));
                recs.push(LabeledRecord::new(format!("rec {c} {i}"), a));
            }
        }
        let c = Corpus::new(recs, schema, CorpusRole::Train).unwrap();
        let (train, test) = split(&c, f, seed).unwrap();
        let n = c.len();
        prop_assert_eq!(train.len(), (n as f64 * f).floor() as usize);
        prop_assert_eq!(train.len() + test.len(), n);
        let mut all: Vec<&str> = train.records().iter().chain(test.records()).map(|r| r.text.as_str()).collect();
        all.sort();
        let mut orig: Vec<&str> = c.records().iter().map(|r| r.text.as_str()).collect();
        orig.sort();
        prop_assert_eq!(all, orig);
        // Each class gets its proportional share up to rounding.
        for (a, k) in c.class_counts() {
            let got = train.class_counts().get(&a).copied().unwrap_or(0) as f64;
            let want = k as f64 * train.len() as f64 / n as f64;
            prop_assert!((got - want).abs() < per_class.len() as f64 + 1.0);
        }
    }

    #[test]
    fn encode_decode_round_trip(words in prop::collection::vec("[a-z]{1,6}", 1..20), ctx in 3usize..40) {
        let text = words.join(" ");
        let v = tokenizer::build_from_texts([text.as_str()], 1024).unwrap();
        let ids = tokenizer::encode(&v, &text, ctx);
        prop_assert!(ids.len() <= ctx);
        prop_assert_eq!(ids[0], BOS);
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        let decoded = tokenizer::decode(&v, &ids).unwrap();
        let kept = (ctx - 2).min(words.len());
        prop_assert_eq!(decoded, words[..kept].join(" "));
    }
}

#[test]
fn render_examples() {
    let schema = AttributeSchema::new(vec![
        Attribute::new("sentiment", &["positive", "negative"]),
        Attribute::new("category", &["books", "electronics"])
            .with_verbalizer(&[("electronics", "an electronics product")]),
    ])
    .unwrap();
    let t = PromptTemplate::for_schema("write a {sentiment} review of {category} :", &schema).unwrap();
    let mut a = BTreeMap::new();
    a.insert("sentiment".to_string(), "negative".to_string());
    a.insert("category".to_string(), "electronics".to_string());
    assert_eq!(
        render(&t, &schema, &a).unwrap(),
        "write a negative review of an electronics product :"
    );
    assert_eq!(
        wrong_prompts(&t, &schema, &a).unwrap(),
        vec!["write a positive review of books :".to_string()]
    );
    assert!(PromptTemplate::for_schema("a {sentiment} review", &schema).is_err());
    a.remove("category");
    assert!(render(&t, &schema, &a).is_err());
}

#[test]
fn vocabulary_specials_and_unknowns() {
    let v = tokenizer::build_from_texts(["b a a c"], 6).unwrap();
    assert_eq!(v.len(), 6);
    assert_eq!(v.id("a"), Some(Vocabulary::FIRST_LEARNED));
    assert_eq!(v.ids("a zzz"), vec![4, tokenizer::UNK]);
    assert_eq!(
        tokenizer::decode(&v, &[4, tokenizer::UNK]).unwrap(),
        format!("a {}", tokenizer::UNK_MARKER)
    );
}
