//! Attribute schemas, instruction templates, and wrong-prompt enumeration.
//!
//! An instruction is rendered by substituting the verbalization of each
//! attribute value into a `{name}` placeholder. The wrong-prompt set for an
//! assignment is the set of instructions whose attribute values all differ
//! from the true ones (or, under [`WrongPromptMode::AnyDiffer`], differ in at
//! least one attribute).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Attribute name to categorical value.
pub type Assignment = BTreeMap<String, String>;

/// One categorical attribute with its value set and verbalizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    /// Ordered value set; order defines value indices.
    pub values: Vec<String>,
    /// Value to its string form inside a template. Values missing here
    /// verbalize as themselves.
    #[serde(default)]
    pub verbalizer: BTreeMap<String, String>,
}

impl Attribute {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Attribute {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
            verbalizer: BTreeMap::new(),
        }
    }

    pub fn with_verbalizer(mut self, pairs: &[(&str, &str)]) -> Self {
        for (k, v) in pairs {
            self.verbalizer.insert(k.to_string(), v.to_string());
        }
        self
    }

    pub fn verbalize<'a>(&'a self, value: &'a str) -> &'a str {
        self.verbalizer.get(value).map(String::as_str).unwrap_or(value)
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// The attributes a record is labeled with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Schema("at least one attribute is required".into()));
        }
        let mut names = HashSet::new();
        for a in &attributes {
            if !names.insert(a.name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute '{}'", a.name)));
            }
            if a.values.len() < 2 {
                return Err(Error::Schema(format!("attribute '{}' needs at least 2 values", a.name)));
            }
            let distinct: HashSet<_> = a.values.iter().collect();
            if distinct.len() != a.values.len() {
                return Err(Error::Schema(format!("attribute '{}' has repeated values", a.name)));
            }
            if let Some(k) = a.verbalizer.keys().find(|k| a.index_of(k).is_none()) {
                return Err(Error::Schema(format!(
                    "verbalizer of '{}' names unknown value '{k}'",
                    a.name
                )));
            }
            let verbal: HashSet<_> = a.values.iter().map(|v| a.verbalize(v)).collect();
            if verbal.len() != a.values.len() {
                return Err(Error::Schema(format!(
                    "verbalizations of '{}' are not pairwise distinct",
                    a.name
                )));
            }
        }
        Ok(AttributeSchema { attributes })
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    /// Check that `a` assigns exactly one known value to every attribute.
    pub fn check_complete(&self, a: &Assignment) -> Result<()> {
        self.check_partial(a)?;
        for attr in &self.attributes {
            if !a.contains_key(&attr.name) {
                return Err(Error::Assignment(format!("attribute '{}' is unassigned", attr.name)));
            }
        }
        Ok(())
    }

    /// Check that every key of `a` is a known attribute with a known value.
    pub fn check_partial(&self, a: &Assignment) -> Result<()> {
        for (k, v) in a {
            let attr = self
                .attribute(k)
                .ok_or_else(|| Error::Assignment(format!("unknown attribute '{k}'")))?;
            if attr.index_of(v).is_none() {
                return Err(Error::Assignment(format!("unknown value '{v}' for attribute '{k}'")));
            }
        }
        Ok(())
    }

    /// All complete assignments, in lexicographic order of value indices.
    pub fn assignments(&self) -> Vec<Assignment> {
        let sets: Vec<Vec<String>> = self.attributes.iter().map(|a| a.values.clone()).collect();
        product(&self.names(), &sets)
    }

    pub fn names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }
}

impl TryFrom<Vec<Attribute>> for AttributeSchema {
    type Error = Error;

    fn try_from(v: Vec<Attribute>) -> Result<Self> {
        AttributeSchema::new(v)
    }
}

impl From<AttributeSchema> for Vec<Attribute> {
    fn from(s: AttributeSchema) -> Self {
        s.attributes
    }
}

fn product(names: &[String], sets: &[Vec<String>]) -> Vec<Assignment> {
    let mut out = vec![Assignment::new()];
    for (name, values) in names.iter().zip(sets) {
        let mut next = Vec::with_capacity(out.len() * values.len());
        for partial in &out {
            for v in values {
                let mut a = partial.clone();
                a.insert(name.clone(), v.clone());
                next.push(a);
            }
        }
        out = next;
    }
    out
}

/// Which assignments count as "wrong" for the mismatch penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongPromptMode {
    /// Every attribute takes a value different from the true one.
    #[default]
    AllDiffer,
    /// At least one attribute differs.
    AnyDiffer,
}

/// A template such as `"Write a {sentiment} review about {category}:"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    template: String,
    placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn parse(template: &str) -> Result<Self> {
        let mut placeholders = BTreeSet::new();
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let close = after
                .find('}')
                .ok_or_else(|| Error::Template(format!("unclosed '{{' in {template:?}")))?;
            let name = &after[..close];
            if name.is_empty() || name.contains('{') {
                return Err(Error::Template(format!("malformed placeholder in {template:?}")));
            }
            placeholders.insert(name.to_string());
            rest = &after[close + 1..];
        }
        if rest.contains('}') {
            return Err(Error::Template(format!("stray '}}' in {template:?}")));
        }
        Ok(PromptTemplate {
            template: template.to_string(),
            placeholders,
        })
    }

    /// Parse and check that placeholders match the schema's attribute names.
    pub fn for_schema(template: &str, schema: &AttributeSchema) -> Result<Self> {
        let t = Self::parse(template)?;
        t.check_schema(schema)?;
        Ok(t)
    }

    pub fn check_schema(&self, schema: &AttributeSchema) -> Result<()> {
        let names: BTreeSet<String> = schema.names().into_iter().collect();
        if let Some(m) = names.difference(&self.placeholders).next() {
            return Err(Error::Template(format!("missing placeholder {{{m}}}")));
        }
        if let Some(x) = self.placeholders.difference(&names).next() {
            return Err(Error::Template(format!(
                "placeholder {{{x}}} is not a schema attribute"
            )));
        }
        Ok(())
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        PromptTemplate::parse(&s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> Self {
        t.template
    }
}

/// Render the instruction `i(a)`.
pub fn render(template: &PromptTemplate, schema: &AttributeSchema, a: &Assignment) -> Result<String> {
    template.check_schema(schema)?;
    schema.check_complete(a)?;
    let mut out = template.template.clone();
    for attr in schema.attributes() {
        let v = &a[&attr.name];
        out = out.replace(&format!("{{{}}}", attr.name), attr.verbalize(v));
    }
    Ok(out)
}

/// Assignments whose instructions form the wrong-prompt set of `a`,
/// in lexicographic order of value indices.
pub fn wrong_assignments(schema: &AttributeSchema, a: &Assignment, mode: WrongPromptMode) -> Result<Vec<Assignment>> {
    schema.check_complete(a)?;
    Ok(match mode {
        WrongPromptMode::AllDiffer => {
            let sets: Vec<Vec<String>> = schema
                .attributes()
                .iter()
                .map(|attr| attr.values.iter().filter(|v| **v != a[&attr.name]).cloned().collect())
                .collect();
            product(&schema.names(), &sets)
        }
        WrongPromptMode::AnyDiffer => schema.assignments().into_iter().filter(|b| b != a).collect(),
    })
}

/// The wrong-prompt set: every attribute simultaneously differs.
pub fn wrong_prompts(template: &PromptTemplate, schema: &AttributeSchema, a: &Assignment) -> Result<Vec<String>> {
    wrong_prompts_with(template, schema, a, WrongPromptMode::AllDiffer)
}

pub fn wrong_prompts_with(
    template: &PromptTemplate,
    schema: &AttributeSchema,
    a: &Assignment,
    mode: WrongPromptMode,
) -> Result<Vec<String>> {
    wrong_assignments(schema, a, mode)?
        .iter()
        .map(|w| render(template, schema, w))
        .collect()
}

/// `k` wrong prompts drawn uniformly without replacement (all of them when
/// `k` is at least the set size).
pub fn sample_wrong_prompts(
    template: &PromptTemplate,
    schema: &AttributeSchema,
    a: &Assignment,
    k: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let all = wrong_prompts(template, schema, a)?;
    Ok(sample_subset(all, k, seed))
}

pub(crate) fn sample_subset<T: Clone>(all: Vec<T>, k: usize, seed: u64) -> Vec<T> {
    if k >= all.len() {
        return all;
    }
    let mut rng = seed::stream(seed, "wrong-prompts", 0);
    index::sample(&mut rng, all.len(), k)
        .into_iter()
        .map(|i| all[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn amazon() -> AttributeSchema {
        AttributeSchema::new(vec![
            Attribute::new("sentiment", &["positive", "negative"]),
            Attribute::new("category", &["books", "dvd", "electronics", "kitchen"])
                .with_verbalizer(&[("books", "a book")]),
        ])
        .unwrap()
    }

    fn assign(pairs: &[(&str, &str)]) -> Assignment {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn renders_template() {
        let s = amazon();
        let t = PromptTemplate::for_schema("Write a {sentiment} review about {category}:", &s).unwrap();
        let out = render(&t, &s, &assign(&[("sentiment", "positive"), ("category", "books")])).unwrap();
        assert_eq!(out, "Write a positive review about a book:");
    }

    #[test]
    fn renders_single_attribute() {
        let s = AttributeSchema::new(vec![Attribute::new("sentiment", &["positive", "negative"])]).unwrap();
        let t = PromptTemplate::for_schema("Write a {sentiment} review:", &s).unwrap();
        assert_eq!(
            render(&t, &s, &assign(&[("sentiment", "negative")])).unwrap(),
            "Write a negative review:"
        );
    }

    #[test]
    fn render_rejects_missing_and_unknown() {
        let s = amazon();
        let t = PromptTemplate::for_schema("Write a {sentiment} review about {category}:", &s).unwrap();
        assert!(render(&t, &s, &assign(&[("sentiment", "positive")])).is_err());
        assert!(render(&t, &s, &assign(&[("sentiment", "happy"), ("category", "dvd")])).is_err());
    }

    #[test]
    fn template_must_match_schema() {
        let s = amazon();
        assert!(PromptTemplate::for_schema("Write a {sentiment} review:", &s).is_err());
        assert!(PromptTemplate::for_schema("{sentiment} {category} {tone}", &s).is_err());
        assert!(PromptTemplate::parse("oops {sentiment").is_err());
    }

    #[test]
    fn schema_invariants() {
        assert!(AttributeSchema::new(vec![]).is_err());
        assert!(AttributeSchema::new(vec![Attribute::new("x", &["only"])]).is_err());
        let clash = Attribute::new("x", &["a", "b"]).with_verbalizer(&[("a", "b")]);
        assert!(AttributeSchema::new(vec![clash]).is_err());
    }

    #[test]
    fn wrong_prompts_binary() {
        let s = AttributeSchema::new(vec![Attribute::new("sentiment", &["positive", "negative"])]).unwrap();
        let t = PromptTemplate::for_schema("Write a {sentiment} review:", &s).unwrap();
        let w = wrong_prompts(&t, &s, &assign(&[("sentiment", "positive")])).unwrap();
        assert_eq!(w, vec!["Write a negative review:".to_string()]);
    }

    #[test]
    fn wrong_prompts_all_attributes_differ() {
        let s = amazon();
        let a = assign(&[("sentiment", "positive"), ("category", "books")]);
        let w = wrong_assignments(&s, &a, WrongPromptMode::AllDiffer).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w
            .iter()
            .all(|b| b["sentiment"] == "negative" && b["category"] != "books"));
        assert_eq!(w[0]["category"], "dvd");
        assert_eq!(w[2]["category"], "kitchen");

        let any = wrong_assignments(&s, &a, WrongPromptMode::AnyDiffer).unwrap();
        assert_eq!(any.len(), 2 * 4 - 1);
    }

    #[test]
    fn sampled_wrong_prompts_are_a_subset() {
        let s = amazon();
        let t = PromptTemplate::for_schema("Write a {sentiment} review about {category}:", &s).unwrap();
        let a = assign(&[("sentiment", "positive"), ("category", "books")]);
        let all = wrong_prompts(&t, &s, &a).unwrap();
        let one = sample_wrong_prompts(&t, &s, &a, 1, 42).unwrap();
        assert_eq!(one.len(), 1);
        assert!(all.contains(&one[0]));
        assert_eq!(one, sample_wrong_prompts(&t, &s, &a, 1, 42).unwrap());
        let mut full = sample_wrong_prompts(&t, &s, &a, 10, 1).unwrap();
        let mut expect = all.clone();
        full.sort();
        expect.sort();
        assert_eq!(full, expect);
    }

    #[test]
    fn serde_round_trip() {
        let s = amazon();
        let json = serde_json::to_string(&s).unwrap();
        let back: AttributeSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
        let bad = r#"[{"name":"x","values":["a"]}]"#;
        assert!(serde_json::from_str::<AttributeSchema>(bad).is_err());
    }
}
