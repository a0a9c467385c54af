//! Attribute-structured task generation.
//!
//! Tasks are sets of templated prompts fully described by a small attribute
//! schema (for example io/subject/order). A closed word-level vocabulary
//! guarantees that every attribute value is a single token and that all
//! prompts of a task share token length and slot positions, which positional
//! means and dictionary fitting depend on.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::cross_entropy;
use crate::model::{Model, ModelError, TokenId};
use crate::rng::{sample_distinct, uniform_usize, Rng};

#[derive(Clone, Debug, PartialEq)]
pub enum TaskError {
    UnknownWord { word: String },
    UnknownAttribute { name: String },
    UnknownValue { attribute: String, value: String },
    SlotWithoutAttribute { slot: String },
    MultiTokenValue { value: String },
    DuplicateAttribute { name: String },
    EmptyValueSet { attribute: String },
    MisalignedTemplates { reason: &'static str },
    SingletonAttribute { attribute: String },
    MissingAssignment { attribute: String },
    ConstraintUnsatisfiable { attribute: String },
    SamplerExceededIterations { iterations: usize, best_ce: f64 },
    PoolTooSmall { needed: usize, got: usize },
    Model(ModelError),
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskError::UnknownWord { word } => write!(f, "word {word:?} not in vocabulary"),
            TaskError::UnknownAttribute { name } => write!(f, "unknown attribute {name:?}"),
            TaskError::UnknownValue { attribute, value } => {
                write!(f, "attribute {attribute:?} has no value {value:?}")
            }
            TaskError::SlotWithoutAttribute { slot } => {
                write!(f, "template slot {{{slot}}} has no schema attribute")
            }
            TaskError::MultiTokenValue { value } => {
                write!(f, "value {value:?} does not tokenize to a single token")
            }
            TaskError::DuplicateAttribute { name } => {
                write!(f, "duplicate attribute name {name:?}")
            }
            TaskError::EmptyValueSet { attribute } => {
                write!(f, "attribute {attribute:?} has an empty value set")
            }
            TaskError::MisalignedTemplates { reason } => {
                write!(f, "templates misaligned: {reason}")
            }
            TaskError::SingletonAttribute { attribute } => {
                write!(f, "attribute {attribute:?} has a single value; no counterfactual exists")
            }
            TaskError::MissingAssignment { attribute } => {
                write!(f, "assignment is missing attribute {attribute:?}")
            }
            TaskError::ConstraintUnsatisfiable { attribute } => {
                write!(f, "no admissible value left for attribute {attribute:?}")
            }
            TaskError::SamplerExceededIterations { iterations, best_ce } => write!(
                f,
                "induction sampler hit the {iterations}-iteration cap; best mean cross-entropy {best_ce}"
            ),
            TaskError::PoolTooSmall { needed, got } => {
                write!(f, "token pool of size {got} cannot supply {needed} distinct tokens")
            }
            TaskError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl From<ModelError> for TaskError {
    fn from(e: ModelError) -> Self {
        TaskError::Model(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered attribute schema; the order fixes indicator-column layout in
/// dictionary fitting and the iteration order of samplers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn get(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    /// Total number of (attribute, value) pairs.
    pub fn total_values(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).sum()
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        for (i, a) in self.attributes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(TaskError::EmptyValueSet {
                    attribute: a.name.clone(),
                });
            }
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(TaskError::DuplicateAttribute {
                    name: a.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Bijective word-level tokenizer over a closed vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, TokenId>,
}

impl Tokenizer {
    /// Builds a tokenizer from any word collection; words are deduplicated
    /// and sorted so that ids do not depend on insertion order.
    pub fn new(words: impl IntoIterator<Item = String>) -> Tokenizer {
        let mut sorted: Vec<String> = words.into_iter().collect();
        sorted.sort();
        sorted.dedup();
        let index = sorted
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer {
            words: sorted,
            index,
        }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<TokenId, TaskError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| TaskError::UnknownWord {
                word: word.to_string(),
            })
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Splits text into canonical words: whitespace-separated, with commas
    /// and periods as standalone tokens.
    pub fn canonical_words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let mut current = String::new();
            for ch in raw.chars() {
                if ch == ',' || ch == '.' {
                    if !current.is_empty() {
                        out.push(core::mem::take(&mut current));
                    }
                    out.push(ch.to_string());
                } else {
                    current.push(ch);
                }
            }
            if !current.is_empty() {
                out.push(current);
            }
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, TaskError> {
        Self::canonical_words(text)
            .iter()
            .map(|w| self.id(w))
            .collect()
    }

    /// Canonical text form: words joined by single spaces.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One element of a template: a literal word or an attribute slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Piece {
    Lit(String),
    Slot(String),
}

/// A prompt template with one token pattern per order-attribute value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub variants: BTreeMap<String, Vec<Piece>>,
}

impl Template {
    /// Parses `{slot}` syntax out of canonical text, one text per order value.
    pub fn from_text(name: &str, variants: &[(&str, &str)]) -> Template {
        let mut map = BTreeMap::new();
        for (value, text) in variants {
            let pieces = Tokenizer::canonical_words(text)
                .into_iter()
                .map(|w| {
                    if w.starts_with('{') && w.ends_with('}') && w.len() > 2 {
                        Piece::Slot(w[1..w.len() - 1].to_string())
                    } else {
                        Piece::Lit(w)
                    }
                })
                .collect();
            map.insert(value.to_string(), pieces);
        }
        Template {
            name: name.to_string(),
            variants: map,
        }
    }

    /// Canonical `{slot}` text form of one variant.
    pub fn to_text(&self, variant: &str) -> Option<String> {
        let pieces = self.variants.get(variant)?;
        Some(
            pieces
                .iter()
                .map(|p| match p {
                    Piece::Lit(w) => w.clone(),
                    Piece::Slot(s) => format!("{{{s}}}"),
                })
                .collect::<Vec<_>>()
                .join(" "),
        )
    }

    fn slot_positions(&self, variant: &str) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        if let Some(pieces) = self.variants.get(variant) {
            for (i, p) in pieces.iter().enumerate() {
                if let Piece::Slot(s) = p {
                    out.entry(s.clone()).or_default().push(i);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Complete task definition: schema, templates, and sampling constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub schema: AttributeSchema,
    /// The attribute whose value selects a template variant.
    pub order_attribute: String,
    /// Attribute whose token is the prediction target.
    pub target_attribute: String,
    /// Attribute whose token is the logit-diff counterpart.
    pub contrast_attribute: String,
    /// Attribute pairs that must not share a value within one prompt.
    pub distinct_pairs: Vec<(String, String)>,
    pub train_templates: Vec<Template>,
    pub test_templates: Vec<Template>,
    /// Additional vocabulary (e.g. the sequence pool) folded into the
    /// tokenizer so the model can be trained before the task is finalised.
    pub extra_vocab: Vec<String>,
}

impl TaskSpec {
    pub fn templates(&self, split: Split) -> &[Template] {
        match split {
            Split::Train => &self.train_templates,
            Split::Test => &self.test_templates,
        }
    }

    pub fn all_templates(&self) -> impl Iterator<Item = &Template> {
        self.train_templates.iter().chain(self.test_templates.iter())
    }

    pub fn template(&self, name: &str) -> Option<&Template> {
        self.all_templates().find(|t| t.name == name)
    }

    /// Vocabulary covering every literal, every attribute value and the
    /// extra pool; sorted, so token ids are stable.
    pub fn tokenizer(&self) -> Tokenizer {
        let mut words: Vec<String> = Vec::new();
        for a in &self.schema.attributes {
            if a.name != self.order_attribute {
                words.extend(a.values.iter().cloned());
            }
        }
        for t in self.all_templates() {
            for pieces in t.variants.values() {
                for p in pieces {
                    if let Piece::Lit(w) = p {
                        words.push(w.clone());
                    }
                }
            }
        }
        words.extend(self.extra_vocab.iter().cloned());
        Tokenizer::new(words)
    }

    pub fn validate(&self, tokenizer: &Tokenizer) -> Result<(), TaskError> {
        self.schema.validate()?;
        for name in [
            &self.order_attribute,
            &self.target_attribute,
            &self.contrast_attribute,
        ] {
            if self.schema.get(name).is_none() {
                return Err(TaskError::UnknownAttribute { name: name.clone() });
            }
        }
        // Every non-order value must be a single token.
        for a in &self.schema.attributes {
            if a.name == self.order_attribute {
                continue;
            }
            for v in &a.values {
                let words = Tokenizer::canonical_words(v);
                if words.len() != 1 {
                    return Err(TaskError::MultiTokenValue { value: v.clone() });
                }
                tokenizer.id(&words[0])?;
            }
        }
        let order_values = &self.schema.get(&self.order_attribute).unwrap().values;
        let mut expected_len: Option<usize> = None;
        let mut expected_slots: Option<Vec<usize>> = None;
        for t in self.all_templates() {
            for v in order_values {
                let pieces = t.variants.get(v).ok_or(TaskError::MisalignedTemplates {
                    reason: "template missing an order variant",
                })?;
                match expected_len {
                    None => expected_len = Some(pieces.len()),
                    Some(len) if len != pieces.len() => {
                        return Err(TaskError::MisalignedTemplates {
                            reason: "templates differ in token length",
                        })
                    }
                    _ => {}
                }
                let slots: Vec<usize> = pieces
                    .iter()
                    .enumerate()
                    .filter_map(|(i, p)| matches!(p, Piece::Slot(_)).then_some(i))
                    .collect();
                match &expected_slots {
                    None => expected_slots = Some(slots),
                    Some(e) if *e != slots => {
                        return Err(TaskError::MisalignedTemplates {
                            reason: "templates differ in slot positions",
                        })
                    }
                    _ => {}
                }
                for p in pieces {
                    if let Piece::Slot(s) = p {
                        if self.schema.get(s).is_none() {
                            return Err(TaskError::SlotWithoutAttribute { slot: s.clone() });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Token length shared by all prompts of the task.
    pub fn prompt_len(&self) -> usize {
        self.all_templates()
            .flat_map(|t| t.variants.values())
            .map(Vec::len)
            .next()
            .unwrap_or(0)
    }

    /// Last token position occupied by any attribute slot.
    pub fn last_attribute_position(&self) -> usize {
        self.all_templates()
            .flat_map(|t| t.variants.values())
            .flat_map(|pieces| {
                pieces
                    .iter()
                    .enumerate()
                    .filter_map(|(i, p)| matches!(p, Piece::Slot(_)).then_some(i))
            })
            .max()
            .unwrap_or(0)
    }
}

/// One realized prompt with its attribute assignment and token targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub tokens: Vec<TokenId>,
    pub assignment: BTreeMap<String, String>,
    pub template: String,
    pub target: TokenId,
    pub contrast: TokenId,
}

/// A clean/corrupt prompt pair differing in exactly one attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub clean: TaskPrompt,
    pub corrupt: TaskPrompt,
    pub varied_attribute: String,
}

/// Renders a template under a full attribute assignment.
pub fn render(
    task: &TaskSpec,
    tokenizer: &Tokenizer,
    template_name: &str,
    assignment: &BTreeMap<String, String>,
) -> Result<TaskPrompt, TaskError> {
    let template = task
        .template(template_name)
        .ok_or(TaskError::MisalignedTemplates {
            reason: "unknown template",
        })?;
    let order_value = assignment
        .get(&task.order_attribute)
        .ok_or_else(|| TaskError::MissingAssignment {
            attribute: task.order_attribute.clone(),
        })?;
    let pieces = template
        .variants
        .get(order_value)
        .ok_or_else(|| TaskError::UnknownValue {
            attribute: task.order_attribute.clone(),
            value: order_value.clone(),
        })?;
    let mut tokens = Vec::with_capacity(pieces.len());
    for piece in pieces {
        let word = match piece {
            Piece::Lit(w) => w,
            Piece::Slot(s) => assignment.get(s).ok_or_else(|| TaskError::MissingAssignment {
                attribute: s.clone(),
            })?,
        };
        tokens.push(tokenizer.id(word)?);
    }
    let target_value =
        assignment
            .get(&task.target_attribute)
            .ok_or_else(|| TaskError::MissingAssignment {
                attribute: task.target_attribute.clone(),
            })?;
    let contrast_value =
        assignment
            .get(&task.contrast_attribute)
            .ok_or_else(|| TaskError::MissingAssignment {
                attribute: task.contrast_attribute.clone(),
            })?;
    Ok(TaskPrompt {
        tokens,
        assignment: assignment.clone(),
        template: template_name.to_string(),
        target: tokenizer.id(target_value)?,
        contrast: tokenizer.id(contrast_value)?,
    })
}

fn admissible_values<'a>(
    task: &'a TaskSpec,
    attribute: &str,
    partial: &BTreeMap<String, String>,
) -> Vec<&'a String> {
    let attr = task.schema.get(attribute).expect("validated attribute");
    attr.values
        .iter()
        .filter(|v| {
            !task.distinct_pairs.iter().any(|(a, b)| {
                let other = if a == attribute {
                    Some(b)
                } else if b == attribute {
                    Some(a)
                } else {
                    None
                };
                other
                    .and_then(|o| partial.get(o))
                    .is_some_and(|ov| ov == *v)
            })
        })
        .collect()
}

/// Samples a prompt uniformly: template, order variant, then attribute values
/// in schema order subject to the task's distinctness constraints.
pub fn sample_prompt(
    task: &TaskSpec,
    tokenizer: &Tokenizer,
    split: Split,
    rng: &mut Rng,
) -> Result<TaskPrompt, TaskError> {
    let templates = task.templates(split);
    if templates.is_empty() {
        return Err(TaskError::MisalignedTemplates {
            reason: "no templates in split",
        });
    }
    let template = &templates[uniform_usize(rng, templates.len())];
    let mut assignment = BTreeMap::new();
    for attr in &task.schema.attributes {
        let candidates = admissible_values(task, &attr.name, &assignment);
        if candidates.is_empty() {
            return Err(TaskError::ConstraintUnsatisfiable {
                attribute: attr.name.clone(),
            });
        }
        let value = candidates[uniform_usize(rng, candidates.len())].clone();
        assignment.insert(attr.name.clone(), value);
    }
    render(task, tokenizer, &template.name, &assignment)
}

/// Resamples exactly one attribute of `prompt` to a different value,
/// producing a minimal counterfactual pair.
pub fn sample_counterfactual(
    task: &TaskSpec,
    tokenizer: &Tokenizer,
    prompt: &TaskPrompt,
    attribute: &str,
    rng: &mut Rng,
) -> Result<CounterfactualPair, TaskError> {
    let attr = task
        .schema
        .get(attribute)
        .ok_or_else(|| TaskError::UnknownAttribute {
            name: attribute.to_string(),
        })?;
    if attr.values.len() < 2 {
        return Err(TaskError::SingletonAttribute {
            attribute: attribute.to_string(),
        });
    }
    let current = prompt
        .assignment
        .get(attribute)
        .ok_or_else(|| TaskError::MissingAssignment {
            attribute: attribute.to_string(),
        })?;
    let mut others = prompt.assignment.clone();
    others.remove(attribute);
    let candidates: Vec<&String> = admissible_values(task, attribute, &others)
        .into_iter()
        .filter(|v| *v != current)
        .collect();
    if candidates.is_empty() {
        return Err(TaskError::ConstraintUnsatisfiable {
            attribute: attribute.to_string(),
        });
    }
    let new_value = candidates[uniform_usize(rng, candidates.len())].clone();
    let mut corrupt_assignment = prompt.assignment.clone();
    corrupt_assignment.insert(attribute.to_string(), new_value);
    let corrupt = render(task, tokenizer, &prompt.template, &corrupt_assignment)?;
    Ok(CounterfactualPair {
        clean: prompt.clone(),
        corrupt,
        varied_attribute: attribute.to_string(),
    })
}

/// Builds the IOI-style task over ten single-token names: two training
/// templates, one held-out test template, and both name orderings.
pub fn build_ioi_task(names: &[String]) -> Result<TaskSpec, TaskError> {
    for name in names {
        if Tokenizer::canonical_words(name).len() != 1 {
            return Err(TaskError::MultiTokenValue {
                value: name.clone(),
            });
        }
    }
    let schema = AttributeSchema {
        attributes: vec![
            Attribute {
                name: "io".to_string(),
                values: names.to_vec(),
            },
            Attribute {
                name: "subject".to_string(),
                values: names.to_vec(),
            },
            Attribute {
                name: "order".to_string(),
                values: vec!["abb".to_string(), "bab".to_string()],
            },
        ],
    };
    let make = |name: &str, middle: &str, tail: &str| {
        let abb = format!("Then, {{io}} and {{subject}} {middle}. {{subject}} {tail}");
        let bab = format!("Then, {{subject}} and {{io}} {middle}. {{subject}} {tail}");
        Template::from_text(name, &[("abb", &abb), ("bab", &bab)])
    };
    let task = TaskSpec {
        schema,
        order_attribute: "order".to_string(),
        target_attribute: "io".to_string(),
        contrast_attribute: "subject".to_string(),
        distinct_pairs: vec![("io".to_string(), "subject".to_string())],
        train_templates: vec![
            make("drink", "had a long argument", "gave a drink to"),
            make("apple", "went to the store", "gave an apple to"),
        ],
        test_templates: vec![make("cake", "went to the cafe", "gave the cake to")],
        extra_vocab: Vec::new(),
    };
    let tokenizer = task.tokenizer();
    task.validate(&tokenizer)?;
    Ok(task)
}

/// Configuration for the induction sequence sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InductionSamplerConfig {
    /// Prefix length n.
    pub prefix_len: usize,
    /// Number of probe tokens m.
    pub probe_count: usize,
    /// Mean cross-entropy acceptance threshold tau (nats).
    pub threshold: f64,
    pub max_iterations: usize,
}

impl Default for InductionSamplerConfig {
    fn default() -> Self {
        InductionSamplerConfig {
            prefix_len: 10,
            probe_count: 5,
            threshold: 1.0,
            max_iterations: 10_000,
        }
    }
}

/// Mean cross-entropy of the model predicting each probe `t` at the end of
/// `r + t + r`.
pub fn induction_score(
    model: &Model,
    prefix: &[TokenId],
    probes: &[TokenId],
) -> Result<f64, TaskError> {
    let mut total = 0.0;
    for &t in probes {
        let mut x = Vec::with_capacity(2 * prefix.len() + 1);
        x.extend_from_slice(prefix);
        x.push(t);
        x.extend_from_slice(prefix);
        let run = model.forward(&x)?;
        let logits = run.logits().last().expect("nonempty sequence");
        total += cross_entropy(logits, t).expect("probe token within vocabulary");
    }
    Ok(total / probes.len() as f64)
}

/// Draws prefixes until the model performs induction on them with mean
/// cross-entropy at most the threshold; the accepted prefix is re-scored
/// before it is returned.
pub fn sample_induction_sequence(
    model: &Model,
    pool: &[TokenId],
    config: &InductionSamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<TokenId>, TaskError> {
    let needed = config.prefix_len + config.probe_count;
    if pool.len() < needed {
        return Err(TaskError::PoolTooSmall {
            needed,
            got: pool.len(),
        });
    }
    let mut best_ce = f64::INFINITY;
    for _ in 0..config.max_iterations {
        let drawn = sample_distinct(rng, pool.len(), needed);
        let prefix: Vec<TokenId> = drawn[..config.prefix_len].iter().map(|&i| pool[i]).collect();
        let probes: Vec<TokenId> = drawn[config.prefix_len..].iter().map(|&i| pool[i]).collect();
        let ce = induction_score(model, &prefix, &probes)?;
        if ce < best_ce {
            best_ce = ce;
        }
        if ce <= config.threshold {
            // Re-verify the acceptance before handing the sequence out.
            let recheck = induction_score(model, &prefix, &probes)?;
            if recheck <= config.threshold {
                return Ok(prefix);
            }
        }
    }
    Err(TaskError::SamplerExceededIterations {
        iterations: config.max_iterations,
        best_ce,
    })
}

/// Builds the induction task: ind1/ind2 token features over a configurable
/// pool plus a high-level order attribute, with sampled sequences baked into
/// the templates (two train sequences, one test sequence).
pub fn build_induction_task(
    train_seqs: &[Vec<String>],
    test_seq: &[String],
    feature_pool: &[String],
    seq_vocab: &[String],
) -> Result<TaskSpec, TaskError> {
    for v in feature_pool {
        if Tokenizer::canonical_words(v).len() != 1 {
            return Err(TaskError::MultiTokenValue { value: v.clone() });
        }
    }
    let schema = AttributeSchema {
        attributes: vec![
            Attribute {
                name: "ind1".to_string(),
                values: feature_pool.to_vec(),
            },
            Attribute {
                name: "ind2".to_string(),
                values: feature_pool.to_vec(),
            },
            Attribute {
                name: "order".to_string(),
                values: vec!["alt".to_string(), "blk".to_string()],
            },
        ],
    };
    let template_for = |name: &str, seq: &[String]| {
        let seq_text = seq.join(" ");
        // alt: ... {ind2},{ind1},{ind2},{ind1} ... {ind2},{ind1},
        let alt = format!("{seq_text} {{ind2}},{{ind1}},{{ind2}},{{ind1}} {seq_text} {{ind2}},{{ind1}},");
        // blk: ... {ind1},{ind1},{ind2},{ind2} ... {ind1},{ind1},
        let blk = format!("{seq_text} {{ind1}},{{ind1}},{{ind2}},{{ind2}} {seq_text} {{ind1}},{{ind1}},");
        Template::from_text(name, &[("alt", &alt), ("blk", &blk)])
    };
    let train_templates = train_seqs
        .iter()
        .enumerate()
        .map(|(i, seq)| template_for(&format!("train{i}"), seq))
        .collect();
    let test_templates = vec![template_for("test", test_seq)];
    let mut extra_vocab: Vec<String> = seq_vocab.to_vec();
    extra_vocab.push(",".to_string());
    let task = TaskSpec {
        schema,
        order_attribute: "order".to_string(),
        target_attribute: "ind2".to_string(),
        contrast_attribute: "ind1".to_string(),
        distinct_pairs: vec![("ind1".to_string(), "ind2".to_string())],
        train_templates,
        test_templates,
        extra_vocab,
    };
    let tokenizer = task.tokenizer();
    task.validate(&tokenizer)?;
    Ok(task)
}

/// Slot positions of each attribute in one template variant.
pub fn slot_positions(template: &Template, variant: &str) -> BTreeMap<String, Vec<usize>> {
    template.slot_positions(variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        ["Alice", "Bob", "Carol", "Dave", "Erin", "Frank", "Grace", "Heidi", "Ivan", "Judy"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn ioi_templates_render_both_orders() {
        let task = build_ioi_task(&names()).unwrap();
        let tokenizer = task.tokenizer();
        let mut assignment = BTreeMap::new();
        assignment.insert("io".to_string(), "Alice".to_string());
        assignment.insert("subject".to_string(), "Bob".to_string());
        assignment.insert("order".to_string(), "abb".to_string());
        let p = render(&task, &tokenizer, "drink", &assignment).unwrap();
        assert_eq!(
            tokenizer.detokenize(&p.tokens),
            "Then , Alice and Bob had a long argument . Bob gave a drink to"
        );
        assignment.insert("order".to_string(), "bab".to_string());
        let p = render(&task, &tokenizer, "drink", &assignment).unwrap();
        assert_eq!(
            tokenizer.detokenize(&p.tokens),
            "Then , Bob and Alice had a long argument . Bob gave a drink to"
        );
        assert_eq!(p.target, tokenizer.id("Alice").unwrap());
        assert_eq!(p.contrast, tokenizer.id("Bob").unwrap());
    }

    #[test]
    fn train_and_test_templates_are_disjoint() {
        let task = build_ioi_task(&names()).unwrap();
        for train in &task.train_templates {
            for test in &task.test_templates {
                assert_ne!(train.name, test.name);
                assert_ne!(train.variants, test.variants);
            }
        }
    }

    #[test]
    fn multi_token_name_rejected() {
        let mut bad = names();
        bad[0] = "Alice Smith".to_string();
        assert!(matches!(
            build_ioi_task(&bad),
            Err(TaskError::MultiTokenValue { .. })
        ));
    }
}
