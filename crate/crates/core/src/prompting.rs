//! Prompt rendering for the six prompt variants.
//!
//! Every prompt is built from three pieces: an optional instruction, a body
//! (the task description around the marked sentence, preceded by exemplars
//! for few-shot variants) and a numbered option block. Backends differ only in
//! how they order those pieces next to a system-role message; see
//! [`StyleBook`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{mark_entities, Instance, RelationSchema};
use crate::rng::SplitMix64;

pub const SYSTEM_ROLE: &str = "You are an AI assistant and relation extraction checker. You read the prompt, note where the entities in question are and determine the relation between them. Once done, please select from option which best suits the relation.";

pub const FEW_SHOT_INSTRUCTION: &str = "Select the statement that best describes the relation in the example sentence below. Ignore any grammatical errors. If there are multiple options, please choose the one that is clearest and most obvious from the sentence.";

pub const OPTIONS_HEADER: &str = "Please choose the MOST appropriate relation from the following options:";

const REFERENCE_EXEMPLARS: &str = include_str!("../fixtures/org_date_exemplars.json");
const DEFAULT_STYLES: &str = include_str!("../fixtures/backend_styles.json");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no {variant} exemplars for pair type {pair_type} (need {needed}, have {available})")]
    MissingExemplars {
        pair_type: String,
        variant: PromptVariant,
        needed: usize,
        available: usize,
    },
    #[error("exemplar bank: {0}")]
    InvalidBank(String),
    #[error("unknown backend style {0}")]
    UnknownStyle(String),
    #[error("backend style {style}: {reason}")]
    InvalidStyle { style: String, reason: String },
    #[error("unknown prompt variant {0}")]
    UnknownVariant(String),
    #[error("failed to read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Simple,
    FullInstruction,
    OneShot,
    FiveShot,
    OneShotCot,
    FiveShotCot,
}

/// Prompt families sharing a composition order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptFamily {
    ZeroShot,
    FewShot,
    FewShotCot,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 6] = [
        PromptVariant::Simple,
        PromptVariant::FullInstruction,
        PromptVariant::OneShot,
        PromptVariant::FiveShot,
        PromptVariant::OneShotCot,
        PromptVariant::FiveShotCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Simple => "simple",
            PromptVariant::FullInstruction => "full_instruction",
            PromptVariant::OneShot => "one_shot",
            PromptVariant::FiveShot => "five_shot",
            PromptVariant::OneShotCot => "one_shot_cot",
            PromptVariant::FiveShotCot => "five_shot_cot",
        }
    }

    pub fn exemplar_count(self) -> usize {
        match self {
            PromptVariant::Simple | PromptVariant::FullInstruction => 0,
            PromptVariant::OneShot | PromptVariant::OneShotCot => 1,
            PromptVariant::FiveShot | PromptVariant::FiveShotCot => 5,
        }
    }

    pub fn is_cot(self) -> bool {
        matches!(self, PromptVariant::OneShotCot | PromptVariant::FiveShotCot)
    }

    pub fn family(self) -> PromptFamily {
        match self {
            PromptVariant::Simple | PromptVariant::FullInstruction => PromptFamily::ZeroShot,
            PromptVariant::OneShot | PromptVariant::FiveShot => PromptFamily::FewShot,
            PromptVariant::OneShotCot | PromptVariant::FiveShotCot => PromptFamily::FewShotCot,
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| PromptError::UnknownVariant(s.to_string()))
    }
}

/// A worked example shown ahead of the target sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    #[serde(default)]
    pub pair_type: String,
    /// Sentence with entity markers already in place.
    pub sentence: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarBank {
    entries: BTreeMap<(String, PromptVariant), Vec<Exemplar>>,
}

impl ExemplarBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        pair_type: &str,
        variant: PromptVariant,
        exemplars: Vec<Exemplar>,
    ) -> Result<(), PromptError> {
        if variant.exemplar_count() == 0 {
            return Err(PromptError::InvalidBank(format!(
                "{variant} is zero-shot and takes no exemplars"
            )));
        }
        let mut checked = Vec::with_capacity(exemplars.len());
        for mut ex in exemplars {
            if ex.pair_type.is_empty() {
                ex.pair_type = pair_type.to_string();
            } else if ex.pair_type != pair_type {
                return Err(PromptError::InvalidBank(format!(
                    "exemplar for {} filed under {pair_type}",
                    ex.pair_type
                )));
            }
            if ex.sentence.trim().is_empty() || ex.answer.trim().is_empty() {
                return Err(PromptError::InvalidBank(format!(
                    "{pair_type}/{variant}: exemplar with empty sentence or answer"
                )));
            }
            if variant.is_cot() && ex.reasoning.as_deref().is_none_or(|r| r.trim().is_empty()) {
                return Err(PromptError::InvalidBank(format!(
                    "{pair_type}/{variant}: chain-of-thought exemplar without reasoning"
                )));
            }
            checked.push(ex);
        }
        self.entries.insert((pair_type.to_string(), variant), checked);
        Ok(())
    }

    /// The exemplars a variant draws for a pair type: the first 1 or 5 stored.
    pub fn draw(&self, pair_type: &str, variant: PromptVariant) -> Result<&[Exemplar], PromptError> {
        let needed = variant.exemplar_count();
        if needed == 0 {
            return Ok(&[]);
        }
        let stored = self
            .entries
            .get(&(pair_type.to_string(), variant))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        if stored.len() < needed {
            return Err(PromptError::MissingExemplars {
                pair_type: pair_type.to_string(),
                variant,
                needed,
                available: stored.len(),
            });
        }
        Ok(&stored[..needed])
    }

    pub fn pair_types(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|(p, _)| p.as_str())
    }

    /// Merges `other` into `self`, replacing colliding entries.
    pub fn extend(&mut self, other: ExemplarBank) {
        self.entries.extend(other.entries);
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let raw: BTreeMap<String, BTreeMap<String, Vec<Exemplar>>> = serde_json::from_str(text)?;
        let mut bank = Self::new();
        for (pair_type, by_variant) in raw {
            for (variant, exemplars) in by_variant {
                bank.insert(&pair_type, variant.parse()?, exemplars)?;
            }
        }
        Ok(bank)
    }

    pub fn to_json(&self) -> String {
        let mut raw: BTreeMap<&str, BTreeMap<&str, &Vec<Exemplar>>> = BTreeMap::new();
        for ((pair, variant), exemplars) in &self.entries {
            raw.entry(pair).or_default().insert(variant.as_str(), exemplars);
        }
        serde_json::to_string_pretty(&raw).expect("bank serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_json(&read(path)?)
    }

    /// The ORG-DATE bank shipped with the crate.
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_EXEMPLARS).expect("bundled exemplar bank is valid")
    }
}

fn read(path: &Path) -> Result<String, PromptError> {
    std::fs::read_to_string(path).map_err(|e| PromptError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// The separately addressable pieces of a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub system_role: String,
    pub instruction: Option<String>,
    /// Task text around the marked sentence, with exemplars for few-shot variants.
    pub body: String,
    pub options: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub instance_id: String,
    pub variant: PromptVariant,
    pub text: String,
    /// `option_order[k]` is the canonical label displayed as option `k + 1`.
    pub option_order: Vec<String>,
    /// Rendered option texts, aligned with `option_order`.
    pub option_texts: Vec<String>,
    pub shuffle_seed: u64,
    pub parts: PromptParts,
}

/// Seeded permutation of `labels` for one instance.
pub fn shuffle_options(labels: &[String], seed: u64, instance_id: &str) -> Vec<String> {
    let mut order = labels.to_vec();
    SplitMix64::keyed(seed, instance_id).shuffle(&mut order);
    order
}

pub fn render_option_block(option_texts: &[String]) -> String {
    let mut block = String::from(OPTIONS_HEADER);
    for (i, text) in option_texts.iter().enumerate() {
        block.push_str(&format!("\n{}. {}", i + 1, text));
    }
    block
}

fn render_exemplars(exemplars: &[Exemplar], with_reasoning: bool) -> String {
    let mut out = String::new();
    for (i, ex) in exemplars.iter().enumerate() {
        let n = i + 1;
        out.push_str(&format!("Example Sentence {n}: {}\n", ex.sentence));
        out.push_str(&format!("Answer to Example {n}: {}\n", ex.answer));
        if with_reasoning {
            if let Some(reasoning) = &ex.reasoning {
                out.push_str(reasoning);
                out.push('\n');
            }
        }
    }
    out
}

/// Renders one prompt. Deterministic in all inputs; never reads the gold label.
pub fn build_prompt(
    instance: &Instance,
    schema: &RelationSchema,
    variant: PromptVariant,
    bank: &ExemplarBank,
    seed: u64,
) -> Result<RenderedPrompt, PromptError> {
    let exemplars = bank.draw(&instance.pair_type, variant)?;
    let marked = mark_entities(instance);
    let (e1, e2) = (instance.e1.surface.as_str(), instance.e2.surface.as_str());

    let option_order = shuffle_options(&schema.labels, seed, &instance.id);
    let option_texts: Vec<String> = option_order
        .iter()
        .map(|l| schema.render_option(l, e1, e2).expect("schema validated"))
        .collect();
    let options = render_option_block(&option_texts);

    let (instruction, body) = match variant {
        PromptVariant::Simple => (
            None,
            format!(
                "In the context of this sentence: {marked} Note the location of the {e1} and {e2} as highlighted to help determine the relation given the listed options below."
            ),
        ),
        PromptVariant::FullInstruction => {
            let task = match &schema.task {
                Some(t) => format!("Select {t} relationship described in one sentence."),
                None => "Select the relationship described in one sentence.".to_string(),
            };
            (
                None,
                format!(
                    "{task} Given a single sentence: {marked} With 2 highlighted phrases: {e1} and {e2}. Select a multiple choice answer from options below, which best describes the relation between {e1} and {e2}."
                ),
            )
        }
        _ => (
            Some(FEW_SHOT_INSTRUCTION.to_string()),
            format!(
                "{}\nFollowing the example above, read through this sentence: {marked} Given the location of the {e1} and {e2} as highlighted, choose an answer from listed options below.",
                render_exemplars(exemplars, variant.is_cot())
            ),
        ),
    };

    let text = match &instruction {
        Some(ins) => format!("{ins}\n\n{body}\n\n{options}"),
        None => format!("{body}\n\n{options}"),
    };

    Ok(RenderedPrompt {
        instance_id: instance.id.clone(),
        variant,
        text,
        option_order,
        option_texts,
        shuffle_seed: seed,
        parts: PromptParts {
            system_role: SYSTEM_ROLE.to_string(),
            instruction,
            body,
            options,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPart {
    SystemRole,
    Instruction,
    /// The marked sentence with its task text (zero-shot).
    Prompt,
    /// Exemplars followed by the marked sentence (few-shot).
    PromptWithExamples,
    Options,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleComposition {
    pub zero_shot: Vec<PromptPart>,
    pub few_shot: Vec<PromptPart>,
    pub few_shot_cot: Vec<PromptPart>,
}

impl StyleComposition {
    fn for_family(&self, family: PromptFamily) -> &[PromptPart] {
        match family {
            PromptFamily::ZeroShot => &self.zero_shot,
            PromptFamily::FewShot => &self.few_shot,
            PromptFamily::FewShotCot => &self.few_shot_cot,
        }
    }
}

/// Part ordering per backend style.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleBook {
    styles: BTreeMap<String, StyleComposition>,
}

impl StyleBook {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let styles: BTreeMap<String, StyleComposition> = serde_json::from_str(text)?;
        for (name, comp) in &styles {
            for (family, parts) in [
                ("zero_shot", &comp.zero_shot),
                ("few_shot", &comp.few_shot),
                ("few_shot_cot", &comp.few_shot_cot),
            ] {
                let invalid = |reason: &str| PromptError::InvalidStyle {
                    style: name.clone(),
                    reason: format!("{family}: {reason}"),
                };
                let count = |p: PromptPart| parts.iter().filter(|&&q| q == p).count();
                if count(PromptPart::Options) != 1 {
                    return Err(invalid("option block must appear exactly once"));
                }
                if count(PromptPart::Prompt) + count(PromptPart::PromptWithExamples) != 1 {
                    return Err(invalid("sentence part must appear exactly once"));
                }
                if count(PromptPart::SystemRole) > 1 || count(PromptPart::Instruction) > 1 {
                    return Err(invalid("repeated part"));
                }
            }
        }
        Ok(Self { styles })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_json(&read(path)?)
    }

    pub fn style_names(&self) -> impl Iterator<Item = &str> {
        self.styles.keys().map(String::as_str)
    }

    pub fn backend_composition(
        &self,
        variant: PromptVariant,
        style: &str,
    ) -> Result<Vec<PromptPart>, PromptError> {
        self.styles
            .get(style)
            .map(|c| c.for_family(variant.family()).to_vec())
            .ok_or_else(|| PromptError::UnknownStyle(style.to_string()))
    }

    /// Text segments of `prompt` in the style's order. Parts the variant does
    /// not have (an instruction on a zero-shot prompt) are skipped.
    pub fn compose(
        &self,
        prompt: &RenderedPrompt,
        style: &str,
    ) -> Result<Vec<(PromptPart, String)>, PromptError> {
        let order = self.backend_composition(prompt.variant, style)?;
        Ok(order
            .into_iter()
            .filter_map(|part| {
                let text = match part {
                    PromptPart::SystemRole => Some(prompt.parts.system_role.clone()),
                    PromptPart::Instruction => prompt.parts.instruction.clone(),
                    PromptPart::Prompt | PromptPart::PromptWithExamples => {
                        Some(prompt.parts.body.clone())
                    }
                    PromptPart::Options => Some(prompt.parts.options.clone()),
                };
                text.map(|t| (part, t))
            })
            .collect())
    }
}

impl Default for StyleBook {
    fn default() -> Self {
        Self::from_json(DEFAULT_STYLES).expect("bundled styles are valid")
    }
}
