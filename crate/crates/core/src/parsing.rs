//! Mapping raw model output to a canonical label, a blank or a hallucination.
//!
//! Resolution runs as a cascade and stops at the first stage that matches:
//!
//! 1. empty or whitespace-only output is a blank;
//! 2. a leading option number (`2`, `2.`, `Answer: (2)`, `Option 2`) or a
//!    quoted one (`"2"`) selects that option through the prompt's option order;
//! 3. the normalized text equals a normalized option text or canonical label id;
//! 4. anything else is a hallucination, optionally mapped to a relation style.
//!
//! Normalization lowercases, collapses whitespace and strips terminal
//! punctuation and quotes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::RunRecord;
use crate::dataset::{Instance, RelationSchema};
use crate::prompting::PromptVariant;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ParsedLabel {
    Label {
        label: String,
    },
    Blank,
    Hallucination {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        style: Option<String>,
    },
}

impl ParsedLabel {
    pub fn label(label: impl Into<String>) -> Self {
        ParsedLabel::Label { label: label.into() }
    }

    pub fn hallucination(text: impl Into<String>, style: Option<&str>) -> Self {
        ParsedLabel::Hallucination {
            text: text.into(),
            style: style.map(str::to_string),
        }
    }

    pub fn as_label(&self) -> Option<&str> {
        match self {
            ParsedLabel::Label { label } => Some(label),
            _ => None,
        }
    }

    pub fn is_blank(&self) -> bool {
        matches!(self, ParsedLabel::Blank)
    }

    pub fn is_hallucination(&self) -> bool {
        matches!(self, ParsedLabel::Hallucination { .. })
    }

    /// Agreement category: labels by id, and one shared category each for
    /// blanks and hallucinations.
    pub fn category(&self) -> String {
        match self {
            ParsedLabel::Label { label } => label.clone(),
            ParsedLabel::Blank => "<blank>".to_string(),
            ParsedLabel::Hallucination { .. } => "<hallucination>".to_string(),
        }
    }
}

static ANSWER_PREFIX: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:the\s+)?(?:correct\s+|final\s+|best\s+)?answer(?:\s+is)?\s*[:\-]?\s*").unwrap()
});
static LEADING_NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)^(?:option\s*)?[\("'\[]?\s*(\d+)\s*(?:[\.\):\]"',;!?]|\s|$)"#).unwrap()
});
static QUOTED_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"["'“‘](\d+)["'”’]"#).unwrap());

const TRIM_CHARS: &[char] = &['"', '\'', '“', '”', '‘', '’', '`', '*'];
const TERMINAL_PUNCT: &[char] = &['.', '!', '?', ';', ':', ','];

/// Lowercase, collapse whitespace, strip terminal punctuation and quotes.
pub fn normalize(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut s = collapsed.to_lowercase();
    loop {
        let trimmed = s
            .trim()
            .trim_start_matches(TRIM_CHARS)
            .trim_end_matches(TRIM_CHARS)
            .trim_end_matches(TERMINAL_PUNCT)
            .trim();
        if trimmed.len() == s.len() {
            return s;
        }
        s = trimmed.to_string();
    }
}

fn strip_answer_prefix(text: &str) -> &str {
    let mut s = text.trim();
    while let Some(m) = ANSWER_PREFIX.find(s) {
        if m.end() == 0 {
            break;
        }
        s = s[m.end()..].trim_start();
    }
    s
}

/// Phrase patterns that map free-text relations onto canonical styles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleLexicon {
    styles: BTreeMap<String, Vec<String>>,
}

impl StyleLexicon {
    pub fn new(styles: BTreeMap<String, Vec<String>>) -> Self {
        let styles = styles
            .into_iter()
            .map(|(style, patterns)| {
                let mut patterns: Vec<String> = patterns.iter().map(|p| normalize(p)).collect();
                patterns.push(style.replace('_', " "));
                patterns.sort();
                patterns.dedup();
                (style, patterns)
            })
            .collect();
        Self { styles }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(std::io::Error::other)
    }

    pub fn styles(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.styles.iter().map(|(s, p)| (s.as_str(), p.as_slice()))
    }

    /// The style whose longest matching pattern is longest; ties go to the
    /// smaller style id. Patterns match on word boundaries.
    pub fn canonicalize(&self, text: &str) -> Option<&str> {
        let norm = normalize(text);
        let mut best: Option<(usize, &str)> = None;
        for (style, patterns) in &self.styles {
            for pattern in patterns {
                if contains_phrase(&norm, pattern) {
                    let len = pattern.chars().count();
                    if best.is_none_or(|(l, _)| len > l) {
                        best = Some((len, style));
                    }
                }
            }
        }
        best.map(|(_, style)| style)
    }
}

impl Default for StyleLexicon {
    fn default() -> Self {
        let entries: [(&str, &[&str]); 4] = [
            (
                "agreement_with",
                &[
                    "agreement with",
                    "agreements with",
                    "agreement between",
                    "contract with",
                    "contracts with",
                    "partnership with",
                    "partnered with",
                ],
            ),
            (
                "shares_of",
                &[
                    "shares of",
                    "share of",
                    "stake in",
                    "equity interest in",
                    "stock of",
                    "shareholder of",
                ],
            ),
            (
                "member_of",
                &["member of", "members of", "director of", "board member of", "on the board of"],
            ),
            (
                "subsidiary_of",
                &[
                    "subsidiary of",
                    "subsidiaries of",
                    "wholly owned by",
                    "owned subsidiary",
                    "division of",
                    "unit of",
                ],
            ),
        ];
        Self::new(
            entries
                .iter()
                .map(|(s, p)| (s.to_string(), p.iter().map(|x| x.to_string()).collect()))
                .collect(),
        )
    }
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    if phrase.is_empty() {
        return false;
    }
    haystack.match_indices(phrase).any(|(i, m)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Style lookup with the default lexicon.
pub fn canonicalize_hallucination(text: &str) -> Option<String> {
    StyleLexicon::default().canonicalize(text).map(str::to_string)
}

#[derive(Debug, Clone, Default)]
pub struct ResponseParser {
    lexicon: StyleLexicon,
}

impl ResponseParser {
    pub fn new(lexicon: StyleLexicon) -> Self {
        Self { lexicon }
    }

    pub fn lexicon(&self) -> &StyleLexicon {
        &self.lexicon
    }

    /// `option_order[k]` and `option_texts[k]` describe displayed option `k + 1`.
    pub fn parse(&self, raw: &str, option_order: &[String], option_texts: &[String]) -> ParsedLabel {
        if raw.trim().is_empty() {
            return ParsedLabel::Blank;
        }
        let body = strip_answer_prefix(raw);

        let by_number = |digits: &str| {
            digits
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1 && n <= option_order.len())
                .map(|n| option_order[n - 1].clone())
        };
        if let Some(label) = LEADING_NUMBER
            .captures(body)
            .and_then(|c| by_number(c.get(1).unwrap().as_str()))
        {
            return ParsedLabel::Label { label };
        }
        if let Some(label) = QUOTED_NUMBER
            .captures(body)
            .and_then(|c| by_number(c.get(1).unwrap().as_str()))
        {
            return ParsedLabel::Label { label };
        }

        let norm = normalize(body);
        for (label, text) in option_order.iter().zip(option_texts) {
            if norm == normalize(text) {
                return ParsedLabel::Label { label: label.clone() };
            }
        }
        for label in option_order {
            let id = label.to_lowercase();
            if norm == id || norm == id.replace('_', " ") {
                return ParsedLabel::Label { label: label.clone() };
            }
        }
        if norm.is_empty() {
            return ParsedLabel::Blank;
        }
        let style = self.lexicon.canonicalize(&norm).map(str::to_string);
        ParsedLabel::Hallucination { text: norm, style }
    }
}

/// Parses with the default style lexicon.
pub fn parse_response(raw: &str, option_order: &[String], option_texts: &[String]) -> ParsedLabel {
    ResponseParser::default().parse(raw, option_order, option_texts)
}

/// One annotator's parsed judgement on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub instance_id: String,
    pub backend: String,
    pub variant: PromptVariant,
    pub temperature: f64,
    pub run_index: u32,
    pub raw: String,
    pub parsed: ParsedLabel,
    pub option_order: Vec<String>,
}

impl AnnotationRecord {
    /// Re-renders the recorded option order against the schema and parses.
    pub fn from_run_record(
        record: &RunRecord,
        instance: &Instance,
        schema: &RelationSchema,
        parser: &ResponseParser,
    ) -> Self {
        let texts: Vec<String> = record
            .option_order
            .iter()
            .map(|l| {
                schema
                    .render_option(l, &instance.e1.surface, &instance.e2.surface)
                    .unwrap_or_else(|| l.clone())
            })
            .collect();
        let parsed = parser.parse(&record.response.text, &record.option_order, &texts);
        Self {
            instance_id: record.response.instance_id.clone(),
            backend: record.response.backend.clone(),
            variant: record.response.variant,
            temperature: record.temperature,
            run_index: record.response.run_index,
            raw: record.response.text.clone(),
            parsed,
            option_order: record.option_order.clone(),
        }
    }
}
